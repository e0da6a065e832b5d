"""Supervised training, denoising pretraining and dataset evaluation.

Workers are simulated in one process: each step's shards are evaluated one
after another against the same parameters and their gradients summed (the
losses are normalised by global label counts, so the sum is the gradient of
the global-batch loss). The metrics log records the simulated wall time,
i.e. the sum over steps of the slowest shard.
"""

from __future__ import annotations

import logging
import math
import os
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .. import autodiff as ad
from ..errors import NumericalError, ValidationError
from ..graphgen import build_atom_graph, build_line_graph
from ..model.config import ModelConfig
from ..model.network import DenoiseInputs, GraphBatch, predict
from ..model.params import ParameterSet, init_params, load_checkpoint, save_checkpoint
from ..structio import fit_reference_energies, split_dataset
from .batching import load_balanced_batches
from .config import TrainConfig
from .denoise import NoiseSchedule, denoise_corrupt
from .losses import EV_A3_TO_GPA, LabelCounts, denoise_loss, label_counts, total_loss
from .optim import AdamWState, adamw_step, cosine_lr

log = logging.getLogger(__name__)

MODES = ("supervised", "denoise")

LOG_COLUMNS = (
    "epoch", "lr", "train_loss", "train_energy", "train_force", "train_stress", "train_magmom",
    "train_noise", "grad_norm", "val_energy_mae", "val_force_mae", "val_stress_mae", "val_noise_mse",
    "train_energy_mae", "train_force_mae", "seconds", "sim_wall",
)


# ----------------------------------------------------------------------------
# evaluation
# ----------------------------------------------------------------------------


@dataclass
class Metrics:
    """MAEs in eV/atom, eV/Å, GPa and μB; None where no structure is labeled."""

    n_structures: int
    energy_mae: float | None
    force_mae: float | None
    stress_mae: float | None
    magmom_mae: float | None
    per_structure: list = field(default_factory=list)

    @property
    def skipped(self) -> list[str]:
        names = ("energy", "force", "stress", "magmom")
        vals = (self.energy_mae, self.force_mae, self.stress_mae, self.magmom_mae)
        return [n for n, v in zip(names, vals) if v is None]


def _graphs(s, cfg: ModelConfig):
    g = build_atom_graph(s, cfg.r_cut_a)
    return g, build_line_graph(g, cfg.r_cut_l)


def evaluate_dataset(params: ParameterSet, structures, config: ModelConfig | None = None, *, graphs=None) -> Metrics:
    """Predict every structure and compare with whichever labels it carries."""
    cfg = config or params.config
    structures = list(structures)
    if not structures:
        raise ValidationError("empty dataset")
    rows = []
    e_err, f_abs, s_abs, m_abs = [], [], [], []
    for k, s in enumerate(structures):
        gl = graphs[k] if graphs is not None else _graphs(s, cfg)
        batch = GraphBatch([s], cfg, graphs=[gl])
        want_s = s.stress is not None and s.periodic
        pred = predict(batch, params, cfg, forces=s.forces is not None, stress=want_s)
        row = {"index": k, "n_atoms": len(s), "energy": float(pred.energy.data[0])}
        if s.energy is not None and len(s):
            row["energy_error"] = abs(row["energy"] - s.energy) / len(s)
            e_err.append(row["energy_error"])
        if s.forces is not None and len(s):
            d = np.abs(pred.forces.data - s.forces)
            row["force_mae"] = float(d.mean())
            f_abs.append(d.reshape(-1))
        if want_s:
            d = np.abs(pred.stress.data[0] - s.stress) * EV_A3_TO_GPA
            row["stress_mae"] = float(d.mean())
            s_abs.append(d.reshape(-1))
        if s.magmoms is not None and pred.magmoms is not None and len(s):
            d = np.abs(pred.magmoms.data - s.magmoms)
            row["magmom_mae"] = float(d.mean())
            m_abs.append(d)
        rows.append(row)

    def mean(parts):
        return float(np.concatenate(parts).mean()) if parts else None

    return Metrics(
        len(structures),
        float(np.mean(e_err)) if e_err else None,
        mean(f_abs),
        mean(s_abs),
        mean(m_abs),
        rows,
    )


def evaluate_noise(params: ParameterSet, structures, config: ModelConfig, schedule: NoiseSchedule, seed: int) -> float:
    """Noise MSE on freshly corrupted copies (fixed seed, so epochs compare)."""
    rng = np.random.default_rng(seed)
    total, count = 0.0, 0
    for s in structures:
        c = denoise_corrupt(s, schedule, rng, config.r_cut_a)
        batch = GraphBatch([c.structure], config, graphs=[(c.graph, build_line_graph(c.graph, config.r_cut_l))])
        pred = predict(batch, params, config, forces=False, stress=False,
                       denoise=DenoiseInputs(np.array([c.t]), schedule.t_max, c.projected_forces))
        d = (pred.noise.data - c.eps)[c.mask]
        total += float((d * d).sum())
        count += d.size
    return total / count if count else float("nan")


# ----------------------------------------------------------------------------
# training
# ----------------------------------------------------------------------------


@dataclass
class TrainResult:
    params: ParameterSet
    history: list[dict]
    checkpoint: Path | None
    log_path: Path | None
    epochs_run: int
    stopped_early: bool = False

    def column(self, name: str) -> np.ndarray:
        return np.array([row[name] for row in self.history], dtype=np.float64)


def _fmt(v) -> str:
    if v is None or (isinstance(v, float) and math.isnan(v)):
        return "-"
    if isinstance(v, int):
        return str(v)
    return f"{v:.12g}"


def read_metrics_log(path) -> list[dict]:
    """Parse a metrics log back into rows of floats (NaN for '-')."""
    lines = Path(path).read_text().splitlines()
    header = lines[0].split("\t")
    rows = []
    for line in lines[1:]:
        vals = line.split("\t")
        rows.append({h: (float("nan") if v == "-" else float(v)) for h, v in zip(header, vals)})
    return rows


def _save_atomic(path: Path, params: ParameterSet, meta: dict) -> None:
    tmp = path.with_suffix(path.suffix + ".tmp")
    save_checkpoint(tmp, params, meta)
    os.replace(tmp, path)


def _check_capacity(structures, tcfg: TrainConfig) -> np.ndarray:
    sizes = np.array([len(s) for s in structures], dtype=np.int64)
    if sizes.size and sizes.max() > tcfg.capacity:
        raise ValidationError(f"capacity {tcfg.capacity} is below the largest structure ({int(sizes.max())} atoms)")
    return sizes


def _supervised_shard(params, leaves, cfg, tcfg, structures, graphs, counts: LabelCounts):
    batch = GraphBatch(structures, cfg, graphs=graphs)
    want_f = tcfg.force_weight > 0 and counts.force_graphs > 0
    want_s = tcfg.stress_weight > 0 and counts.stress > 0
    tape = next(iter(leaves.values())).tape
    full = {**params, **leaves}
    pred = predict(batch, full, cfg, forces=want_f, stress=want_s, create_graph=want_f or want_s, tape=tape)
    return total_loss(pred, batch, tcfg, counts)


def _denoise_shard(params, leaves, cfg, tcfg, corruptions, t_max, n_graphs, n_atoms):
    graphs = [(c.graph, build_line_graph(c.graph, cfg.r_cut_l)) for c in corruptions]
    batch = GraphBatch([c.structure for c in corruptions], cfg, graphs=graphs)
    dn = DenoiseInputs(
        np.array([c.t for c in corruptions]),
        t_max,
        np.concatenate([c.projected_forces for c in corruptions]),
    )
    tape = next(iter(leaves.values())).tape
    pred = predict(batch, {**params, **leaves}, cfg, forces=False, stress=False, tape=tape, denoise=dn)
    eps = np.concatenate([c.eps for c in corruptions])
    mask = np.concatenate([c.mask for c in corruptions])
    return denoise_loss(pred.noise, eps, mask, batch, n_graphs=n_graphs, n_atoms=n_atoms,
                        graph_level=tcfg.graph_level_loss)


def train(
    train_set,
    val_set,
    model_config: ModelConfig,
    train_config: TrainConfig,
    *,
    mode: str = "supervised",
    noise: NoiseSchedule | None = None,
    out_dir=None,
    init: ParameterSet | None = None,
) -> TrainResult:
    """Fit the model and return the final parameters and per-epoch history.

    ``mode="denoise"`` trains only the noise objective (the model config is
    switched to carry the denoising head). ``init`` starts from given weights,
    e.g. a pretrained checkpoint loaded without its denoising head. With
    ``out_dir`` set, ``metrics.tsv`` and ``checkpoint.ckpt`` are written
    there; the checkpoint is replaced after every finished epoch.
    """
    if mode not in MODES:
        raise ValidationError(f"mode must be one of {MODES}")
    tcfg = train_config
    cfg = model_config.replace(denoise=(mode == "denoise"))
    noise = noise or NoiseSchedule()
    train_set, val_set = list(train_set), list(val_set)
    if not train_set:
        raise ValidationError("empty training set")
    sizes = _check_capacity(train_set, tcfg)
    zmax = max((int(s.numbers.max()) for s in train_set + val_set if len(s)), default=0)
    if zmax > cfg.max_z:
        raise ValidationError(f"element Z={zmax} is outside the embedding table (max_z {cfg.max_z})")
    if mode == "denoise" and any(s.forces is None for s in train_set + val_set):
        raise ValidationError("denoising needs force labels on every structure")

    if init is not None:
        if init.config != cfg:
            raise ValidationError("initial parameters were built for a different model config")
        params = init.copy()
    else:
        params = init_params(cfg)
    if mode == "supervised":
        if all(s.energy is not None for s in train_set):
            offsets = fit_reference_energies(train_set).offsets
            params["ref_energies"] = offsets[: cfg.max_z + 1].copy()
        else:
            log.warning("some training structures lack energies; reference energies left at zero")

    out = Path(out_dir) if out_dir is not None else None
    ckpt = log_path = None
    meta = {"mode": mode, "train": tcfg.to_dict(), "noise": noise.to_dict(), "epoch": 0}
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        ckpt, log_path = out / "checkpoint.ckpt", out / "metrics.tsv"
        _save_atomic(ckpt, params, meta)
        log_path.write_text("\t".join(LOG_COLUMNS) + "\n")

    graphs = [_graphs(s, cfg) for s in train_set] if mode == "supervised" else None
    val_graphs = [_graphs(s, cfg) for s in val_set] if mode == "supervised" else None
    names = params.trainable()
    state = AdamWState()
    history = []
    stopped = False
    epoch = 0
    for epoch in range(1, tcfg.epochs + 1):
        t_epoch = time.perf_counter()
        lr = cosine_lr(epoch - 1, tcfg.epochs - 1, tcfg.lr_max, tcfg.lr_min)
        steps = load_balanced_batches(sizes, tcfg.n_workers, tcfg.capacity, seed=tcfg.seed * 100_003 + epoch)
        noise_rng = np.random.default_rng([tcfg.seed, epoch])
        sums = {"loss": 0.0, "energy": 0.0, "force": 0.0, "stress": 0.0, "magmom": 0.0, "noise": 0.0}
        seen = {k: 0 for k in sums}
        norms = []
        sim_wall = 0.0
        for step in steps:
            shards = [sh for sh in step if sh]
            grads = {k: np.zeros_like(params[k]) for k in names}
            step_loss = 0.0
            comps: dict = {}
            if mode == "supervised":
                counts = LabelCounts()
                for sh in shards:
                    counts = counts + label_counts([train_set[i] for i in sh])
            else:
                corrupted = {
                    i: denoise_corrupt(train_set[i], noise, noise_rng, cfg.r_cut_a) for sh in shards for i in sh
                }
                n_graphs = sum(1 for c in corrupted.values() if c.mask.any())
                n_atoms = sum(int(c.mask.sum()) for c in corrupted.values())
            slowest = 0.0
            for sh in shards:
                t0 = time.perf_counter()
                tape = ad.Tape()
                leaves = {k: tape.leaf(params[k], name=k) for k in names}
                if mode == "supervised":
                    terms = _supervised_shard(params, leaves, cfg, tcfg, [train_set[i] for i in sh],
                                              [graphs[i] for i in sh], counts)
                    loss = terms.total
                    for k, v in terms.components.items():
                        comps[k] = comps.get(k, 0.0) + v
                else:
                    loss = _denoise_shard(params, leaves, cfg, tcfg, [corrupted[i] for i in sh],
                                          noise.t_max, n_graphs, n_atoms)
                    comps["noise"] = comps.get("noise", 0.0) + float(loss.data)
                if not math.isfinite(float(loss.data)):
                    _abort(epoch, ckpt)
                if loss.tape is not None:
                    g = ad.backward(loss, list(leaves.values()))
                    for k, leaf in leaves.items():
                        grads[k] += g[leaf]
                step_loss += float(loss.data)
                slowest = max(slowest, time.perf_counter() - t0)
            sim_wall += slowest
            try:
                norms.append(adamw_step(params, grads, state, lr, tcfg.weight_decay, clip_norm=tcfg.grad_clip_norm))
            except NumericalError:
                _abort(epoch, ckpt)
            sums["loss"] += step_loss
            seen["loss"] += 1
            for k, v in comps.items():
                sums[k] += v
                seen[k] += 1

        row = {c: float("nan") for c in LOG_COLUMNS}
        row["epoch"] = epoch
        row["lr"] = lr
        row["train_loss"] = sums["loss"] / max(seen["loss"], 1)
        for k in ("energy", "force", "stress", "magmom", "noise"):
            if seen[k]:
                row[f"train_{k}"] = sums[k] / seen[k]
        row["grad_norm"] = float(np.mean(norms)) if norms else float("nan")
        if mode == "supervised":
            if val_set:
                m = evaluate_dataset(params, val_set, cfg, graphs=val_graphs)
                row["val_energy_mae"] = _nan(m.energy_mae)
                row["val_force_mae"] = _nan(m.force_mae)
                row["val_stress_mae"] = _nan(m.stress_mae)
            last = epoch == tcfg.epochs
            stop = tcfg.stop_force_mae > 0 and row["val_force_mae"] < tcfg.stop_force_mae
            if last or stop:
                m = evaluate_dataset(params, train_set, cfg, graphs=graphs)
                row["train_energy_mae"] = _nan(m.energy_mae)
                row["train_force_mae"] = _nan(m.force_mae)
        else:
            stop = False
            if val_set:
                row["val_noise_mse"] = evaluate_noise(params, val_set, cfg, noise, seed=tcfg.seed + 7919)
        row["seconds"] = time.perf_counter() - t_epoch
        row["sim_wall"] = sim_wall
        history.append(row)
        log.info("epoch %d lr %.3g loss %.5g val F MAE %s", epoch, lr, row["train_loss"], _fmt(row["val_force_mae"]))
        if out is not None:
            with open(log_path, "a") as fh:
                fh.write("\t".join(_fmt(row[c]) for c in LOG_COLUMNS) + "\n")
            meta = {**meta, "epoch": epoch, "val_force_mae": _nan_none(row["val_force_mae"])}
            _save_atomic(ckpt, params, meta)
        if stop:
            stopped = True
            break
    return TrainResult(params, history, ckpt, log_path, epoch, stopped)


def _nan(v):
    return float("nan") if v is None else float(v)


def _nan_none(v):
    return None if v is None or math.isnan(v) else float(v)


def _abort(epoch, ckpt):
    where = f"; last good checkpoint: {ckpt}" if ckpt is not None else ""
    raise NumericalError(f"loss or gradient became non-finite in epoch {epoch}{where}")


def run_training(dataset, model_config: ModelConfig, train_config: TrainConfig, **kwargs):
    """Split ``dataset`` by the configured fractions, then :func:`train`.

    Returns ``(result, (train, val, test))``.
    """
    parts = split_dataset(dataset, train_config.fractions, seed=train_config.split_seed)
    return train(parts[0], parts[1], model_config, train_config, **kwargs), parts


def load_pretrained(path, model_config: ModelConfig) -> ParameterSet:
    """Weights of a denoising run, reshaped for supervised training (head dropped)."""
    params, _ = load_checkpoint(path, config=model_config.replace(denoise=False), drop_prefix="denoise.")
    return params
