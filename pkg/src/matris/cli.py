"""Command-line entry point: ``matris <command> ...``.

Exit codes: 0 success, 1 invalid input, 2 numerical failure, 3 I/O error.
Log verbosity comes from ``MATRIS_LOG_LEVEL`` (default WARNING).
"""

from __future__ import annotations

import argparse
import configparser
import json
import logging
import os
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from .errors import NumericalError, ValidationError

log = logging.getLogger("matris")

EXIT_OK, EXIT_INVALID, EXIT_NUMERICAL, EXIT_IO = 0, 1, 2, 3


# ----------------------------------------------------------------------------
# config files
# ----------------------------------------------------------------------------


def _sections():
    from .model.config import ModelConfig
    from .training.config import TrainConfig
    from .training.denoise import NoiseSchedule

    return {"model": ModelConfig, "train": TrainConfig, "noise": NoiseSchedule}


def _coerce(cls, key: str, text: str):
    default = next(f.default for f in fields(cls) if f.name == key)
    text = text.strip()
    try:
        if isinstance(default, bool):
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
    except ValueError:
        raise ValidationError(f"bad value {text!r} for {key} ({type(default).__name__} expected)") from None
    return text


def load_config(path=None, overrides=()):
    """``(ModelConfig, TrainConfig, NoiseSchedule)`` from an INI file plus
    ``section.key=value`` overrides; unknown sections or keys are errors."""
    sections = _sections()
    values: dict[str, dict] = {name: {} for name in sections}
    if path is not None:
        cp = configparser.ConfigParser(interpolation=None)
        cp.optionxform = str
        try:
            with open(path) as fh:
                cp.read_file(fh)
        except configparser.Error as exc:
            raise ValidationError(f"{path}: {exc}") from None
        for sec in cp.sections():
            if sec not in sections:
                raise ValidationError(f"{path}: unknown section [{sec}] (expected {', '.join(sections)})")
            for key, text in cp.items(sec):
                values[sec][key] = text
    for item in overrides:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ValidationError(f"override {item!r} is not of the form section.key=value")
        lhs, text = item.split("=", 1)
        sec, key = lhs.split(".", 1)
        if sec not in sections:
            raise ValidationError(f"unknown section {sec!r} in override {item!r}")
        values[sec][key] = text
    out = []
    for sec, cls in sections.items():
        known = {f.name for f in fields(cls)}
        unknown = set(values[sec]) - known
        if unknown:
            raise ValidationError(f"unknown [{sec}] keys: {', '.join(sorted(unknown))}")
        out.append(cls(**{k: _coerce(cls, k, v) for k, v in values[sec].items()}))
    return tuple(out)


def config_keys_help() -> str:
    lines = ["config keys (INI sections; override with --set section.key=value):"]
    for sec, cls in _sections().items():
        lines.append(f"  [{sec}]")
        for f in fields(cls):
            lines.append(f"    {f.name} = {f.default}")
    return "\n".join(lines)


# ----------------------------------------------------------------------------
# commands
# ----------------------------------------------------------------------------


def _read(path):
    from .structio import parse_dataset

    frames = parse_dataset(path)
    if not frames:
        raise ValidationError(f"{path}: no structures")
    return frames


def _load_model(path):
    from .model.params import load_checkpoint

    params, meta = load_checkpoint(path)
    if params.config.denoise:
        log.warning("%s carries a denoising head; energies and forces are still available", path)
    return params, meta


def cmd_gen_toy(args) -> int:
    from .structio import write_dataset
    from .toydata import generate

    frames = generate(args.kind, args.frames, args.seed)
    write_dataset(args.output, frames)
    print(f"wrote {len(frames)} frames of {args.kind} to {args.output}")
    return EXIT_OK


def cmd_inspect(args) -> int:
    from .graphgen import build_atom_graph, build_line_graph

    frames = _read(args.dataset)
    sizes = np.array([len(s) for s in frames])
    zs = sorted({int(z) for s in frames for z in s.numbers})
    print(f"frames          {len(frames)}")
    print(f"atoms/frame     min {sizes.min()} mean {sizes.mean():.1f} max {sizes.max()}")
    print(f"elements (Z)    {' '.join(map(str, zs))}")
    print(f"periodic        {sum(s.periodic for s in frames)}")
    for name in ("energy", "forces", "stress", "magmoms"):
        print(f"with {name:<10} {sum(getattr(s, name) is not None for s in frames)}")
    forces = [s.forces for s in frames if s.forces is not None]
    if forces:
        f = np.concatenate(forces)
        print(f"force rms       {np.sqrt(np.mean(f**2)):.6g} eV/Å")
    energies = [s.energy / len(s) for s in frames if s.energy is not None and len(s)]
    if energies:
        print(f"energy/atom     mean {np.mean(energies):.6g} std {np.std(energies):.3g} eV")
    k = min(args.graph_frames, len(frames))
    if k:
        ne, na = [], []
        for s in frames[:k]:
            g = build_atom_graph(s, args.r_cut_a)
            ne.append(g.n_edges)
            na.append(build_line_graph(g, args.r_cut_l).n_angles)
        print(f"edges/frame     {np.mean(ne):.1f} (r_cut {args.r_cut_a}, first {k} frames)")
        print(f"angles/frame    {np.mean(na):.1f} (r_cut {args.r_cut_l})")
    return EXIT_OK


def _write_splits(out: Path, parts) -> None:
    from .structio import write_dataset

    for name, part in zip(("train", "val", "test"), parts):
        write_dataset(out / f"{name}.xyz", part)


def _train_common(args, mode: str) -> int:
    from .training.trainer import load_pretrained, run_training

    mcfg, tcfg, noise = load_config(args.config, args.set or [])
    if args.seed is not None:
        tcfg = tcfg.replace(seed=args.seed)
        mcfg = mcfg.replace(init_seed=args.seed)
    data = _read(args.dataset)
    init = None
    if getattr(args, "init", None):
        init = load_pretrained(args.init, mcfg)
    out = Path(args.out)
    result, parts = run_training(data, mcfg, tcfg, mode=mode, noise=noise, out_dir=out, init=init)
    _write_splits(out, parts)
    last = result.history[-1]
    summary = {k: last[k] for k in ("epoch", "lr", "train_loss", "val_energy_mae", "val_force_mae", "val_noise_mse")}
    print(json.dumps({k: (None if isinstance(v, float) and np.isnan(v) else v) for k, v in summary.items()}))
    print(f"checkpoint {result.checkpoint}")
    return EXIT_OK


def cmd_train(args) -> int:
    return _train_common(args, "supervised")


def cmd_pretrain(args) -> int:
    return _train_common(args, "denoise")


def cmd_eval(args) -> int:
    from .training.trainer import evaluate_dataset

    params, _ = _load_model(args.checkpoint)
    frames = _read(args.dataset)
    zmax = params.config.max_z
    bad = sorted({int(z) for s in frames for z in s.numbers if z > zmax})
    if bad:
        raise ValidationError(f"elements {bad} are outside the checkpoint's embedding (max Z {zmax})")
    m = evaluate_dataset(params, frames)
    if args.per_structure:
        for row in m.per_structure:
            print("\t".join(f"{k}={v:.10g}" if isinstance(v, float) else f"{k}={v}" for k, v in row.items()))
    report = {
        "n_structures": m.n_structures,
        "energy_mae_ev_per_atom": m.energy_mae,
        "force_mae_ev_per_a": m.force_mae,
        "stress_mae_gpa": m.stress_mae,
        "magmom_mae": m.magmom_mae,
        "skipped": m.skipped,
    }
    print(json.dumps(report, indent=1))
    return EXIT_OK


def cmd_check_grad(args) -> int:
    from .model.audit import audit_structure

    params, _ = _load_model(args.checkpoint)
    s = _read(args.structure)[args.frame]
    rep = audit_structure(s, params, h=args.h, h_strain=args.h_strain)
    print(f"force  max rel error {rep.force_error:.3e} (max |F| {rep.max_force:.4g} eV/Å)")
    if rep.stress_error is None:
        print("stress skipped (no periodic cell; stress is identically zero)")
    else:
        print(f"stress max rel error {rep.stress_error:.3e} (max |sigma| {rep.max_stress:.4g} eV/Å^3)")
    if rep.worst() > args.tol:
        print(f"FAIL: error exceeds {args.tol:g}")
        return EXIT_NUMERICAL
    print("ok")
    return EXIT_OK


def cmd_relax(args) -> int:
    from .model.network import MatrisPotential
    from .simulate import fire_relax
    from .structio import write_dataset

    params, _ = _load_model(args.checkpoint)
    s = _read(args.structure)[args.frame]
    res = fire_relax(s, MatrisPotential(params), fmax=args.fmax, max_steps=args.max_steps)
    status = "converged" if res.converged else "not converged"
    print(f"{status} after {res.steps} steps: fmax {res.fmax:.4g} eV/Å, energy {res.energies[-1]:.8g} eV")
    if args.output:
        write_dataset(args.output, [res.structure])
    return EXIT_OK if res.converged else EXIT_NUMERICAL


def cmd_md(args) -> int:
    from .model.network import MatrisPotential
    from .simulate import run_md
    from .structio import write_dataset

    params, _ = _load_model(args.checkpoint)
    s = _read(args.structure)[args.frame]
    res = run_md(s, MatrisPotential(params), args.temperature, args.dt, args.steps,
                 record_every=args.record_every, seed=args.seed, drift_abort=args.drift_abort)
    if args.log:
        with open(args.log, "w") as fh:
            fh.write("time_fs\ttemperature_K\tpotential_eV\tkinetic_eV\ttotal_eV\n")
            for st in res.trajectory:
                fh.write(f"{st.time:.6g}\t{st.temperature:.8g}\t{st.potential:.12g}\t{st.kinetic:.12g}\t{st.total:.12g}\n")
    if args.output:
        write_dataset(args.output, [st.structure for st in res.trajectory])
    T = res.temperatures()
    print(f"steps {res.steps}  drift {res.drift * 1e3:.4g} meV/atom/ps  T mean {T.mean():.2f} K (first {T[0]:.2f}, last {T[-1]:.2f})")
    if res.aborted:
        print(res.message)
        return EXIT_NUMERICAL
    return EXIT_OK


# ----------------------------------------------------------------------------
# parser
# ----------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    from .toydata import TOY_KINDS

    p = argparse.ArgumentParser(
        prog="matris",
        description="Train, evaluate and run the line-graph attention interatomic potential.",
        epilog=config_keys_help(),
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-toy", help="write an analytically labelled toy dataset")
    g.add_argument("kind", choices=TOY_KINDS)
    g.add_argument("--frames", type=int, default=200)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("-o", "--output", required=True)
    g.set_defaults(func=cmd_gen_toy)

    g = sub.add_parser("inspect", help="summarise a dataset file")
    g.add_argument("dataset")
    g.add_argument("--r-cut-a", type=float, default=5.0)
    g.add_argument("--r-cut-l", type=float, default=4.0)
    g.add_argument("--graph-frames", type=int, default=10, help="frames used for graph statistics")
    g.set_defaults(func=cmd_inspect)

    for name, func, text in (
        ("train", cmd_train, "supervised training on energies/forces/stress/magmoms"),
        ("pretrain-denoise", cmd_pretrain, "noise-prediction pretraining"),
    ):
        g = sub.add_parser(name, help=text, epilog=config_keys_help(),
                           formatter_class=argparse.RawDescriptionHelpFormatter)
        g.add_argument("dataset")
        g.add_argument("--config", help="INI file with [model], [train], [noise]")
        g.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override a config value")
        g.add_argument("--seed", type=int, help="sets train.seed and model.init_seed")
        g.add_argument("--out", required=True, help="output directory")
        if name == "train":
            g.add_argument("--init", help="pretrained checkpoint to fine-tune (denoising head dropped)")
        g.set_defaults(func=func)

    g = sub.add_parser("eval", help="MAEs of a checkpoint on a labelled dataset")
    g.add_argument("checkpoint")
    g.add_argument("dataset")
    g.add_argument("--per-structure", action="store_true")
    g.set_defaults(func=cmd_eval)

    g = sub.add_parser("check-grad", help="finite-difference audit of forces and stress")
    g.add_argument("checkpoint")
    g.add_argument("structure")
    g.add_argument("--frame", type=int, default=0)
    g.add_argument("--h", type=float, default=1e-4, help="displacement step, Å")
    g.add_argument("--h-strain", type=float, default=1e-5)
    g.add_argument("--tol", type=float, default=1e-4)
    g.set_defaults(func=cmd_check_grad)

    g = sub.add_parser("relax", help="FIRE relaxation of atomic positions")
    g.add_argument("checkpoint")
    g.add_argument("structure")
    g.add_argument("--frame", type=int, default=0)
    g.add_argument("--fmax", type=float, default=0.05)
    g.add_argument("--max-steps", type=int, default=500)
    g.add_argument("-o", "--output")
    g.set_defaults(func=cmd_relax)

    g = sub.add_parser("md", help="NVE molecular dynamics")
    g.add_argument("checkpoint")
    g.add_argument("structure")
    g.add_argument("--frame", type=int, default=0)
    g.add_argument("--temperature", type=float, default=300.0, help="initial temperature, K")
    g.add_argument("--dt", type=float, default=0.5, help="time step, fs")
    g.add_argument("--steps", type=int, default=1000)
    g.add_argument("--record-every", type=int, default=10)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--drift-abort", type=float, default=0.05, help="eV/atom/ps; negative disables")
    g.add_argument("--log", help="TSV of time, temperature and energies")
    g.add_argument("-o", "--output", help="trajectory file")
    g.set_defaults(func=cmd_md)
    return p


def main(argv=None) -> int:
    level = os.environ.get("MATRIS_LOG_LEVEL", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    if getattr(args, "drift_abort", None) is not None and args.drift_abort < 0:
        args.drift_abort = None
    try:
        return args.func(args)
    except NumericalError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (ValidationError, IndexError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
