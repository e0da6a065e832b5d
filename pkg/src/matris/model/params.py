"""Parameter shapes, initialisation and the checkpoint file format.

Checkpoint layout::

    MATRIS-CHECKPOINT 1\\n
    <one-line JSON manifest: config, [{name, shape}], meta>\\n
    <float64 little-endian arrays, concatenated in manifest order>
"""

from __future__ import annotations

import json
from collections.abc import Iterator, Mapping
from pathlib import Path

import numpy as np

from ..errors import ValidationError
from .config import ModelConfig

MAGIC = b"MATRIS-CHECKPOINT 1\n"

# parameters the optimiser never touches
FROZEN = frozenset({"ref_energies"})


def _gmlp_shapes(prefix: str, d_in: int, d_out: int) -> dict[str, tuple[int, ...]]:
    return {
        f"{prefix}.Wa": (d_in, d_out),
        f"{prefix}.ba": (d_out,),
        f"{prefix}.Wg": (d_in, d_out),
        f"{prefix}.bg": (d_out,),
        f"{prefix}.Wo": (d_out, d_out),
        f"{prefix}.bo": (d_out,),
    }


def _mlp_shapes(prefix: str, d_in: int, d_hidden: int, d_out: int) -> dict[str, tuple[int, ...]]:
    return {
        f"{prefix}.W1": (d_in, d_hidden),
        f"{prefix}.b1": (d_hidden,),
        f"{prefix}.W2": (d_hidden, d_out),
        f"{prefix}.b2": (d_out,),
    }


def _attention_shapes(prefix: str, d_node: int, d_edge: int, cfg: ModelConfig) -> dict:
    d_att = d_edge if cfg.dimwise_softmax else 1
    shapes = _gmlp_shapes(f"{prefix}.fuse", 2 * d_node + d_edge, d_edge)
    shapes[f"{prefix}.att_t.W"] = (d_edge, d_att)
    shapes[f"{prefix}.att_t.b"] = (d_att,)
    if cfg.separable_attention:
        shapes[f"{prefix}.att_s.W"] = (d_edge, d_att)
        shapes[f"{prefix}.att_s.b"] = (d_att,)
    n_branch = 2 if cfg.separable_attention else 1
    shapes.update(_gmlp_shapes(f"{prefix}.node", n_branch * d_edge, d_node))
    return shapes


def parameter_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Every parameter name and shape, in canonical order."""
    n_ang = cfg.m_max + 1
    shapes: dict[str, tuple[int, ...]] = {
        "embed.atom.A": (cfg.max_z + 1, cfg.d_atom),
        "embed.atom.W": (cfg.d_atom, cfg.d_atom),
        "embed.atom.b": (cfg.d_atom,),
        "embed.bond.W": (cfg.n_bessel, cfg.d_edge),
        "embed.bond.b": (cfg.d_edge,),
        "embed.angle.W": (n_ang, cfg.d_angle),
        "embed.angle.b": (cfg.d_angle,),
    }
    for n in range(cfg.n_layers):
        p = f"layer{n}"
        shapes.update(_attention_shapes(f"{p}.line", cfg.d_edge, cfg.d_angle, cfg))
        shapes.update(_attention_shapes(f"{p}.atom", cfg.d_atom, cfg.d_edge, cfg))
        shapes.update(_gmlp_shapes(f"{p}.refine.fuse", 2 * cfg.d_atom + cfg.d_edge, cfg.d_edge))
        if cfg.learnable_envelope:
            shapes[f"{p}.refine.env.W"] = (cfg.n_bessel, cfg.d_edge)
        shapes.update(_mlp_shapes(f"{p}.refine.node", cfg.d_edge, cfg.d_atom, cfg.d_atom))
        shapes.update(_mlp_shapes(f"{p}.refine.edge", cfg.d_edge, cfg.d_edge, cfg.d_edge))
    shapes["readout.norm.scale"] = (cfg.d_atom,)
    shapes["readout.norm.shift"] = (cfg.d_atom,)
    shapes.update(_mlp_shapes("readout.energy", cfg.d_atom, cfg.d_atom, 1))
    if cfg.with_magmom:
        shapes.update(_mlp_shapes("readout.magmom", cfg.d_atom, cfg.d_atom, 1))
    if cfg.denoise:
        shapes["denoise.time.W"] = (cfg.n_time_features, cfg.d_atom)
        shapes["denoise.force.W"] = (1, cfg.d_edge)
        shapes.update(_mlp_shapes("denoise.head", cfg.d_edge, cfg.d_edge, 1))
    shapes["ref_energies"] = (cfg.max_z + 1,)
    return shapes


class ParameterSet(Mapping):
    """Named float64 arrays whose shapes are fixed by a :class:`ModelConfig`."""

    def __init__(self, config: ModelConfig, arrays: Mapping[str, np.ndarray]):
        self.config = config
        expected = parameter_shapes(config)
        missing = set(expected) - set(arrays)
        extra = set(arrays) - set(expected)
        if missing or extra:
            raise ValidationError(
                f"parameter names do not match config (missing {sorted(missing)}, extra {sorted(extra)})"
            )
        self._arrays: dict[str, np.ndarray] = {}
        for name, shape in expected.items():
            a = np.asarray(arrays[name], dtype=np.float64)
            if a.shape != shape:
                raise ValidationError(f"{name}: shape {a.shape} != {shape}")
            self._arrays[name] = a

    def __getitem__(self, name: str) -> np.ndarray:
        return self._arrays[name]

    def __setitem__(self, name: str, value) -> None:
        value = np.asarray(value, dtype=np.float64)
        if value.shape != self._arrays[name].shape:
            raise ValidationError(f"{name}: shape {value.shape} != {self._arrays[name].shape}")
        self._arrays[name] = value

    def __iter__(self) -> Iterator[str]:
        return iter(self._arrays)

    def __len__(self) -> int:
        return len(self._arrays)

    def count(self) -> int:
        """Total number of scalars (reference energies included)."""
        return int(sum(a.size for a in self._arrays.values()))

    def trainable(self) -> list[str]:
        return [k for k in self._arrays if k not in FROZEN]

    def copy(self) -> ParameterSet:
        return ParameterSet(self.config, {k: v.copy() for k, v in self._arrays.items()})


def init_params(cfg: ModelConfig, seed: int | None = None) -> ParameterSet:
    """LeCun-normal weights, zero biases, unit-normal embedding rows.

    The output layer of each readout head is scaled by 0.1 so initial energies
    stay small.
    """
    rng = np.random.default_rng(cfg.init_seed if seed is None else seed)
    arrays = {}
    for name, shape in parameter_shapes(cfg).items():
        leaf = name.rsplit(".", 1)[-1]
        if name == "embed.atom.A":
            arrays[name] = rng.standard_normal(shape)
        elif name == "readout.norm.scale":
            arrays[name] = np.ones(shape)
        elif name == "ref_energies" or len(shape) == 1:
            arrays[name] = np.zeros(shape)
        else:
            w = rng.standard_normal(shape) / np.sqrt(shape[0])
            if name.startswith(("readout.", "denoise.head")) and leaf == "W2":
                w *= 0.1
            arrays[name] = w
    return ParameterSet(cfg, arrays)


def save_checkpoint(path, params: ParameterSet, meta: dict | None = None) -> None:
    manifest = {
        "config": params.config.to_dict(),
        "params": [{"name": k, "shape": list(v.shape)} for k, v in params.items()],
        "meta": meta or {},
    }
    header = json.dumps(manifest, sort_keys=False, separators=(",", ":")).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(header + b"\n")
        for v in params.values():
            fh.write(np.ascontiguousarray(v, dtype="<f8").tobytes())


def load_checkpoint(path, *, config: ModelConfig | None = None, drop_prefix: str | None = None):
    """Read a checkpoint, returning ``(params, meta)``.

    With ``config`` given, arrays are loaded into that config's layout:
    shared names are copied bit for bit and names starting with
    ``drop_prefix`` are discarded. Any other mismatch is an error.
    """
    raw = Path(path).read_bytes()
    if not raw.startswith(MAGIC):
        raise ValidationError(f"{path}: not a checkpoint file")
    end = raw.index(b"\n", len(MAGIC))
    manifest = json.loads(raw[len(MAGIC) : end].decode())
    body = memoryview(raw)[end + 1 :]
    arrays = {}
    offset = 0
    for entry in manifest["params"]:
        shape = tuple(entry["shape"])
        n = int(np.prod(shape, dtype=np.int64))
        chunk = np.frombuffer(body[offset : offset + 8 * n], dtype="<f8")
        if chunk.size != n:
            raise ValidationError(f"{path}: truncated at {entry['name']}")
        arrays[entry["name"]] = chunk.reshape(shape).astype(np.float64)
        offset += 8 * n
    if offset != len(body):
        raise ValidationError(f"{path}: {len(body) - offset} trailing bytes")
    saved_cfg = ModelConfig.from_dict(manifest["config"])
    cfg = saved_cfg if config is None else config
    if drop_prefix:
        arrays = {k: v for k, v in arrays.items() if not k.startswith(drop_prefix)}
    if config is not None:
        expected = parameter_shapes(cfg)
        fresh = init_params(cfg)
        for name in expected:
            if name not in arrays:
                if drop_prefix and name.startswith(drop_prefix):
                    arrays[name] = fresh[name]
                else:
                    raise ValidationError(f"checkpoint lacks parameter {name}")
        arrays = {k: arrays[k] for k in expected if k in arrays}
    return ParameterSet(cfg, arrays), manifest.get("meta", {})
