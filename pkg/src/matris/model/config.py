from __future__ import annotations

from dataclasses import asdict, dataclass, fields

from ..elements import MAX_Z
from ..errors import ValidationError


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters.

    Defaults follow the small MPTrj variant (4 layers, width 128, 7 Bessel
    functions, cutoffs 6.0/4.0 Å). The three ablation switches select the
    full model when True.
    """

    n_layers: int = 4
    d_atom: int = 128
    d_edge: int = 128
    d_angle: int = 128
    n_bessel: int = 7
    m_max: int = 8
    r_cut_a: float = 6.0
    r_cut_l: float = 4.0
    envelope_p: int = 5
    with_magmom: bool = False
    dimwise_softmax: bool = True
    separable_attention: bool = True
    learnable_envelope: bool = True
    denoise: bool = False
    n_time_features: int = 8
    max_z: int = MAX_Z
    init_seed: int = 0

    def __post_init__(self) -> None:
        for name in ("d_atom", "d_edge", "d_angle", "n_bessel", "n_time_features"):
            if getattr(self, name) <= 0:
                raise ValidationError(f"{name} must be positive")
        if self.n_layers < 0:
            raise ValidationError("n_layers must be >= 0")
        if self.m_max < 0 or self.m_max % 2:
            raise ValidationError("m_max must be a nonnegative even integer")
        if self.r_cut_a <= 0 or self.r_cut_l <= 0:
            raise ValidationError("cutoffs must be positive")
        if self.r_cut_l > self.r_cut_a:
            raise ValidationError("r_cut_l must not exceed r_cut_a")
        if self.envelope_p < 1:
            raise ValidationError("envelope_p must be >= 1")
        if not 1 <= self.max_z <= MAX_Z:
            raise ValidationError(f"max_z must lie in 1..{MAX_Z}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> ModelConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValidationError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)

    def replace(self, **changes) -> ModelConfig:
        return ModelConfig.from_dict({**self.to_dict(), **changes})
