from __future__ import annotations

from dataclasses import asdict, dataclass, fields

from ..errors import ValidationError

LOSS_KINDS = ("huber", "mae", "l2mae")


@dataclass(frozen=True)
class TrainConfig:
    """Optimisation settings.

    Defaults are the small-dataset column of the usual hyperparameter table
    (cosine schedule 3e-4 -> 3e-6, weight decay 1e-3, Huber delta 0.01,
    prefactors 5/5/0.1/0.1, clip norm 0.5). ``capacity`` is the atom budget
    of one worker per step.
    """

    lr_max: float = 3e-4
    lr_min: float = 3e-6
    weight_decay: float = 1e-3
    epochs: int = 200
    loss: str = "huber"
    huber_delta: float = 0.01
    energy_weight: float = 5.0
    force_weight: float = 5.0
    stress_weight: float = 0.1
    magmom_weight: float = 0.1
    graph_level_loss: bool = True
    grad_clip_norm: float = 0.5
    capacity: int = 64
    n_workers: int = 1
    seed: int = 0
    train_fraction: float = 0.8
    val_fraction: float = 0.1
    test_fraction: float = 0.1
    split_seed: int = 0
    stop_force_mae: float = 0.0  # stop once val force MAE drops below this; 0 disables

    def __post_init__(self) -> None:
        if not 0 <= self.lr_min <= self.lr_max:
            raise ValidationError("need 0 <= lr_min <= lr_max")
        if self.weight_decay < 0:
            raise ValidationError("weight_decay must be >= 0")
        if self.epochs < 1:
            raise ValidationError("epochs must be >= 1")
        if self.loss not in LOSS_KINDS:
            raise ValidationError(f"loss must be one of {', '.join(LOSS_KINDS)}")
        if self.huber_delta <= 0:
            raise ValidationError("huber_delta must be positive")
        for name in ("energy_weight", "force_weight", "stress_weight", "magmom_weight"):
            if getattr(self, name) < 0:
                raise ValidationError(f"{name} must be >= 0")
        if self.grad_clip_norm <= 0:
            raise ValidationError("grad_clip_norm must be positive")
        if self.capacity < 1 or self.n_workers < 1:
            raise ValidationError("capacity and n_workers must be >= 1")
        fr = (self.train_fraction, self.val_fraction, self.test_fraction)
        if min(fr) < 0 or abs(sum(fr) - 1.0) > 1e-9:
            raise ValidationError("split fractions must be nonnegative and sum to 1")
        if self.stop_force_mae < 0:
            raise ValidationError("stop_force_mae must be >= 0")

    @property
    def fractions(self) -> tuple[float, float, float]:
        return (self.train_fraction, self.val_fraction, self.test_fraction)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> TrainConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValidationError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)

    def replace(self, **changes) -> TrainConfig:
        return TrainConfig.from_dict({**self.to_dict(), **changes})
