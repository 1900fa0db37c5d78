from __future__ import annotations

from dataclasses import asdict, dataclass, field

INPUT_POLICIES = ("fixed_224", "variable_full_res")
FIXED_SIDE = 224


@dataclass(frozen=True)
class ColorJitterParams:
    """Half-ranges of the per-image colour perturbation.

    Brightness, contrast and saturation factors are drawn from
    ``[1 - p, 1 + p]``; the hue shift from ``[-p, +p]`` (fraction of a turn).
    """

    brightness: float = 0.2
    contrast: float = 0.2
    saturation: float = 0.2
    hue: float = 0.05

    def __post_init__(self):
        for name in ("brightness", "contrast", "saturation", "hue"):
            if getattr(self, name) < 0:
                raise ValueError(f"jitter {name} must be >= 0")
        if self.hue > 0.5:
            raise ValueError("hue half-range cannot exceed half a turn")

    @property
    def is_identity(self) -> bool:
        return not any((self.brightness, self.contrast, self.saturation, self.hue))


NO_JITTER = ColorJitterParams(0.0, 0.0, 0.0, 0.0)


@dataclass(frozen=True)
class ClassifierSpec:
    n_classes: int
    input_policy: str = "fixed_224"
    pretrained: bool = False
    task_tag: str = ""
    class_names: tuple[str, ...] = ()
    arch: str = "small_resnet"

    def __post_init__(self):
        if self.n_classes < 2:
            raise ValueError("a classifier needs at least two classes")
        if self.input_policy not in INPUT_POLICIES:
            raise ValueError(f"input_policy must be one of {INPUT_POLICIES}")
        if self.class_names and len(self.class_names) != self.n_classes:
            raise ValueError("class_names length must equal n_classes")
        if not self.class_names:
            object.__setattr__(self, "class_names",
                               tuple(str(i) for i in range(self.n_classes)))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["class_names"] = list(self.class_names)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ClassifierSpec":
        d = dict(d)
        d["class_names"] = tuple(d.get("class_names", ()))
        return cls(**d)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 50
    lr0: float = 0.01
    lr_decay_factor: float = 0.1
    lr_decay_every: int = 20
    optimizer: str = "sgd"
    momentum: float = 0.0
    weight_decay: float = 0.0
    batch_size: int = 32
    jitter: ColorJitterParams = field(default_factory=ColorJitterParams)
    flips: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if not 0 < self.lr_decay_factor <= 1:
            raise ValueError("lr_decay_factor must be in (0, 1]")
        if self.lr_decay_every < 1 or self.batch_size < 1:
            raise ValueError("lr_decay_every and batch_size must be >= 1")
        if self.lr0 <= 0:
            raise ValueError("lr0 must be positive")
        if self.optimizer != "sgd":
            raise ValueError(f"unsupported optimizer {self.optimizer!r}")

    def lr_at(self, epoch: int) -> float:
        """Step schedule, ``epoch`` counted from zero."""
        return self.lr0 * self.lr_decay_factor ** (epoch // self.lr_decay_every)

    def lr_schedule(self) -> list[float]:
        return [self.lr_at(e) for e in range(self.epochs)]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        d["jitter"] = ColorJitterParams(**d.get("jitter", {}))
        return cls(**d)
