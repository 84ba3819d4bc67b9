"""Dataclass configs for the model, training plan, and pipeline runs."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict
from pathlib import Path


@dataclass(frozen=True)
class TokenSchedule:
    """Ordered token grids, largest first; index 0 is the teacher length."""

    grids: tuple[tuple[int, int], ...]
    patch_sizes: tuple[int, ...]

    def __post_init__(self):
        grids = tuple((int(r), int(c)) for r, c in self.grids)
        patches = tuple(int(p) for p in self.patch_sizes)
        object.__setattr__(self, "grids", grids)
        object.__setattr__(self, "patch_sizes", patches)
        if len(grids) < 2:
            raise ValueError(f"schedule needs at least 2 token lengths, got {len(grids)}")
        if len(patches) != len(grids):
            raise ValueError("one patch size per grid required")
        counts = [r * c for r, c in grids]
        if any(n <= 0 for n in counts) or any(p <= 0 for p in patches):
            raise ValueError("grids and patch sizes must be positive")
        if any(a <= b for a, b in zip(counts, counts[1:])):
            raise ValueError(f"token counts must be strictly descending, got {counts}")

    @classmethod
    def for_image(cls, image_size: int, grids) -> "TokenSchedule":
        """Derive per-grid patch sizes for a square image."""
        patches = []
        for r, c in grids:
            if image_size % r or image_size % c or image_size // r != image_size // c:
                raise ValueError(f"grid ({r},{c}) does not tile a {image_size}px square image")
            patches.append(image_size // r)
        return cls(tuple(tuple(g) for g in grids), tuple(patches))

    def validate_for_image(self, height: int, width: int) -> None:
        for (r, c), p in zip(self.grids, self.patch_sizes):
            if r * p != height or c * p != width:
                raise ValueError(
                    f"grid ({r},{c}) with patch {p} does not tile a {height}x{width} image"
                )

    @property
    def k(self) -> int:
        return len(self.grids)

    @property
    def token_counts(self) -> tuple[int, ...]:
        return tuple(r * c for r, c in self.grids)


@dataclass(frozen=True)
class ReViTConfig:
    image_size: int
    embed_dim: int
    depth: int
    heads: int
    num_classes: int
    schedule: TokenSchedule
    channels: int = 3
    mlp_ratio: int = 4
    dropout: float = 0.0
    share_patch_embed: bool = False
    share_pos_embed: bool = False

    def __post_init__(self):
        for name in ("image_size", "embed_dim", "depth", "heads", "num_classes", "channels", "mlp_ratio"):
            if getattr(self, name) < 1 and name != "depth":
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.depth < 0:
            raise ValueError(f"depth must be >= 0, got {self.depth}")
        if self.embed_dim % self.heads:
            raise ValueError(f"embed_dim {self.embed_dim} not divisible by heads {self.heads}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must be in [0, 1), got {self.dropout}")
        self.schedule.validate_for_image(self.image_size, self.image_size)

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.heads

    @property
    def hidden_dim(self) -> int:
        return self.embed_dim * self.mlp_ratio

    def patch_size(self, length_idx: int) -> int:
        return self.schedule.patch_sizes[length_idx]


@dataclass(frozen=True)
class DistillConfig:
    """Temperature and CE/KL mixing weight of the self-distillation loss."""

    tau: float = 1.0
    lam: float = 0.5

    def __post_init__(self):
        if self.tau <= 0:
            raise ValueError(f"distillation temperature must be > 0, got {self.tau}")
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError(f"distillation coefficient must be in [0, 1], got {self.lam}")


@dataclass(frozen=True)
class TrainPlan:
    epochs: int = 1
    batch_size: int = 64
    lr: float = 5e-4
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.0
    seed: int = 0
    parallel: bool = False
    distill: DistillConfig = field(default_factory=DistillConfig)
    self_distill: bool = True
    single_head: bool = False

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 0:
            raise ValueError(f"epochs must be >= 0, got {self.epochs}")
        object.__setattr__(self, "betas", tuple(self.betas))


@dataclass(frozen=True)
class TLAPlan:
    """Training plan for the token-length assigner."""

    conv_channels: tuple[int, int] = (16, 32)
    epochs: int = 8
    batch_size: int = 64
    lr: float = 1e-3
    weight_decay: float = 0.0
    class_weights: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        object.__setattr__(self, "conv_channels", tuple(self.conv_channels))


@dataclass(frozen=True)
class DataConfig:
    kind: str = "synth"  # "synth" | "cifar10"
    dir: str | None = None
    n_train: int = 2048
    n_test: int = 512
    classes: int = 10
    image_size: int = 32
    train_subset: int | None = None  # cap on training samples after loading

    def __post_init__(self):
        if self.kind not in ("synth", "cifar10"):
            raise ValueError(f"unknown dataset kind '{self.kind}'")
        if self.kind == "cifar10" and not self.dir:
            raise ValueError("cifar10 dataset requires a data directory")


@dataclass(frozen=True)
class RunConfig:
    """Everything one pipeline run needs; loaded from a JSON file."""

    model: ReViTConfig
    plan: TrainPlan
    tla: TLAPlan
    data: DataConfig
    out_dir: str = "out"
    seed: int = 0

    def __post_init__(self):
        if not self.out_dir:
            raise ValueError("out_dir must be non-empty")


def _take(d: dict, allowed: set[str], where: str) -> dict:
    unknown = set(d) - allowed
    if unknown:
        raise ValueError(f"unknown config keys in {where}: {sorted(unknown)}")
    return d


def run_config_from_dict(raw: dict) -> RunConfig:
    _take(raw, {"model", "plan", "tla", "data", "out_dir", "seed"}, "run config")
    m = dict(raw.get("model", {}))
    _take(m, {"image_size", "channels", "embed_dim", "depth", "heads", "mlp_ratio",
              "num_classes", "grids", "dropout", "share_patch_embed", "share_pos_embed"}, "model")
    grids = m.pop("grids")
    schedule = TokenSchedule.for_image(m["image_size"], grids)
    model = ReViTConfig(schedule=schedule, **m)

    p = dict(raw.get("plan", {}))
    _take(p, {"epochs", "batch_size", "lr", "betas", "eps", "weight_decay", "seed",
              "parallel", "distill", "self_distill", "single_head"}, "plan")
    dc = dict(p.pop("distill", {}))
    _take(dc, {"tau", "lam"}, "plan.distill")
    plan = TrainPlan(distill=DistillConfig(**dc), **p)

    t = dict(raw.get("tla", {}))
    _take(t, {"conv_channels", "epochs", "batch_size", "lr", "weight_decay",
              "class_weights", "seed"}, "tla")
    tla = TLAPlan(**t)

    d = dict(raw.get("data", {}))
    _take(d, {"kind", "dir", "n_train", "n_test", "classes", "image_size", "train_subset"}, "data")
    data = DataConfig(**d)

    if data.image_size != model.image_size:
        raise ValueError(
            f"data image_size {data.image_size} does not match model image_size {model.image_size}"
        )
    return RunConfig(model=model, plan=plan, tla=tla, data=data,
                     out_dir=raw.get("out_dir", "out"), seed=raw.get("seed", 0))


def load_run_config(path: str | Path) -> RunConfig:
    with open(path) as f:
        raw = json.load(f)
    return run_config_from_dict(raw)


def run_config_to_dict(cfg: RunConfig) -> dict:
    d = asdict(cfg)
    m = d["model"]
    m["grids"] = [list(g) for g in cfg.model.schedule.grids]
    del m["schedule"]
    return d
