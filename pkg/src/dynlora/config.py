"""Training configuration and the flat ``key = value`` config/manifest format."""

from __future__ import annotations

from dataclasses import dataclass, field, fields, replace
from pathlib import Path

MODES = ("dynamic", "fixed_rank", "full_ft")
TARGETS = ("attention", "mlp")

# config-file key -> TrainConfig attribute
FILE_KEYS = {
    "lr": "lr",
    "weight_decay": "weight_decay",
    "clip_norm": "clip_norm",
    "micro_batch": "micro_batch",
    "accumulation_steps": "accumulation_steps",
    "max_epochs": "max_epochs",
    "patience": "early_stop_patience",
    "lambda": "lambda_sparsity",
    "prune_epsilon": "prune_epsilon",
    "rank": "rank",
    "alpha": "alpha",
    "mode": "mode",
    "seed": "seed",
    "tasks": "tasks",
}


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    weight_decay: float = 1e-2
    clip_norm: float = 1.0
    micro_batch: int = 1
    accumulation_steps: int = 2
    max_epochs: int = 30
    early_stop_patience: int = 5
    lambda_sparsity: float = 1e-3
    prune_epsilon: float | None = 1e-3  # None disables end-of-task pruning
    rank: int = 8
    alpha: float = 16.0
    mode: str = "dynamic"
    seed: int = 0
    tasks: tuple[str, ...] = ()
    # not settable from the config file
    augment: bool = True
    targets: tuple[str, ...] = TARGETS
    train_importance: bool = True
    max_steps: int | None = None
    merge: bool = True
    prox_metric: str = "adam"  # or "euclidean": tau = lambda * lr
    pretrain_epochs: int = 10  # 0 starts from a randomly initialised backbone
    pretrain_per_class: int = 15
    val_fraction: float = 0.1
    eval_batch: int = 256

    def __post_init__(self):
        if not self.lr > 0:
            raise ConfigError(f"lr must be > 0, got {self.lr}")
        if self.accumulation_steps < 1 or self.micro_batch < 1:
            raise ConfigError("micro_batch and accumulation_steps must be >= 1")
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.lambda_sparsity < 0:
            raise ConfigError("lambda must be >= 0")
        if self.prune_epsilon is not None and self.prune_epsilon < 0:
            raise ConfigError("prune_epsilon must be >= 0")
        if self.rank < 1:
            raise ConfigError("rank must be >= 1")
        if self.clip_norm <= 0 or self.max_epochs < 1 or self.early_stop_patience < 1:
            raise ConfigError("clip_norm, max_epochs and patience must be positive")
        if self.prox_metric not in ("adam", "euclidean"):
            raise ConfigError(f"prox_metric must be 'adam' or 'euclidean', got {self.prox_metric!r}")
        bad = set(self.targets) - set(TARGETS)
        if bad:
            raise ConfigError(f"unknown adapter targets {sorted(bad)}")

    @property
    def effective_batch(self) -> int:
        return self.micro_batch * self.accumulation_steps

    @property
    def shrinks(self) -> bool:
        return self.mode == "dynamic" and self.train_importance

    @property
    def prunes(self) -> bool:
        return self.shrinks and self.prune_epsilon is not None

    def with_(self, **kw) -> TrainConfig:
        return replace(self, **kw)

    def to_flat(self) -> dict[str, str]:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(map(str, v))
            elif v is None:
                v = "none"
            out[f.name] = str(v)
        return out


def reference_profile(**kw) -> TrainConfig:
    """Hyperparameters as used on the 7B backbone (lr 5e-6, batch 1 x 2 accumulation)."""
    return TrainConfig(lr=5e-6, weight_decay=1e-2, clip_norm=1.0, micro_batch=1,
                       accumulation_steps=2, max_epochs=30, rank=8, alpha=16.0, **kw)


def parse_flat(text: str) -> dict[str, str]:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key in out:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def write_flat(values: dict[str, object], path) -> None:
    lines = [f"{k} = {v}" for k, v in values.items()]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def _convert(attr: str, value: str):
    try:
        if attr in ("lr", "weight_decay", "clip_norm", "lambda_sparsity", "alpha"):
            return float(value)
        if attr in ("micro_batch", "accumulation_steps", "max_epochs", "early_stop_patience", "rank", "seed"):
            return int(value)
        if attr == "prune_epsilon":
            return None if value.lower() in ("none", "off") else float(value)
        if attr == "tasks":
            return tuple(s.strip() for s in value.split(",") if s.strip())
    except ValueError as exc:
        raise ConfigError(f"bad value for {attr}: {value!r}") from exc
    return value


def load_config(path, **overrides) -> TrainConfig:
    """Read a config file; relative task paths resolve against the file's directory."""
    path = Path(path)
    raw = parse_flat(path.read_text(encoding="utf-8"))
    unknown = set(raw) - set(FILE_KEYS)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
    kw = {FILE_KEYS[k]: _convert(FILE_KEYS[k], v) for k, v in raw.items()}
    if "tasks" in kw:
        kw["tasks"] = tuple(str((path.parent / t).resolve()) if not Path(t).is_absolute() else t
                            for t in kw["tasks"])
    kw.update({k: v for k, v in overrides.items() if v is not None})
    return TrainConfig(**kw)
