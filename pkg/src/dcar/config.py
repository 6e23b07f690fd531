"""Flat ``key = value`` run configuration shared by every CLI command."""

from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from dcar.training import ConfigError, TrainConfig

# settings that change where or how fast outputs are produced, never their content
UNHASHED_KEYS = frozenset({"data_dir", "checkpoint_dir", "out_dir", "ablate_workers"})


@dataclass
class RunConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    # dataset
    n_meta: int = 10
    n_base_meta: int = 5
    n_sub: int = 4
    per_sub: int = 40
    taxonomy_seed: int = 0
    dataset_seed: int = 0
    split_seed: int = 0
    # backbone
    backbone_seed: int = 0
    pretrain_epochs: int = 200
    pretrain_lr: float = 1e-3
    pretrain_batch_size: int = 64
    # ablation
    ablate_seeds: tuple[int, ...] = (0, 1, 2)
    ablate_shots: tuple[int, ...] = (1, 2, 4, 8, 16)
    ablate_workers: int = 1
    grad_check_epsilon: float = 1e-4
    # paths
    data_dir: str = "runs/data"
    checkpoint_dir: str = "runs/checkpoints"
    out_dir: str = "runs/out"

    def validate(self) -> "RunConfig":
        self.train.validate()
        checks = [
            (self.n_meta >= 1, "n_meta must be >= 1"),
            (0 <= self.n_base_meta < self.n_meta, "n_base_meta must leave at least one downstream meta-category"),
            (self.n_sub >= 2, "n_sub must be >= 2"),
            (self.per_sub >= 1, "per_sub must be >= 1"),
            (self.per_sub > self.train.shots, "per_sub must exceed shots"),
            (self.pretrain_epochs >= 0, "pretrain_epochs must be >= 0"),
            (self.pretrain_lr > 0, "pretrain_lr must be > 0"),
            (self.pretrain_batch_size >= 2, "pretrain_batch_size must be >= 2"),
            (len(self.ablate_seeds) >= 1, "ablate_seeds must be non-empty"),
            (all(s >= 1 for s in self.ablate_shots), "ablate_shots must be >= 1"),
            (all(self.per_sub > s for s in self.ablate_shots), "per_sub must exceed every ablate_shots value"),
            (self.ablate_workers >= 1, "ablate_workers must be >= 1"),
            (self.grad_check_epsilon > 0, "grad_check_epsilon must be > 0"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigError(msg)
        return self

    # -- flat view -------------------------------------------------------------

    def items(self) -> dict[str, object]:
        flat: dict[str, object] = dict(asdict(self.train))
        for f in fields(self):
            if f.name != "train":
                flat[f.name] = getattr(self, f.name)
        return flat

    def normalized(self) -> str:
        return "".join(f"{k}={_fmt(v)}\n" for k, v in sorted(self.items().items()))

    def digest(self) -> str:
        """Short hash of every result-affecting setting."""
        text = "".join(f"{k}={_fmt(v)}\n" for k, v in sorted(self.items().items()) if k not in UNHASHED_KEYS)
        return hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]

    @property
    def data_path(self) -> Path:
        return Path(self.data_dir)

    @property
    def checkpoint_path(self) -> Path:
        return Path(self.checkpoint_dir)

    @property
    def out_path(self) -> Path:
        return Path(self.out_dir)


def _fmt(v: object) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (tuple, list)):
        return ",".join(str(x) for x in v)
    return str(v)


def _coerce(key: str, raw: str, default: object) -> object:
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low in ("true", "1", "yes", "on"):
                return True
            if low in ("false", "0", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            return tuple(int(x) for x in raw.split(",") if x.strip())
        return raw
    except ValueError:
        raise ConfigError(f"invalid value for {key}: {raw!r}") from None


def from_mapping(values: dict[str, str]) -> RunConfig:
    base = RunConfig()
    train_keys = set(TrainConfig.field_names())
    defaults = base.items()
    train_kw, run_kw = {}, {}
    for key, raw in values.items():
        if key not in defaults:
            raise ConfigError(f"unknown config key {key!r}")
        val = _coerce(key, raw, defaults[key])
        (train_kw if key in train_keys else run_kw)[key] = val
    train = TrainConfig(**{**asdict(base.train), **train_kw})
    return RunConfig(train=train, **run_kw).validate()


def parse_text(text: str) -> dict[str, str]:
    values: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value")
        k, v = line.split("=", 1)
        k = k.strip()
        if k in values:
            raise ConfigError(f"line {lineno}: duplicate key {k!r}")
        values[k] = v.strip()
    return values


def load(path: str | Path | None, overrides: dict[str, str] | None = None) -> RunConfig:
    values: dict[str, str] = {}
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {p}")
        values = parse_text(p.read_text(encoding="utf-8"))
    values.update(overrides or {})
    return from_mapping(values)
