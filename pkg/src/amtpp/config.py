"""Flat ``key = value`` configuration for training and CLI runs."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields

ABLATIONS = ("lognorm_time_head", "no_od_matrix", "no_time_embedding", "fixed_embedding")


class ConfigError(ValueError):
    pass


@dataclass
class TrainConfig:
    num_stations: int = 10
    batch_size: int = 64
    epochs: int = 100
    lr: float = 1e-3
    seed: int = 0
    K: int = 16
    rank: int = 3
    J_o: int = 64
    J_d: int = 64
    J_h: int = 64
    J_w: int = 64
    n_heads: int = 4
    c_model: int = 100
    c_k: int = 25
    c_v: int = 25
    n_layers: int = 1
    patience: int = 10
    max_len: int = 128
    init_pos_scale: float = 10000.0
    beta_unconstrained: bool = False
    f1_average: str = "weighted"
    n_features: int = 0
    lognorm_time_head: bool = False
    no_od_matrix: bool = False
    no_time_embedding: bool = False
    fixed_embedding: bool = False

    def __post_init__(self):
        if self.J_h % 2 or self.J_w % 2:
            raise ConfigError("J_h and J_w must be even")
        if self.f1_average not in ("weighted", "macro"):
            raise ConfigError("f1_average must be 'weighted' or 'macro'")
        for name in ("num_stations", "batch_size", "K", "rank", "n_heads", "c_model", "c_k", "c_v",
                     "n_layers", "max_len"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.lr < 0:
            raise ConfigError("lr must be non-negative")

    def with_ablation(self, name: str | None) -> TrainConfig:
        if name is None or name == "full":
            return dataclasses.replace(self)
        if name not in ABLATIONS:
            raise ConfigError(f"unknown ablation {name!r}")
        return dataclasses.replace(self, **{name: True})

    @property
    def ablation(self) -> str:
        active = [a for a in ABLATIONS if getattr(self, a)]
        return "+".join(active) if active else "full"

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> TrainConfig:
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


@dataclass
class RunConfig:
    train_path: str = "data/trips.csv"
    val_path: str = ""
    test_path: str = ""
    train_fraction: float = 0.8
    tz_offset: int = 0
    mask_path: str = ""
    feature_path: str = ""
    output_dir: str = "runs"
    # epoch seconds; earlier test trips are history only (0 scores every trip)
    score_from: int = 0
    train: TrainConfig = field(default_factory=TrainConfig)

    def to_lines(self) -> list[str]:
        lines = [f"{f.name} = {_fmt(getattr(self, f.name))}" for f in fields(self) if f.name != "train"]
        lines += [f"{f.name} = {_fmt(getattr(self.train, f.name))}" for f in fields(TrainConfig)]
        return lines


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return str(v)


def _coerce(kind, raw: str):
    kind = kind if isinstance(kind, type) else {"int": int, "float": float, "bool": bool, "str": str}[kind]
    if kind is bool:
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    return kind(raw)


def parse_config(text: str, source: str = "<config>") -> RunConfig:
    """Parse flat ``key = value`` lines; ``#`` starts a comment.  Unknown keys are errors."""
    run_fields = {f.name: f for f in fields(RunConfig) if f.name != "train"}
    train_fields = {f.name: f for f in fields(TrainConfig)}
    run_vals, train_vals = {}, {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key = value")
        key, raw = (s.strip() for s in line.split("=", 1))
        target = run_fields.get(key) or train_fields.get(key)
        if target is None:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        try:
            value = _coerce(target.type, raw)
        except ValueError as exc:
            raise ConfigError(f"{source}:{lineno}: bad value for {key}: {exc}") from None
        (run_vals if key in run_fields else train_vals)[key] = value
    try:
        train = TrainConfig(**train_vals)
    except ConfigError as exc:
        raise ConfigError(f"{source}: {exc}") from None
    return RunConfig(**run_vals, train=train)


def load_config(path) -> RunConfig:
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read(), str(path))
