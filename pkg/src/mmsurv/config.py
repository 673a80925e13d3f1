"""Training configuration and its flat ``key = value`` file format."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, fields

from .fusion import FUSION_VARIANTS, ConfigError

BRANCHES = ("both", "wsi_only", "gene_only")


@dataclass
class TrainConfig:
    d: int = 128
    K: int = 16
    tau: float = 0.1
    gnn_layers: int = 3
    heads_gene: int = 2
    heads_fusion: int = 2
    dropout: float = 0.25
    lr: float = 2e-4
    weight_decay: float = 1e-5
    max_epochs: int = 100
    B: int = 4
    seed: int = 42
    batch: int = 1
    fusion_variant: str = "cross_attention"
    branches: str = "both"
    kmeans_budget: int = 100_000
    kmeans_batch: int = 1024
    kmeans_restarts: int = 10
    n_folds: int = 5

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.d < 1 or self.K < 1 or self.B < 1:
            raise ConfigError("d, K and B must be positive")
        if self.tau <= 0:
            raise ConfigError("tau must be positive")
        if self.gnn_layers < 2:
            raise ConfigError("gnn_layers counts SAGE layers plus the attention layer and must be >= 2")
        for name in ("heads_gene", "heads_fusion"):
            h = getattr(self, name)
            if h < 1:
                raise ConfigError(f"{name} must be positive")
        if self.d % self.heads_fusion:
            raise ConfigError(f"d={self.d} must be divisible by heads_fusion={self.heads_fusion}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must lie in [0, 1)")
        if self.lr <= 0 or self.weight_decay < 0 or self.max_epochs < 1:
            raise ConfigError("lr must be positive, weight_decay non-negative, max_epochs >= 1")
        if self.batch != 1:
            raise ConfigError("only batch = 1 (one patient per step) is supported")
        if self.fusion_variant not in FUSION_VARIANTS:
            raise ConfigError(f"fusion_variant must be one of {FUSION_VARIANTS}")
        if self.branches not in BRANCHES:
            raise ConfigError(f"branches must be one of {BRANCHES}")
        if self.n_folds < 2:
            raise ConfigError("n_folds must be >= 2")

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)

    def to_dict(self):
        return dataclasses.asdict(self)

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, data):
        known = {f.name: f for f in fields(cls)}
        unknown = set(data) - set(known)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)


def _coerce(field, raw):
    kind = field.type if isinstance(field.type, str) else field.type.__name__
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
    except ValueError as exc:
        raise ConfigError(f"{field.name}: cannot parse {raw!r} as {kind}") from exc
    return raw


def parse_config(text, base=None):
    """Parse ``key = value`` lines (``#`` comments allowed) over ``base`` defaults."""
    known = {f.name: f for f in fields(TrainConfig)}
    values = (base or TrainConfig()).to_dict()
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in known:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        values[key] = _coerce(known[key], raw)
    return TrainConfig(**values)


def format_config(cfg: TrainConfig):
    return "".join(f"{k} = {v}\n" for k, v in cfg.to_dict().items())


def load_config(path, base=None):
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read(), base)
