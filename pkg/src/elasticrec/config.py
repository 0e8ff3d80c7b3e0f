"""Model/training configuration and its ``key = value`` text format."""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass

from .errors import ConfigError


@dataclass
class ModelConfig:
    # architecture
    d: int = 32
    max_len: int = 64
    n_layers: int = 2
    k: int = 8
    pool_size: int = 256
    stride: int = 4
    ffn_mult: int = 2
    # ablations / variants
    use_imr: bool = True
    use_query_net: bool = True
    use_dispatcher: bool = True
    use_norm: bool = True
    score_weighting: bool = False
    query_masking: bool = True
    # optimisation
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 128
    max_epochs: int = 500
    patience: int = 10
    augment_prefixes: bool = True
    seed: int = 0
    # reserved hooks, must stay at their defaults
    heads: int = 1
    dropout: float = 0.0

    @property
    def n_keys(self):
        return math.isqrt(self.pool_size)

    def validate(self):
        positive = ("d", "max_len", "n_layers", "k", "pool_size", "stride", "ffn_mult",
                    "batch_size", "max_epochs", "patience")
        for key in positive:
            if getattr(self, key) < 1:
                raise ConfigError(f"{key} must be >= 1", key)
        if self.d % 2:
            raise ConfigError("d must be even (sub-keys split the query in halves)", "d")
        if self.n_keys ** 2 != self.pool_size:
            raise ConfigError(f"pool_size {self.pool_size} is not a perfect square", "pool_size")
        if self.k > self.n_keys:
            raise ConfigError(f"k={self.k} exceeds sqrt(pool_size)={self.n_keys}", "k")
        n = self.max_len
        while self.stride > 1 and n >= self.stride:
            if n % self.stride:
                raise ConfigError(
                    f"max_len {self.max_len} does not reduce evenly by stride {self.stride}", "max_len")
            n //= self.stride
        if not 0 < self.lr:
            raise ConfigError("lr must be positive", "lr")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("betas must lie in [0, 1)", "beta1")
        if self.heads != 1:
            raise ConfigError("only single-head attention is implemented", "heads")
        if self.dropout != 0.0:
            raise ConfigError("dropout is not implemented", "dropout")
        return self

    def replace(self, **overrides):
        return apply_overrides(self, overrides)

    def to_dict(self):
        return dataclasses.asdict(self)

    def to_text(self):
        return "".join(f"{k} = {_format(v)}\n" for k, v in self.to_dict().items())


def _format(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    return repr(value)


def _coerce(key, raw, kind):
    if not isinstance(raw, str):
        raw_value = raw
    else:
        raw_value = raw.strip().strip('"').strip("'")
    try:
        if kind is bool:
            if isinstance(raw_value, bool):
                return raw_value
            text = str(raw_value).lower()
            if text in ("1", "true", "yes", "on"):
                return True
            if text in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw_value)
        if kind is int:
            f = float(raw_value)
            if f != int(f):
                raise ValueError(raw_value)
            return int(f)
        return kind(raw_value)
    except (TypeError, ValueError):
        raise ConfigError(f"invalid value {raw!r} for {key} (expected {kind.__name__})", key) from None


_TYPES = {"bool": bool, "int": int, "float": float}


def apply_overrides(config, overrides):
    kinds = {f.name: _TYPES.get(f.type, str) for f in dataclasses.fields(ModelConfig)}
    values = config.to_dict()
    for key, raw in overrides.items():
        if key not in kinds:
            raise ConfigError(f"unknown config key {key!r}", key)
        values[key] = _coerce(key, raw, kinds[key])
    return ModelConfig(**values).validate()


def parse_config_text(text):
    """Parse ``key = value`` lines (``#`` starts a comment)."""
    out = {}
    for no, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {no}: expected key = value, got {line!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def load_config(path=None, overrides=()):
    """Defaults, then the config file, then ``key=value`` overrides (last wins)."""
    values = {}
    if path is not None:
        with open(path, encoding="utf-8") as fh:
            values.update(parse_config_text(fh.read()))
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, value = item.split("=", 1)
        values[key.strip()] = value.strip()
    return apply_overrides(ModelConfig(), values)
