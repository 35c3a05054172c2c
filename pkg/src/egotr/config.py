"""Flat ``key = value`` run configuration shared by every command."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

from .exceptions import ConfigError
from .model import ModelConfig
from .training import TrainConfig


@dataclass
class RunConfig:
    """Everything a command needs besides its positional inputs.

    Precedence is defaults < config file < command-line flags. The merged
    result is echoed to ``config.txt`` in every output directory and can be
    passed back with ``--config`` to reproduce the run.
    """

    seed: int = 0
    # generator
    pairs: int = 256
    aligned: bool = True
    ground_size: tuple[int, int] = (32, 128)
    aerial_size: int = 64
    # model
    embed_dim: int = 64
    depth: int = 4
    num_heads: int = 4
    stem_channels: tuple[int, ...] = (32, 64, 128)
    mode: str = "self_cross"
    use_pos_embed: bool = True
    use_polar: bool = False
    descriptor_norm: bool = True
    # optimisation
    epochs: int = 50
    batch_size: int = 32
    alpha: float = 10.0
    lr: float = 1e-4
    lr_min: float = 0.0
    weight_decay: float = 0.03
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    warmup_steps: int = 0
    clip_norm: float = 1.0
    eval_batch_size: int = 64

    def __post_init__(self):
        if self.pairs < 2:
            raise ConfigError("need >= 2 pairs")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2")
        if self.epochs < 0 or self.warmup_steps < 0:
            raise ConfigError("epochs and warmup_steps must be >= 0")
        if self.lr <= 0 or self.lr_min < 0 or self.lr_min > self.lr:
            raise ConfigError(f"need 0 <= lr_min <= lr and lr > 0, got lr={self.lr} lr_min={self.lr_min}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1) or self.eps <= 0:
            raise ConfigError("betas must lie in [0, 1) and eps must be positive")
        if self.weight_decay < 0 or self.alpha <= 0:
            raise ConfigError("weight_decay must be >= 0 and alpha > 0")
        if self.aerial_size <= 0 or min(self.ground_size) <= 0 or len(self.ground_size) != 2:
            raise ConfigError(f"invalid image sizes {self.ground_size} / {self.aerial_size}")
        if self.eval_batch_size < 1:
            raise ConfigError("eval_batch_size must be >= 1")
        # surfaces architecture errors (e.g. polar warp on a non-square input) before any work
        self.model_config()

    def model_config(self, ground_size=None, aerial_size=None) -> ModelConfig:
        gs = tuple(ground_size or self.ground_size)
        a = int(aerial_size or self.aerial_size)
        return ModelConfig(embed_dim=self.embed_dim, depth=self.depth, num_heads=self.num_heads,
                           stem_channels=self.stem_channels, ground_size=gs, aerial_size=(a, a),
                           mode=self.mode, use_pos_embed=self.use_pos_embed,
                           use_polar=self.use_polar, descriptor_norm=self.descriptor_norm)

    def train_config(self) -> TrainConfig:
        return TrainConfig(epochs=self.epochs, batch_size=self.batch_size, alpha=self.alpha,
                           lr=self.lr, lr_min=self.lr_min, weight_decay=self.weight_decay,
                           betas=(self.beta1, self.beta2), eps=self.eps,
                           warmup_steps=self.warmup_steps,
                           clip_norm=self.clip_norm if self.clip_norm > 0 else None,
                           seed=self.seed)

    def replace(self, **changes) -> "RunConfig":
        return parse_values({**self.to_dict(), **changes})

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_text(self) -> str:
        return "".join(f"{k} = {format_value(k, v)}\n" for k, v in self.to_dict().items())


def format_value(key: str, v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ("x" if key == "ground_size" else ",").join(map(str, v))
    if isinstance(v, float):
        return repr(v)
    return str(v)


_FIELDS = {f.name: f for f in dataclasses.fields(RunConfig)}


def _coerce(key: str, value):
    if key not in _FIELDS:
        raise ConfigError(f"unknown config key {key!r}")
    if not isinstance(value, str):
        return tuple(value) if isinstance(value, list) else value
    default = _FIELDS[key].default
    text = value.strip()
    try:
        if isinstance(default, bool):
            low = text.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(text)
            return low in ("true", "1", "yes")
        if isinstance(default, tuple):
            return tuple(int(x) for x in text.replace("x", ",").split(",") if x.strip())
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
    except ValueError:
        raise ConfigError(f"bad value for {key}: {value!r}") from None
    return text


def parse_values(values: dict) -> RunConfig:
    """Build a validated config from raw (possibly string) values."""
    return RunConfig(**{k: _coerce(k, v) for k, v in values.items()})


def parse_text(text: str) -> dict:
    """Raw ``key = value`` pairs; blank lines and ``#`` comments are skipped."""
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key = key.strip()
        if not sep or not key:
            raise ConfigError(f"line {n}: expected 'key = value', got {line!r}")
        if key in out:
            raise ConfigError(f"line {n}: duplicate key {key!r}")
        _coerce(key, value)
        out[key] = value.strip()
    return out


def load_config(path=None, overrides: dict | None = None) -> RunConfig:
    """Defaults, then the file at ``path``, then ``overrides`` (``None`` values ignored)."""
    values = {}
    if path is not None:
        try:
            with open(path) as fh:
                values.update(parse_text(fh.read()))
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    values.update({k: v for k, v in (overrides or {}).items() if v is not None})
    return parse_values(values)
