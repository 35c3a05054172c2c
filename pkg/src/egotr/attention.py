"""Self-attention and self-cross attention, multihead wrapper, encoder layers.

The self-cross variant takes its keys from the previous layer's normalized
input instead of the current one; queries and values still come from the
current layer. A :class:`LayerCache` carries that normalized input from one
layer to the next. The first layer has no predecessor, so its cache is
seeded with its own normalized input, which makes it identical to plain
self-attention.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .exceptions import DimensionError, UsageError
from .tensor import Tensor

MODES = ("self", "self_cross")

INIT_STD = 0.02


def check_mode(mode: str) -> str:
    if mode not in MODES:
        raise UsageError(f"attention mode must be one of {MODES}, got {mode!r}")
    return mode


def _normal(rng: np.random.Generator, shape, std: float, dtype) -> np.ndarray:
    return (rng.standard_normal(shape) * std).astype(dtype)


@dataclass
class AttentionParams:
    """Projection matrices of one multihead attention block, all (D, D)."""

    w_q: Tensor
    w_k: Tensor
    w_v: Tensor
    w_o: Tensor
    num_heads: int

    def __post_init__(self):
        d = self.w_q.shape[0]
        if self.num_heads <= 0 or d % self.num_heads:
            raise DimensionError(f"model dim {d} is not divisible by {self.num_heads} heads")
        for name in ("w_q", "w_k", "w_v", "w_o"):
            if getattr(self, name).shape != (d, d):
                raise DimensionError(f"{name} must be ({d}, {d}), got {getattr(self, name).shape}")

    @property
    def dim(self) -> int:
        return self.w_q.shape[0]

    @property
    def head_dim(self) -> int:
        return self.dim // self.num_heads

    @classmethod
    def init(cls, dim: int, num_heads: int, rng: np.random.Generator, dtype=np.float32):
        mats = [T.parameter(_normal(rng, (dim, dim), INIT_STD, dtype)) for _ in range(4)]
        return cls(*mats, num_heads=num_heads)

    def parameters(self) -> dict[str, Tensor]:
        return {"w_q": self.w_q, "w_k": self.w_k, "w_v": self.w_v, "w_o": self.w_o}


@dataclass
class EncoderLayerParams:
    ln1_gain: Tensor
    ln1_bias: Tensor
    attn: AttentionParams
    ln2_gain: Tensor
    ln2_bias: Tensor
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor

    def __post_init__(self):
        d = self.attn.dim
        expected = {
            "ln1_gain": (d,), "ln1_bias": (d,), "ln2_gain": (d,), "ln2_bias": (d,),
            "w1": (d, 4 * d), "b1": (4 * d,), "w2": (4 * d, d), "b2": (d,),
        }
        for name, shape in expected.items():
            if getattr(self, name).shape != shape:
                raise DimensionError(f"{name} must be {shape}, got {getattr(self, name).shape}")

    @classmethod
    def init(cls, dim: int, num_heads: int, rng: np.random.Generator, dtype=np.float32):
        ones = lambda: T.parameter(np.ones(dim, dtype=dtype))  # noqa: E731
        zeros = lambda n: T.parameter(np.zeros(n, dtype=dtype))  # noqa: E731
        return cls(
            ln1_gain=ones(), ln1_bias=zeros(dim),
            attn=AttentionParams.init(dim, num_heads, rng, dtype),
            ln2_gain=ones(), ln2_bias=zeros(dim),
            w1=T.parameter(_normal(rng, (dim, 4 * dim), INIT_STD, dtype)), b1=zeros(4 * dim),
            w2=T.parameter(_normal(rng, (4 * dim, dim), INIT_STD, dtype)), b2=zeros(dim),
        )

    def parameters(self) -> dict[str, Tensor]:
        params = {"ln1_gain": self.ln1_gain, "ln1_bias": self.ln1_bias}
        params.update({f"attn.{k}": v for k, v in self.attn.parameters().items()})
        params.update({"ln2_gain": self.ln2_gain, "ln2_bias": self.ln2_bias,
                       "w1": self.w1, "b1": self.b1, "w2": self.w2, "b2": self.b2})
        return params


@dataclass
class LayerCache:
    """Normalized input of the previous layer (None before the first layer)."""

    z_prev: Tensor | None = None


def _head(q_src: Tensor, k_src: Tensor, w_q: Tensor, w_k: Tensor, w_v: Tensor) -> Tensor:
    d_h = w_q.shape[-1]
    q = q_src @ w_q
    k = k_src @ w_k
    v = q_src @ w_v
    logits = (q @ k.T) * (1.0 / math.sqrt(d_h))
    return T.softmax(logits, axis=-1) @ v


def self_attention_head(z: Tensor, w_q: Tensor, w_k: Tensor, w_v: Tensor) -> Tensor:
    """One attention head with queries, keys and values all projected from ``z``.

    ``w_*`` have shape (D, d_h); logits are scaled by sqrt(d_h).
    """
    return _head(z, z, w_q, w_k, w_v)


def self_cross_attention_head(z: Tensor, z_prev: Tensor, w_q: Tensor, w_k: Tensor,
                              w_v: Tensor) -> Tensor:
    """One head whose keys come from ``z_prev``; queries and values from ``z``."""
    if z.shape != z_prev.shape:
        raise DimensionError(f"z {z.shape} and z_prev {z_prev.shape} must match")
    return _head(z, z_prev, w_q, w_k, w_v)


def multihead(z: Tensor, z_prev: Tensor | None, params: AttentionParams, mode: str = "self_cross",
              return_weights: bool = False):
    """All heads at once, concatenated and projected by ``w_o``.

    ``z`` has shape (..., T, D). In ``"self"`` mode ``z_prev`` is ignored.
    With ``return_weights`` the post-softmax weights (..., h, T, T) are
    returned as a second value.
    """
    check_mode(mode)
    if z.shape[-1] != params.dim:
        raise DimensionError(f"input dim {z.shape[-1]} != attention dim {params.dim}")
    if mode == "self" or z_prev is None:
        k_src = z
    else:
        if z_prev.shape != z.shape:
            raise DimensionError(f"z {z.shape} and z_prev {z_prev.shape} must match")
        k_src = z_prev
    h, d_h = params.num_heads, params.head_dim
    lead, n_tok = z.shape[:-2], z.shape[-2]

    def split(t: Tensor) -> Tensor:
        return t.reshape(*lead, n_tok, h, d_h).swapaxes(-2, -3)

    q = split(z @ params.w_q)
    k = split(k_src @ params.w_k)
    v = split(z @ params.w_v)
    weights = T.softmax((q @ k.swapaxes(-1, -2)) * (1.0 / math.sqrt(d_h)), axis=-1)
    heads = (weights @ v).swapaxes(-2, -3).reshape(*lead, n_tok, h * d_h)
    out = heads @ params.w_o
    return (out, weights) if return_weights else out


def feed_forward(y: Tensor, layer: EncoderLayerParams) -> Tensor:
    return T.gelu(y @ layer.w1 + layer.b1) @ layer.w2 + layer.b2


def encoder_layer(x: Tensor, cache: LayerCache | None, layer: EncoderLayerParams,
                  mode: str = "self_cross") -> tuple[Tensor, LayerCache]:
    """Pre-norm residual layer; returns the output and the cache for the next layer."""
    z = T.layer_norm(x, layer.ln1_gain, layer.ln1_bias)
    z_prev = cache.z_prev if cache is not None and cache.z_prev is not None else z
    y = x + multihead(z, z_prev, layer.attn, mode)
    out = y + feed_forward(T.layer_norm(y, layer.ln2_gain, layer.ln2_bias), layer)
    return out, LayerCache(z)


def encoder_stack(x0: Tensor, layers: list[EncoderLayerParams],
                  mode: str = "self_cross") -> tuple[Tensor, list[Tensor]]:
    """Run all layers, threading the cache; also return every layer's output."""
    if not layers:
        raise UsageError("encoder_stack needs at least one layer")
    check_mode(mode)
    x, cache = x0, LayerCache()
    outputs = []
    for layer in layers:
        x, cache = encoder_layer(x, cache, layer, mode)
        outputs.append(x)
    return x, outputs


def layer_mac_count(dim: int, n_tokens: int, num_heads: int, mode: str) -> int:
    """Multiply-accumulates of one encoder layer on a (n_tokens, dim) input, measured."""
    rng = np.random.default_rng(0)
    layer = EncoderLayerParams.init(dim, num_heads, rng, np.float64)
    x = Tensor(rng.standard_normal((n_tokens, dim)))
    prev = LayerCache(T.layer_norm(Tensor(rng.standard_normal((n_tokens, dim))),
                                   layer.ln1_gain, layer.ln1_bias))
    with T.no_grad(), T.count_macs() as counter:
        encoder_layer(x, prev, layer, mode)
    return counter.total
