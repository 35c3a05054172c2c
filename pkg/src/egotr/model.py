"""Two-branch geo-localization transformer.

Each branch is a small strided convolution stem whose 1x1 output cells
become tokens, followed by a class token, learnable positional embeddings
and an encoder stack. Ground and aerial branches have the same structure
and independent parameters. The final class-token state is the image
descriptor.
"""

from __future__ import annotations

import dataclasses
import math
import struct
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .attention import INIT_STD, MODES, EncoderLayerParams, encoder_stack
from .exceptions import CheckpointError, ConfigError, DimensionError, UsageError
from .tensor import Tensor

BRANCHES = ("ground", "aerial")
# Fixed input standardization: pixel values in [0, 1] map to roughly [-2, 2].
INPUT_MEAN = 0.5
INPUT_STD = 0.25


@dataclass
class ModelConfig:
    """Architecture hyperparameters.

    Defaults are the desk-scale configuration; :meth:`full_scale` gives
    the full-size one (768-d descriptors, 12 layers).
    """

    embed_dim: int = 64
    depth: int = 4
    num_heads: int = 4
    stem_channels: tuple[int, ...] = (16, 32, 64)
    in_channels: int = 3
    ground_size: tuple[int, int] = (64, 256)
    aerial_size: tuple[int, int] = (128, 128)
    mode: str = "self_cross"
    use_pos_embed: bool = True
    use_polar: bool = False
    descriptor_norm: bool = True

    def __post_init__(self):
        self.stem_channels = tuple(int(c) for c in self.stem_channels)
        self.ground_size = tuple(int(v) for v in self.ground_size)
        self.aerial_size = tuple(int(v) for v in self.aerial_size)
        ints = [self.embed_dim, self.depth, self.num_heads, self.in_channels,
                *self.stem_channels, *self.ground_size, *self.aerial_size]
        if any(v <= 0 for v in ints) or not self.stem_channels:
            raise ConfigError("model dimensions must be positive and the stem non-empty")
        if self.embed_dim % self.num_heads:
            raise ConfigError(f"embed_dim {self.embed_dim} not divisible by num_heads {self.num_heads}")
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.use_polar and self.aerial_size[0] != self.aerial_size[1]:
            raise ConfigError(f"polar warp needs a square aerial input, got {self.aerial_size}")
        s = self.stride
        for name in ("ground_size", "branch_aerial_size"):
            h, w = getattr(self, name)
            if h % s or w % s:
                raise ConfigError(f"{name} {h}x{w} is not divisible by the stem stride {s}")

    @classmethod
    def full_scale(cls, **overrides) -> "ModelConfig":
        base = dict(embed_dim=768, depth=12, num_heads=12, stem_channels=(64, 128, 256, 512),
                    ground_size=(128, 512), aerial_size=(256, 256))
        base.update(overrides)
        return cls(**base)

    @property
    def stride(self) -> int:
        return 2 ** len(self.stem_channels)

    @property
    def branch_aerial_size(self) -> tuple[int, int]:
        """Input size the aerial branch sees (the panorama size after a polar warp)."""
        return self.ground_size if self.use_polar else self.aerial_size

    def input_size(self, branch: str) -> tuple[int, int]:
        return self.ground_size if branch == "ground" else self.branch_aerial_size

    def grid(self, branch: str) -> tuple[int, int]:
        h, w = self.input_size(branch)
        return h // self.stride, w // self.stride

    def num_patches(self, branch: str) -> int:
        hf, wf = self.grid(branch)
        return hf * wf

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_text(self) -> str:
        lines = []
        for k, v in self.to_dict().items():
            if isinstance(v, bool):
                v = "true" if v else "false"
            elif isinstance(v, (tuple, list)):
                v = ",".join(str(x) for x in v)
            lines.append(f"{k} = {v}")
        return "\n".join(lines)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        fields = {f.name: f for f in dataclasses.fields(cls)}
        unknown = set(d) - set(fields)
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        kwargs = {}
        for k, v in d.items():
            if isinstance(v, str):
                default = getattr(cls(), k)
                if isinstance(default, bool):
                    v = v.strip().lower() in ("1", "true", "yes", "on")
                elif isinstance(default, tuple):
                    v = tuple(int(x) for x in v.replace("x", ",").split(",") if x.strip())
                elif isinstance(default, int):
                    v = int(v)
            kwargs[k] = v
        return cls(**kwargs)


@dataclass
class BranchParams:
    stem: list[tuple[Tensor, Tensor]]
    proj: Tensor
    x_class: Tensor
    x_pos: Tensor
    layers: list[EncoderLayerParams]

    def __post_init__(self):
        c_stem, d = self.proj.shape
        if self.stem[-1][0].shape[0] != c_stem:
            raise DimensionError(f"projection expects {c_stem} channels, "
                                 f"stem yields {self.stem[-1][0].shape[0]}")
        if self.x_class.shape != (d,) or self.x_pos.ndim != 2 or self.x_pos.shape[1] != d:
            raise DimensionError("class token / positional embedding shapes do not match embed dim")

    @classmethod
    def init(cls, config: ModelConfig, branch: str, rng: np.random.Generator, dtype=np.float32):
        stem = []
        c_in = config.in_channels
        for c_out in config.stem_channels:
            fan_in = c_in * 9
            w = rng.standard_normal((c_out, c_in, 3, 3)) * math.sqrt(2.0 / fan_in)
            stem.append((T.parameter(w.astype(dtype)), T.parameter(np.zeros(c_out, dtype=dtype))))
            c_in = c_out
        d = config.embed_dim
        proj = T.parameter((rng.standard_normal((c_in, d)) / math.sqrt(c_in)).astype(dtype))
        x_class = T.parameter((rng.standard_normal(d) * INIT_STD).astype(dtype))
        n = config.num_patches(branch)
        x_pos = T.parameter((rng.standard_normal((n + 1, d)) * INIT_STD).astype(dtype))
        layers = [EncoderLayerParams.init(d, config.num_heads, rng, dtype) for _ in range(config.depth)]
        return cls(stem, proj, x_class, x_pos, layers)

    def parameters(self) -> dict[str, Tensor]:
        params = {}
        for k, (w, b) in enumerate(self.stem):
            params[f"stem.{k}.weight"] = w
            params[f"stem.{k}.bias"] = b
        params["proj"] = self.proj
        params["x_class"] = self.x_class
        params["x_pos"] = self.x_pos
        for k, layer in enumerate(self.layers):
            params.update({f"layers.{k}.{n}": p for n, p in layer.parameters().items()})
        return params


def cnn_stem(image: Tensor, stem: list[tuple[Tensor, Tensor]]) -> Tensor:
    """Stride-2 3x3 convolutions with GELU; (B, C, H, W) -> (B, C_stem, H/s, W/s)."""
    x = image
    for w, b in stem:
        if x.shape[1] != w.shape[1]:
            raise DimensionError(f"stem expects {w.shape[1]} input channels, got {x.shape[1]}")
        x = T.gelu(T.conv2d(x, w, b, stride=2, padding=1))
    return x


def patchify(features: Tensor, proj: Tensor, x_class: Tensor, x_pos: Tensor,
             use_pos_embed: bool = True) -> Tensor:
    """Turn every 1x1 feature cell into a token: (B, C, Hf, Wf) -> (B, N+1, D).

    Cells are taken row by row; the class token is row 0.
    """
    bsz, c, hf, wf = features.shape
    n = hf * wf
    if x_pos.shape[0] != n + 1:
        raise ConfigError(f"positional embedding has {x_pos.shape[0]} rows, need {n + 1}")
    tokens = features.reshape(bsz, c, n).swapaxes(1, 2) @ proj
    d = proj.shape[1]
    cls = x_class.reshape(1, 1, d) + Tensor._wrap(np.zeros((bsz, 1, d), dtype=tokens.dtype))
    x0 = T.concat([cls, tokens], axis=1)
    if use_pos_embed:
        x0 = x0 + x_pos
    return x0


@dataclass
class EgoTrModel:
    config: ModelConfig
    ground: BranchParams
    aerial: BranchParams
    meta: dict = field(default_factory=dict)

    @classmethod
    def init(cls, config: ModelConfig, seed: int = 0, dtype=np.float32) -> "EgoTrModel":
        rng = np.random.default_rng(seed)
        ground = BranchParams.init(config, "ground", rng, dtype)
        aerial = BranchParams.init(config, "aerial", rng, dtype)
        return cls(config, ground, aerial)

    def branch(self, name: str) -> BranchParams:
        if name not in BRANCHES:
            raise UsageError(f"branch must be 'ground' or 'aerial', got {name!r}")
        return getattr(self, name)

    def named_parameters(self) -> dict[str, Tensor]:
        params = {}
        for name in BRANCHES:
            params.update({f"{name}.{k}": v for k, v in self.branch(name).parameters().items()})
        return params

    def num_parameters(self) -> int:
        return sum(p.size for p in self.named_parameters().values())

    @property
    def dtype(self):
        return self.ground.proj.dtype

    def astype(self, dtype) -> "EgoTrModel":
        """A copy with every parameter cast to ``dtype``."""
        other = EgoTrModel.init(self.config, 0, dtype)
        other.load_state(self.state_dict())
        return other

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.named_parameters().items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        params = self.named_parameters()
        missing = set(params) - set(state)
        extra = set(state) - set(params)
        if missing or extra:
            raise CheckpointError(f"parameter names differ: missing {sorted(missing)[:5]}, "
                                  f"unexpected {sorted(extra)[:5]}")
        for k, p in params.items():
            arr = np.asarray(state[k])
            if arr.shape != p.shape:
                raise CheckpointError(f"{k}: checkpoint shape {arr.shape} != model shape {p.shape}")
            p.data = arr.astype(p.dtype, copy=True)

    def zero_grad(self) -> None:
        for p in self.named_parameters().values():
            p.grad = None


def _as_batch(image, dtype) -> tuple[Tensor, bool]:
    if not isinstance(image, Tensor):
        image = Tensor._wrap(np.asarray(image, dtype=dtype))
    elif image.dtype != dtype and image.is_leaf and not image.requires_grad:
        image = Tensor._wrap(image.data.astype(dtype))
    if image.ndim == 3:
        return image.reshape(1, *image.shape), True
    if image.ndim != 4:
        raise UsageError(f"images must be (C, H, W) or (B, C, H, W), got {image.shape}")
    return image, False


def forward_branch(model: EgoTrModel, image, branch: str) -> tuple[Tensor, list[Tensor]]:
    """Descriptor (B, D) and every encoder layer's output (B, N+1, D)."""
    params = model.branch(branch)
    cfg = model.config
    x, _ = _as_batch(image, model.dtype)
    expected = cfg.input_size(branch)
    if x.shape[1] != cfg.in_channels or tuple(x.shape[2:]) != expected:
        raise UsageError(f"{branch} branch expects ({cfg.in_channels}, {expected[0]}, {expected[1]}) "
                         f"images, got {tuple(x.shape[1:])}")
    x = (x - INPUT_MEAN) * (1.0 / INPUT_STD)
    feats = cnn_stem(x, params.stem)
    x0 = patchify(feats, params.proj, params.x_class, params.x_pos, cfg.use_pos_embed)
    out, per_layer = encoder_stack(x0, params.layers, cfg.mode)
    desc = out[:, 0, :]
    if cfg.descriptor_norm:
        desc = T.l2_normalize(desc, axis=-1)
    return desc, per_layer


def forward_descriptor(model: EgoTrModel, image, branch: str) -> Tensor:
    """Class-token descriptor; (D,) for one image, (B, D) for a batch."""
    _, single = _as_batch(image, model.dtype)
    desc, _ = forward_branch(model, image, branch)
    return desc.reshape(desc.shape[-1]) if single else desc


def forward_pair(model: EgoTrModel, ground_img, aerial_img):
    """(F_g, F_a, per-layer outputs of both branches)."""
    f_g, layers_g = forward_branch(model, ground_img, "ground")
    f_a, layers_a = forward_branch(model, aerial_img, "aerial")
    return f_g, f_a, {"ground": layers_g, "aerial": layers_a}


def descriptors(model: EgoTrModel, images: np.ndarray, branch: str, batch_size: int = 64,
                return_layers: bool = False):
    """Inference over many images without recording gradients.

    With ``return_layers`` also returns the class-token state after every
    layer as an array (L, n, D).
    """
    out, cls_states = [], []
    with T.no_grad():
        for start in range(0, len(images), batch_size):
            desc, per_layer = forward_branch(model, images[start:start + batch_size], branch)
            out.append(desc.data)
            if return_layers:
                cls_states.append(np.stack([h.data[:, 0, :] for h in per_layer]))
    desc = np.concatenate(out, axis=0)
    if return_layers:
        return desc, np.concatenate(cls_states, axis=1)
    return desc


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------
#
# Layout (all integers little-endian):
#   magic  b"EGOTRCK1"
#   u32    header length, then UTF-8 "key = value" lines
#   u32    blob count, then per blob:
#          u16 name length, name (UTF-8), u8 ndim, u32 * ndim dims,
#          float32 data in row-major order

MAGIC = b"EGOTRCK1"


def _encode_header(header: dict) -> bytes:
    lines = []
    for k, v in header.items():
        s = str(v)
        if "\n" in s:
            raise CheckpointError(f"header value for {k!r} spans lines")
        lines.append(f"{k} = {s}")
    return ("\n".join(lines) + "\n").encode("utf-8")


def save_checkpoint(path, model: EgoTrModel, header: dict | None = None,
                    extra_blobs: dict[str, np.ndarray] | None = None) -> None:
    """Write config, optional metadata and all parameters (as float32)."""
    full_header = {f"model.{k}": v for k, v in
                   (line.split(" = ", 1) for line in model.config.to_text().splitlines())}
    full_header.update(header or {})
    blobs = dict(model.named_parameters())
    blobs = {k: v.data for k, v in blobs.items()}
    for k, v in (extra_blobs or {}).items():
        blobs[k] = v
    head = _encode_header(full_header)
    parts = [MAGIC, struct.pack("<I", len(head)), head, struct.pack("<I", len(blobs))]
    for name, arr in blobs.items():
        arr = np.ascontiguousarray(arr, dtype="<f4")
        nb = name.encode("utf-8")
        parts.append(struct.pack("<H", len(nb)) + nb + struct.pack("<B", arr.ndim)
                     + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


def read_checkpoint(path) -> tuple[dict[str, str], dict[str, np.ndarray]]:
    """Raw header and blobs of a checkpoint file."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:8] != MAGIC:
        raise CheckpointError(f"{path}: not an EgoTR checkpoint")
    try:
        pos = 8
        (hlen,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        header = {}
        for line in raw[pos:pos + hlen].decode("utf-8").splitlines():
            if line:
                k, _, v = line.partition(" = ")
                header[k] = v
        pos += hlen
        (count,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        blobs = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", raw, pos)
            pos += 2
            name = raw[pos:pos + nlen].decode("utf-8")
            pos += nlen
            (ndim,) = struct.unpack_from("<B", raw, pos)
            pos += 1
            shape = struct.unpack_from(f"<{ndim}I", raw, pos)
            pos += 4 * ndim
            n = int(np.prod(shape)) if shape else 1
            arr = np.frombuffer(raw, dtype="<f4", count=n, offset=pos)
            blobs[name] = arr.reshape(shape).astype(np.float32)
            pos += 4 * n
    except (struct.error, ValueError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"{path}: truncated or corrupt checkpoint ({exc})") from None
    return header, blobs


def load_checkpoint(path, dtype=np.float32, expect: ModelConfig | None = None):
    """Rebuild the model stored at ``path``.

    Returns ``(model, header, extra_blobs)`` where ``extra_blobs`` holds
    anything that is not a model parameter (e.g. optimizer moments).
    """
    header, blobs = read_checkpoint(path)
    cfg_kv = {k[len("model."):]: v for k, v in header.items() if k.startswith("model.")}
    config = ModelConfig.from_dict(cfg_kv)
    if expect is not None and expect != config:
        diff = {k: (getattr(expect, k), getattr(config, k)) for k in config.to_dict()
                if getattr(expect, k) != getattr(config, k)}
        raise CheckpointError(f"checkpoint config differs from expected: {diff}")
    model = EgoTrModel.init(config, 0, dtype)
    names = set(model.named_parameters())
    model.load_state({k: v for k, v in blobs.items() if k in names})
    extra = {k: v for k, v in blobs.items() if k not in names}
    rest = {k: v for k, v in header.items() if not k.startswith("model.")}
    return model, rest, extra
