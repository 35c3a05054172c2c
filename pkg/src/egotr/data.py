"""Synthetic cross-view scenes, polar warping, dataset splits and batching.

A scene is a flat textured world 16 units across with a handful of coloured
objects on it. The aerial view is an orthographic top-down raster; the
ground view is a 360 degree cylindrical panorama taken from the world
centre. Panorama column ``j`` looks along azimuth ``2*pi*j/W`` measured
counterclockwise from east, the same angle convention the polar warp uses,
so a warped aerial and its panorama line up column for column.

Pixel values are quantized to multiples of 1/255 so PPM export round-trips
exactly.
"""

from __future__ import annotations

import functools
import math
import os
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from .exceptions import DataError, UsageError

WORLD_HALF = 8.0          # world spans [-8, 8] units on both axes
CAMERA_HEIGHT = 0.5
MAX_ELEVATION = math.pi / 4
SHAPES = ("disc", "box", "spire")

PALETTE = np.array([
    [0.90, 0.10, 0.10], [0.10, 0.70, 0.15], [0.15, 0.25, 0.95], [0.95, 0.85, 0.10],
    [0.85, 0.15, 0.85], [0.10, 0.85, 0.85], [0.98, 0.55, 0.05], [0.55, 0.25, 0.05],
    [0.98, 0.98, 0.98], [0.08, 0.08, 0.08], [0.55, 0.10, 0.55], [0.50, 0.80, 0.30],
])
BACKGROUNDS = np.array([[0.45, 0.55, 0.35], [0.60, 0.55, 0.40], [0.50, 0.50, 0.50]])
SKY = np.array([0.55, 0.75, 0.95])


@dataclass(frozen=True)
class SceneObject:
    x: float
    y: float
    shape: str
    color: tuple[float, float, float]
    radius: float
    height: float


@dataclass(frozen=True)
class SceneSpec:
    """Procedural description of one location.

    ``heading`` is the yaw of the ground camera in radians; 0 means the
    panorama starts at east like the polar warp does.
    """

    seed: int
    objects: tuple[SceneObject, ...]
    background: tuple[float, float, float]
    texture: tuple[float, ...]
    heading: float = 0.0

    @classmethod
    def random(cls, seed: int, heading: float = 0.0, n_objects: tuple[int, int] = (5, 15)):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(n_objects[0], n_objects[1] + 1))
        objects = []
        for _ in range(n):
            shape = SHAPES[int(rng.integers(len(SHAPES)))]
            radius = float(rng.uniform(0.4, 1.2))
            # keep clear of the camera and inside the world
            while True:
                x, y = rng.uniform(-(WORLD_HALF - radius), WORLD_HALF - radius, size=2)
                if math.hypot(x, y) >= radius + 0.8:
                    break
            color = tuple(float(c) for c in PALETTE[int(rng.integers(len(PALETTE)))])
            height = float(rng.uniform(0.8, 3.0))
            objects.append(SceneObject(float(x), float(y), shape, color, radius, height))
        background = tuple(float(c) for c in BACKGROUNDS[int(rng.integers(len(BACKGROUNDS)))])
        # two sinusoid products per channel-shared texture
        texture = tuple(float(v) for v in np.concatenate([
            rng.uniform(0.3, 1.5, size=4), rng.uniform(0, 2 * math.pi, size=4)]))
        return cls(seed=seed, objects=tuple(objects), background=background,
                   texture=texture, heading=float(heading))

    def with_heading(self, heading: float) -> "SceneSpec":
        return SceneSpec(self.seed, self.objects, self.background, self.texture, float(heading))


@dataclass
class CrossViewPair:
    ground: np.ndarray   # (3, Hg, Wg)
    aerial: np.ndarray   # (3, S, S)
    id: str


def _quantize(img: np.ndarray) -> np.ndarray:
    return (np.round(np.clip(img, 0.0, 1.0) * 255.0) / 255.0).astype(np.float32)


def _ground_texture(spec: SceneSpec, wx: np.ndarray, wy: np.ndarray) -> np.ndarray:
    k1, k2, k3, k4, p1, p2, p3, p4 = spec.texture
    pattern = (0.06 * np.sin(k1 * wx + p1) * np.cos(k2 * wy + p2)
               + 0.04 * np.sin(k3 * (wx + wy) + p3) * np.sin(k4 * (wx - wy) + p4))
    bg = np.asarray(spec.background)
    return bg[:, None, None] + pattern[None]


def render_aerial(spec: SceneSpec, size: int) -> np.ndarray:
    """Top-down orthographic view, world centre at pixel (size/2, size/2)."""
    scale = 2 * WORLD_HALF / size
    idx = np.arange(size)
    wx = (idx[None, :] - size / 2) * scale
    wy = (size / 2 - idx[:, None]) * scale
    wx, wy = np.broadcast_arrays(wx, wy)
    img = _ground_texture(spec, wx, wy)
    for obj in sorted(spec.objects, key=lambda o: o.height):
        dx, dy = wx - obj.x, wy - obj.y
        color = np.asarray(obj.color)[:, None, None]
        if obj.shape == "box":
            mask = (np.abs(dx) <= obj.radius) & (np.abs(dy) <= obj.radius)
            img = np.where(mask, color, img)
        else:
            rr = np.hypot(dx, dy) / obj.radius
            mask = rr <= 1.0
            shade = 1.0 - 0.35 * rr if obj.shape == "spire" else np.ones_like(rr)
            img = np.where(mask, color * shade, img)
    return _quantize(img)


def _wrap_angle(a):
    return (a + np.pi) % (2 * np.pi) - np.pi


def render_ground(spec: SceneSpec, height: int, width: int) -> np.ndarray:
    """Cylindrical panorama from the world centre; nearer objects appear larger."""
    cols = np.arange(width)
    rows = np.arange(height)
    azimuth = 2 * np.pi * cols / width
    elevation = MAX_ELEVATION * (1.0 - 2.0 * (rows + 0.5) / height)
    az, el = np.meshgrid(azimuth, elevation)

    img = np.empty((3, height, width))
    sky_mix = np.clip(el / MAX_ELEVATION, 0, 1)
    img[:] = (SKY[:, None, None] * (0.8 + 0.2 * sky_mix)[None])
    below = el < 0
    dist = np.where(below, CAMERA_HEIGHT / np.tan(np.where(below, -el, 1.0)), 0.0)
    gx, gy = dist * np.cos(az), dist * np.sin(az)
    inside = below & (np.abs(gx) <= WORLD_HALF) & (np.abs(gy) <= WORLD_HALF)
    tex = _ground_texture(spec, gx, gy)
    far = np.asarray(spec.background)[:, None, None] * np.ones_like(el)[None]
    img = np.where(below[None], np.where(inside[None], tex, far), img)

    ordered = sorted(spec.objects, key=lambda o: -math.hypot(o.x, o.y))
    for obj in ordered:
        d = math.hypot(obj.x, obj.y)
        theta = math.atan2(obj.y, obj.x)
        half = math.asin(min(obj.radius / d, 1.0))
        near = max(d - obj.radius, 0.3)
        bottom = -math.atan(CAMERA_HEIGHT / near)
        top = math.atan((obj.height - CAMERA_HEIGHT) / near)
        delta = _wrap_angle(az - theta)
        if obj.shape == "spire":
            frac = np.clip((top - el) / (top - bottom), 0, 1)
            width_here = half * frac
        else:
            width_here = half
        mask = (np.abs(delta) <= width_here) & (el >= bottom) & (el <= top)
        shade = 0.75 + 0.25 * np.cos(np.clip(delta / half, -1, 1) * np.pi / 2)
        color = np.asarray(obj.color)[:, None, None] * shade[None]
        img = np.where(mask[None], color, img)

    img = _quantize(img)
    shift = heading_to_columns(spec.heading, width)
    if shift:
        img = np.roll(img, -shift, axis=-1)
    return img


def heading_to_columns(heading: float, width: int) -> int:
    """Panorama column offset for a camera yaw, rounded to whole columns."""
    return int(round(heading * width / (2 * np.pi))) % width


def render_pair(spec: SceneSpec, ground_size=(64, 256), aerial_size: int = 128,
                pair_id: str = "") -> CrossViewPair:
    hg, wg = ground_size
    return CrossViewPair(ground=render_ground(spec, hg, wg),
                         aerial=render_aerial(spec, aerial_size), id=pair_id)


# ---------------------------------------------------------------------------
# Polar warp
# ---------------------------------------------------------------------------


@functools.lru_cache(maxsize=16)
def _polar_grid(size: int, height: int, width: int):
    i = np.arange(height, dtype=np.float64)[:, None]
    j = np.arange(width, dtype=np.float64)[None, :]
    radius = (size / 2.0) * (height - i) / height
    x = size / 2.0 + radius * np.cos(2 * np.pi * j / width)
    y = size / 2.0 - radius * np.sin(2 * np.pi * j / width)
    return x, y


def polar_transform(aerial, out_size=(64, 256), fill: float | None = None) -> np.ndarray:
    """Warp square aerial image(s) into panorama coordinates.

    Output pixel (i, j) samples the aerial at column
    ``S/2 + (S/2)(H-i)/H cos(2 pi j/W)`` and row
    ``S/2 - (S/2)(H-i)/H sin(2 pi j/W)`` with bilinear interpolation, so the
    bottom row is the centre and the top row the inscribed circle.

    ``aerial`` is (C, S, S) or (n, C, S, S). Samples falling outside the
    image take ``fill`` when given, otherwise the nearest border pixel.
    """
    img = np.asarray(getattr(aerial, "data", aerial))
    if img.ndim < 2 or img.shape[-1] != img.shape[-2]:
        raise UsageError(f"polar transform needs a square aerial image, got {img.shape}")
    size = img.shape[-1]
    height, width = out_size
    x, y = _polar_grid(size, height, width)
    outside = (x < 0) | (x > size - 1) | (y < 0) | (y > size - 1)
    xc = np.clip(x, 0, size - 1)
    yc = np.clip(y, 0, size - 1)
    x0 = np.minimum(np.floor(xc).astype(np.intp), size - 2)
    y0 = np.minimum(np.floor(yc).astype(np.intp), size - 2)
    fx = (xc - x0).astype(img.dtype)
    fy = (yc - y0).astype(img.dtype)
    a = img[..., y0, x0]
    b = img[..., y0, x0 + 1]
    c = img[..., y0 + 1, x0]
    d = img[..., y0 + 1, x0 + 1]
    out = (a * (1 - fx) + b * fx) * (1 - fy) + (c * (1 - fx) + d * fx) * fy
    if fill is not None:
        out = np.where(outside, np.asarray(fill, dtype=img.dtype), out)
    return out.astype(img.dtype, copy=False)


# ---------------------------------------------------------------------------
# Datasets
# ---------------------------------------------------------------------------


def split_counts(n: int) -> tuple[int, int, int]:
    """70/10/20 split sizes: floor for train, ceil for val, remainder to test."""
    n_train = (7 * n) // 10
    n_val = -(-n // 10)
    return n_train, n_val, n - n_train - n_val


@dataclass
class DatasetManifest:
    split: str
    ids: list[str]
    params: dict = field(default_factory=dict)
    orientation_aligned: bool = True


@dataclass
class CrossViewDataset:
    """Rendered pairs plus their split assignment."""

    ground: np.ndarray           # (n, 3, Hg, Wg) float32
    aerial: np.ndarray           # (n, 3, S, S) float32
    ids: list[str]
    headings: np.ndarray         # (n,) radians
    splits: dict[str, list[str]]
    params: dict

    def __len__(self):
        return len(self.ids)

    @property
    def orientation_aligned(self) -> bool:
        return bool(self.params.get("aligned", True))

    def manifest(self, split: str) -> DatasetManifest:
        if split not in self.splits:
            raise DataError(f"unknown split {split!r}; have {sorted(self.splits)}")
        return DatasetManifest(split, list(self.splits[split]), dict(self.params),
                               self.orientation_aligned)

    def subset(self, split: str) -> "CrossViewDataset":
        if split == "all":
            return self
        ids = self.manifest(split).ids
        pos = {pid: k for k, pid in enumerate(self.ids)}
        rows = [pos[i] for i in ids]
        return CrossViewDataset(self.ground[rows], self.aerial[rows], list(ids),
                                self.headings[rows], {split: list(ids)}, dict(self.params))

    def pair(self, k: int) -> CrossViewPair:
        return CrossViewPair(self.ground[k], self.aerial[k], self.ids[k])


def make_dataset(n_pairs: int, seed: int = 0, ground_size=(64, 256), aerial_size: int = 128,
                 orientation_aligned: bool = True) -> CrossViewDataset:
    """Render ``n_pairs`` scenes and split them 70/10/20 (see :func:`split_counts`)."""
    if n_pairs < 2:
        raise UsageError("need >= 2 pairs")
    rng = np.random.default_rng(seed)
    scene_seeds = rng.integers(0, 2 ** 32, size=n_pairs, dtype=np.uint64)
    if orientation_aligned:
        headings = np.zeros(n_pairs)
    else:
        # whole-column yaws so a heading is exactly a cyclic roll
        cols = rng.integers(0, ground_size[1], size=n_pairs)
        headings = 2 * np.pi * cols / ground_size[1]
    ids = [f"{k:05d}" for k in range(n_pairs)]
    hg, wg = ground_size
    ground = np.empty((n_pairs, 3, hg, wg), dtype=np.float32)
    aerial = np.empty((n_pairs, 3, aerial_size, aerial_size), dtype=np.float32)
    for k in range(n_pairs):
        spec = SceneSpec.random(int(scene_seeds[k]), heading=float(headings[k]))
        pair = render_pair(spec, ground_size, aerial_size, ids[k])
        ground[k], aerial[k] = pair.ground, pair.aerial
    n_train, n_val, _ = split_counts(n_pairs)
    splits = {"train": ids[:n_train], "val": ids[n_train:n_train + n_val],
              "test": ids[n_train + n_val:]}
    params = {"pairs": n_pairs, "seed": seed, "aligned": bool(orientation_aligned),
              "ground_size": tuple(ground_size), "aerial_size": int(aerial_size)}
    return CrossViewDataset(ground, aerial, ids, headings, splits, params)


@dataclass
class TripletBatch:
    ground: np.ndarray
    aerial: np.ndarray
    ids: list[str]

    def __len__(self):
        return len(self.ids)


def batch_iter(dataset: CrossViewDataset, batch_size: int, seed: int | None = None,
               aerial: np.ndarray | None = None) -> Iterator[TripletBatch]:
    """One epoch of batches; a final batch smaller than 2 is dropped.

    ``aerial`` overrides the dataset's aerial images (e.g. polar-warped copies).
    """
    if batch_size < 2:
        raise UsageError("batch_size must be >= 2 so every batch has negatives")
    n = len(dataset)
    order = np.arange(n) if seed is None else np.random.default_rng(seed).permutation(n)
    aerial = dataset.aerial if aerial is None else aerial
    for start in range(0, n, batch_size):
        rows = order[start:start + batch_size]
        if len(rows) < 2:
            break
        yield TripletBatch(dataset.ground[rows], aerial[rows], [dataset.ids[r] for r in rows])


# ---------------------------------------------------------------------------
# On-disk layout
# ---------------------------------------------------------------------------


def write_ppm(path, img: np.ndarray) -> None:
    """Binary P6 from a (3, H, W) float image in [0, 1]."""
    arr = np.round(np.clip(img, 0, 1) * 255).astype(np.uint8).transpose(1, 2, 0)
    h, w = arr.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(arr.tobytes())


def read_ppm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        raw = fh.read()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        end = pos
        while not raw[end:end + 1].isspace():
            end += 1
        tokens.append(raw[pos:end])
        pos = end
    if tokens[0] != b"P6" or int(tokens[3]) != 255:
        raise DataError(f"{path}: only 8-bit binary PPM (P6) is supported")
    w, h = int(tokens[1]), int(tokens[2])
    data = np.frombuffer(raw[pos + 1:pos + 1 + w * h * 3], dtype=np.uint8)
    return (data.reshape(h, w, 3).transpose(2, 0, 1) / 255.0).astype(np.float32)


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return "x".join(str(x) for x in v)
    return str(v)


def save_dataset(dataset: CrossViewDataset, root, ppm: bool = True) -> None:
    """Write ``manifest.txt``, ``pairs/*.ppm`` and the float tensor cache."""
    os.makedirs(os.path.join(root, "pairs"), exist_ok=True)
    lines = ["format = egotr-dataset/1"]
    lines += [f"{k} = {_fmt(v)}" for k, v in sorted(dataset.params.items())]
    lines.append("ids = " + " ".join(dataset.ids))
    lines.append("headings = " + " ".join(repr(float(h)) for h in dataset.headings))
    for name in ("train", "val", "test"):
        lines.append(f"split.{name} = " + " ".join(dataset.splits.get(name, [])))
    with open(os.path.join(root, "manifest.txt"), "w") as fh:
        fh.write("\n".join(lines) + "\n")
    np.save(os.path.join(root, "ground.npy"), dataset.ground)
    np.save(os.path.join(root, "aerial.npy"), dataset.aerial)
    if ppm:
        for k, pid in enumerate(dataset.ids):
            write_ppm(os.path.join(root, "pairs", f"{pid}_g.ppm"), dataset.ground[k])
            write_ppm(os.path.join(root, "pairs", f"{pid}_a.ppm"), dataset.aerial[k])


def read_manifest(root) -> dict[str, str]:
    path = os.path.join(root, "manifest.txt")
    if not os.path.exists(path):
        raise DataError(f"no dataset at {root} (missing manifest.txt)")
    out = {}
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, _, value = line.partition("=")
            out[key.strip()] = value.strip()
    return out


def load_dataset(root) -> CrossViewDataset:
    kv = read_manifest(root)
    ids = kv["ids"].split()
    headings = np.array([float(h) for h in kv.get("headings", "").split()] or np.zeros(len(ids)))
    splits = {k[len("split."):]: v.split() for k, v in kv.items() if k.startswith("split.")}
    hg, wg = (int(v) for v in kv["ground_size"].split("x"))
    params = {"pairs": int(kv["pairs"]), "seed": int(kv["seed"]),
              "aligned": kv["aligned"] == "true", "ground_size": (hg, wg),
              "aerial_size": int(kv["aerial_size"])}
    cache_g = os.path.join(root, "ground.npy")
    if os.path.exists(cache_g):
        ground = np.load(cache_g)
        aerial = np.load(os.path.join(root, "aerial.npy"))
    else:
        ground = np.stack([read_ppm(os.path.join(root, "pairs", f"{i}_g.ppm")) for i in ids])
        aerial = np.stack([read_ppm(os.path.join(root, "pairs", f"{i}_a.ppm")) for i in ids])
    return CrossViewDataset(ground, aerial, ids, headings, splits, params)
