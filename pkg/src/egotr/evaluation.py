"""Retrieval metrics and representation diagnostics."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from .exceptions import DataError, UsageError
from .model import EgoTrModel, descriptors


@dataclass
class DescriptorIndex:
    """Reference (aerial) descriptors with their pair ids, in insertion order."""

    matrix: np.ndarray
    ids: list[str]

    def __post_init__(self):
        self.matrix = np.asarray(self.matrix)
        if self.matrix.ndim != 2 or len(self.ids) != self.matrix.shape[0]:
            raise UsageError(f"index matrix {self.matrix.shape} does not match {len(self.ids)} ids")
        if len(set(self.ids)) != len(self.ids):
            raise DataError("index ids must be unique")
        if not np.isfinite(self.matrix).all():
            raise DataError("index contains non-finite descriptors")

    def __len__(self):
        return len(self.ids)

    def position(self, pair_id: str) -> int:
        try:
            return self._positions[pair_id]
        except AttributeError:
            self._positions = {pid: k for k, pid in enumerate(self.ids)}
            return self.position(pair_id)
        except KeyError:
            raise DataError(f"truth id {pair_id!r} is not in the index") from None


def build_index(model: EgoTrModel, aerial: np.ndarray, ids=None, batch_size: int = 64) -> DescriptorIndex:
    """Describe every reference image with the aerial branch.

    ``aerial`` must already be in the branch's input format (polar-warped
    when the model uses the warp).
    """
    if len(aerial) == 0:
        raise UsageError("cannot build an index from an empty reference set")
    ids = [str(k) for k in range(len(aerial))] if ids is None else list(ids)
    return DescriptorIndex(descriptors(model, aerial, "aerial", batch_size), ids)


def top_one_percent(m: int) -> int:
    return max(1, math.ceil(0.01 * m))


@dataclass
class RecallReport:
    r1: float
    r5: float
    r10: float
    r1p: float
    m: int
    n_queries: int
    k1p: int

    def as_dict(self) -> dict:
        return {"r@1": self.r1, "r@5": self.r5, "r@10": self.r10, "r@1%": self.r1p,
                "M": self.m, "queries": self.n_queries, "K1%": self.k1p}

    def recall(self, k: int) -> float:
        return {1: self.r1, 5: self.r5, 10: self.r10}[k]


def distance_matrix(queries: np.ndarray, refs: np.ndarray) -> np.ndarray:
    """Euclidean distances (Q, M), computed in float64 from explicit differences."""
    q = np.asarray(queries, dtype=np.float64)
    r = np.asarray(refs, dtype=np.float64)
    out = np.empty((len(q), len(r)))
    step = max(1, 2 ** 22 // max(1, r.size))
    for s in range(0, len(q), step):
        diff = q[s:s + step, None, :] - r[None, :, :]
        out[s:s + step] = np.sqrt(np.einsum("qmd,qmd->qm", diff, diff))
    return out


def truth_ranks(queries: np.ndarray, index: DescriptorIndex, truth_ids) -> np.ndarray:
    """0-based rank of each query's true reference.

    References are ordered by ascending distance, ties by ascending index
    position.
    """
    truth = np.array([index.position(t) for t in truth_ids])
    if len(truth) != len(queries):
        raise UsageError(f"{len(queries)} queries but {len(truth)} truth ids")
    dist = distance_matrix(queries, index.matrix)
    d_true = dist[np.arange(len(truth)), truth][:, None]
    cols = np.arange(dist.shape[1])[None, :]
    ahead = (dist < d_true) | ((dist == d_true) & (cols < truth[:, None]))
    return ahead.sum(axis=1)


def recall_at_k(queries: np.ndarray, index: DescriptorIndex, truth_ids,
                ks=(1, 5, 10)) -> RecallReport:
    """r@1, r@5, r@10 and r@1% (K = max(1, ceil(M/100))) as fractions."""
    queries = np.asarray(queries)
    ranks = truth_ranks(queries, index, truth_ids)
    m = len(index)
    k1p = top_one_percent(m)
    rec = {k: float(np.mean(ranks < k)) for k in set(ks) | {1, 5, 10}}
    return RecallReport(rec[1], rec[5], rec[10], float(np.mean(ranks < k1p)), m, len(queries), k1p)


def evaluate_retrieval(model: EgoTrModel, ground: np.ndarray, aerial: np.ndarray, ids,
                       batch_size: int = 64) -> RecallReport:
    """Ground images as queries against an index of their aerial counterparts."""
    index = build_index(model, aerial, ids, batch_size)
    q = descriptors(model, ground, "ground", batch_size)
    return recall_at_k(q, index, ids)


def write_report_csv(path, report: RecallReport, extra: dict | None = None) -> None:
    row = dict(extra or {})
    row.update({k: (f"{v:.6f}" if isinstance(v, float) else v) for k, v in report.as_dict().items()})
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(row), lineterminator="\n")
        writer.writeheader()
        writer.writerow(row)


# ---------------------------------------------------------------------------
# Diagnostics
# ---------------------------------------------------------------------------


def cross_layer_similarity(layer_states: np.ndarray) -> np.ndarray:
    """Mean cosine similarity of each layer's class token to the last layer's.

    ``layer_states`` is (L, n, D): the class-token state after every layer
    for n images. Returns L values; the last one is 1 by definition.
    """
    h = np.asarray(layer_states, dtype=np.float64)
    if h.ndim == 2:
        h = h[:, None, :]
    unit = h / np.maximum(np.linalg.norm(h, axis=-1, keepdims=True), 1e-300)
    sims = np.einsum("lnd,nd->ln", unit, unit[-1]).mean(axis=1)
    sims = np.clip(sims, -1.0, 1.0)
    sims[-1] = 1.0
    return sims


def pos_embed_gram(x_pos, grid: tuple[int, int] | None = None):
    """Dot products between patch positional embeddings (class row dropped).

    Returns the (N, N) Gram matrix, and with ``grid`` also the per-position
    maps reshaped to (N, Hf, Wf).
    """
    p = np.asarray(getattr(x_pos, "data", x_pos), dtype=np.float64)[1:]
    gram = p @ p.T
    gram = 0.5 * (gram + gram.T)
    if grid is None:
        return gram
    hf, wf = grid
    if hf * wf != len(p):
        raise UsageError(f"grid {grid} does not cover {len(p)} positions")
    return gram, gram.reshape(len(p), hf, wf)


def grid_adjacency(grid: tuple[int, int]) -> np.ndarray:
    """Boolean (N, N) mask of 4-neighbour pairs on a row-major grid."""
    hf, wf = grid
    n = hf * wf
    adj = np.zeros((n, n), dtype=bool)
    for r in range(hf):
        for c in range(wf):
            k = r * wf + c
            if c + 1 < wf:
                adj[k, k + 1] = adj[k + 1, k] = True
            if r + 1 < hf:
                adj[k, k + wf] = adj[k + wf, k] = True
    return adj


@dataclass
class NeighbourContrast:
    adjacent_mean: float
    other_mean: float
    pooled_se: float

    @property
    def gap_in_se(self) -> float:
        gap = self.adjacent_mean - self.other_mean
        if self.pooled_se == 0:
            # constant Gram matrix (e.g. all-zero embeddings)
            return 0.0 if gap == 0 else math.copysign(math.inf, gap)
        return gap / self.pooled_se


def neighbour_contrast(gram: np.ndarray, grid: tuple[int, int]) -> NeighbourContrast:
    """Compare dot products of grid-adjacent positions with all other off-diagonal pairs."""
    adj = grid_adjacency(grid)
    upper = np.triu(np.ones_like(adj), k=1)
    a = gram[adj & upper]
    o = gram[~adj & upper]
    se = math.sqrt(a.var(ddof=1) / len(a) + o.var(ddof=1) / len(o))
    return NeighbourContrast(float(a.mean()), float(o.mean()), se)


def write_matrix_csv(path, matrix: np.ndarray, header: list[str] | None = None,
                     comments: list[str] | None = None) -> None:
    with open(path, "w", newline="") as fh:
        for line in comments or []:
            fh.write(f"# {line}\n")
        writer = csv.writer(fh, lineterminator="\n")
        if header:
            writer.writerow(header)
        rows = np.atleast_2d(matrix) if isinstance(matrix, np.ndarray) else matrix
        for row in rows:
            writer.writerow([f"{v:.8g}" if isinstance(v, (float, np.floating)) else v for v in row])
