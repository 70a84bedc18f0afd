"""D2D link model: topology, mixing weights, top-k sparse updates, framing,
frame drops and per-round time / traffic accounting.

A sparse update is serialised as (uint32 flat index, float32 value) pairs,
8 bytes per entry. 1 kB is 1000 B. Each layer is framed separately and a
single lost frame loses the whole layer.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components

BYTES_PER_ENTRY = 8
NOMINAL_ROUND_MS = 30.0
NOMINAL_EGO_ROUND_MS = 10.0
DEFAULT_COMPUTE_MS = 10.0

MODEL = "model"
GRADIENT = "gradient"

NOMINAL = "nominal"
DERIVED = "derived"


@dataclass
class Graph:
    n: int
    adjacency: np.ndarray

    def __post_init__(self):
        adj = np.asarray(self.adjacency, dtype=bool)
        if adj.shape != (self.n, self.n):
            raise ValueError(f"adjacency must be {self.n}x{self.n}")
        if adj.diagonal().any():
            raise ValueError("self-loops are not allowed")
        if not (adj == adj.T).all():
            raise ValueError("adjacency must be symmetric")
        self.adjacency = adj

    @property
    def degrees(self) -> np.ndarray:
        return self.adjacency.sum(axis=1)

    @property
    def n_edges(self) -> int:
        return int(self.adjacency.sum()) // 2

    def neighbors(self, i: int) -> list[int]:
        return np.flatnonzero(self.adjacency[i]).tolist()

    def is_connected(self) -> bool:
        n_comp, _ = connected_components(csr_matrix(self.adjacency), directed=False)
        return n_comp == 1


def ring_topology(n: int, seed: int | None = None) -> Graph:
    """Single cycle over ``n`` nodes, every node with two neighbours.

    With ``seed`` the nodes are placed around the ring in a random order;
    otherwise the cycle is 0-1-...-(n-1)-0.
    """
    if n < 3:
        raise ValueError("a ring needs at least 3 nodes")
    order = np.arange(n) if seed is None else np.random.default_rng(seed).permutation(n)
    adj = np.zeros((n, n), dtype=bool)
    for a, b in zip(order, np.roll(order, -1)):
        adj[a, b] = adj[b, a] = True
    return Graph(n, adj)


def metropolis_mixing(g: Graph) -> np.ndarray:
    """Metropolis-Hastings weights: 1/(1 + max(deg_i, deg_j)) on each edge."""
    if not g.is_connected():
        raise ValueError("mixing weights need a connected graph")
    deg = g.degrees
    w = np.zeros((g.n, g.n))
    i, j = np.nonzero(g.adjacency)
    w[i, j] = 1.0 / (1.0 + np.maximum(deg[i], deg[j]))
    w[np.diag_indices(g.n)] = 1.0 - w.sum(axis=1)
    return w


@dataclass
class ChannelModel:
    tti_ms: float = 3.0
    payload_bytes: int = 1000
    bler: float = 1e-9

    def __post_init__(self):
        if not self.tti_ms > 0:
            raise ValueError("tti_ms must be positive")
        if not self.payload_bytes > 0:
            raise ValueError("payload_bytes must be positive")
        if not 0.0 <= self.bler <= 1.0:
            raise ValueError("bler must be within [0, 1]")


@dataclass
class SparseUpdate:
    """Per-layer (index, value) entries of a transmitted model or gradient.

    ``lost`` flags layers that were dropped in transit; their entry lists are
    empty. ``dropped_frames`` is filled in by :func:`transmit`.
    """

    indices: list[np.ndarray]
    values: list[np.ndarray]
    layer_sizes: tuple[int, ...]
    kind: str = MODEL
    lost: tuple[bool, ...] = ()
    dropped_frames: int = 0

    def __post_init__(self):
        if not self.lost:
            self.lost = (False,) * len(self.layer_sizes)
        for idx, size in zip(self.indices, self.layer_sizes):
            if idx.size and (idx[-1] >= size or (np.diff(idx.astype(np.int64)) <= 0).any()):
                raise ValueError("layer indices must be strictly increasing and in range")

    @property
    def n_entries(self) -> int:
        return sum(i.size for i in self.indices)

    @property
    def byte_size(self) -> int:
        return BYTES_PER_ENTRY * self.n_entries

    def layer_bytes(self) -> list[int]:
        return [BYTES_PER_ENTRY * i.size for i in self.indices]


DeliveredUpdate = SparseUpdate


def _as_layers(values) -> list[np.ndarray]:
    layers = getattr(values, "layers", values)
    return [np.asarray(a) for a in layers]


def _topk_indices(mag: np.ndarray, k: int) -> np.ndarray:
    """Sorted indices of the ``k`` largest ``mag``; ties go to smaller indices."""
    if k == mag.size:
        return np.arange(mag.size)
    thr = np.partition(mag, mag.size - k)[mag.size - k]
    above = np.flatnonzero(mag > thr)
    at = np.flatnonzero(mag == thr)[: k - above.size]
    return np.sort(np.concatenate([above, at]))


def sparsify_topk(values, k: int, kind: str = MODEL) -> SparseUpdate:
    """Keep the ``k`` largest-magnitude entries across all layers.

    ``values`` is a :class:`~d2dfl.nn.Model` (or any sequence of arrays).
    Ties are broken in favour of the smaller global flat index.
    """
    layers = _as_layers(values)
    sizes = tuple(a.size for a in layers)
    total = sum(sizes)
    if not 1 <= k <= total:
        raise ValueError(f"k={k} outside 1..{total}")
    flat = np.concatenate([a.ravel() for a in layers])
    chosen = _topk_indices(np.abs(flat), k)
    offsets = np.cumsum((0,) + sizes)
    bounds = np.searchsorted(chosen, offsets)
    idx, vals = [], []
    for li in range(len(layers)):
        sel = chosen[bounds[li]:bounds[li + 1]]
        idx.append((sel - offsets[li]).astype(np.uint32))
        vals.append(flat[sel].astype(np.float32))
    return SparseUpdate(idx, vals, sizes, kind)


def densify(u: SparseUpdate, shapes: Sequence[tuple[int, ...]]) -> list[np.ndarray]:
    """Dense float64 arrays holding the delivered entries, zeros elsewhere."""
    out = []
    for idx, vals, shape in zip(u.indices, u.values, shapes):
        a = np.zeros(int(np.prod(shape)))
        a[idx] = vals
        out.append(a.reshape(shape))
    return out


def frame_count(u: SparseUpdate, c: ChannelModel) -> list[int]:
    return [math.ceil(b / c.payload_bytes) for b in u.layer_bytes()]


def transmit(u: SparseUpdate, c: ChannelModel, rng: np.random.Generator) -> DeliveredUpdate:
    """Send ``u`` frame by frame; any dropped frame loses its whole layer."""
    frames = frame_count(u, c)
    drops = rng.random(sum(frames)) < c.bler
    idx, vals, lost = [], [], []
    start = 0
    for li, nf in enumerate(frames):
        layer_lost = bool(drops[start:start + nf].any()) or u.lost[li]
        start += nf
        lost.append(layer_lost)
        if layer_lost:
            idx.append(np.empty(0, dtype=np.uint32))
            vals.append(np.empty(0, dtype=np.float32))
        else:
            idx.append(u.indices[li])
            vals.append(u.values[li])
    return replace(
        u,
        indices=idx,
        values=vals,
        lost=tuple(lost),
        dropped_frames=int(drops.sum()),
    )


def round_accounting(
    messages: Sequence[SparseUpdate],
    mode: str = NOMINAL,
    channel: ChannelModel | None = None,
    compute_ms: float = DEFAULT_COMPUTE_MS,
    cooperative: bool | None = None,
) -> tuple[float, float]:
    """Duration (ms) and traffic (kB) of one round carrying ``messages``.

    ``messages`` are the updates as sent; traffic counts every byte put on
    the air, whether or not it arrived.
    In nominal mode a cooperative round lasts 30 ms and a local-only round
    10 ms. In derived mode the duration is the frame airtime plus
    ``compute_ms``.
    """
    if cooperative is None:
        cooperative = len(messages) > 0
    kb = sum(m.byte_size for m in messages) / 1000.0
    if mode == NOMINAL:
        return (NOMINAL_ROUND_MS if cooperative else NOMINAL_EGO_ROUND_MS), kb
    if mode == DERIVED:
        c = channel or ChannelModel()
        n_frames = sum(sum(frame_count(m, c)) for m in messages)
        return n_frames * c.tti_ms + compute_ms, kb
    raise ValueError(f"unknown timing mode {mode!r}")
