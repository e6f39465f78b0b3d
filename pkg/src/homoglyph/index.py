"""Randomized KD-Tree forest with a best-bin-first, checks-budgeted search.

Every tree is grown to purity (one point per leaf). A tree over ``n`` points
therefore has exactly ``n - 1`` internal nodes, so the forest is stored as
dense ``(num_trees, n - 1)`` arrays. A child reference ``c >= 0`` names an
internal node; ``c < 0`` is a leaf holding point ``-c - 1``.
"""

from __future__ import annotations

import hashlib
import io
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numba
import numpy as np

TOP_VARIANCE_DIMS = 5
DEFAULT_TREES = 10
DEFAULT_CHECKS = 128

INDEX_MAGIC = b"HGKDFRST"
INDEX_VERSION = 1


class EmptyIndex(ValueError):
    pass


class IndexFormatError(ValueError):
    pass


@dataclass(frozen=True)
class QueryResult:
    ids: np.ndarray
    labels: list[str]
    distances: np.ndarray
    checks_used: int

    def __len__(self):
        return len(self.ids)

    @property
    def items(self) -> list[tuple[int, str, float]]:
        return [(int(i), s, float(d)) for i, s, d in zip(self.ids, self.labels, self.distances)]


@dataclass
class KDForest:
    points: np.ndarray  # (n, dim) float64
    labels: list[str]
    split_dim: np.ndarray  # (T, n-1) int32
    split_val: np.ndarray  # (T, n-1) float64
    left: np.ndarray  # (T, n-1) int64
    right: np.ndarray  # (T, n-1) int64
    roots: np.ndarray  # (T,) int64
    seed: int
    model_digest: str = ""

    @property
    def num_trees(self) -> int:
        return int(self.roots.shape[0])

    @property
    def size(self) -> int:
        return int(self.points.shape[0])

    @property
    def num_leaves(self) -> int:
        """Leaves across the whole forest; a query with this many checks is exhaustive."""
        return self.num_trees * self.size


# --- build ------------------------------------------------------------------


@numba.njit(cache=True)
def _grow(points, draws, r, split_dim, split_val, left, right):
    """Grow one tree depth-first; ``draws[k]`` picks the split dimension of node k."""
    n, dim = points.shape
    perm = np.arange(n)
    # explicit stack of (start, end, parent, is_left) segments of perm
    st_lo = np.empty(n, dtype=np.int64)
    st_hi = np.empty(n, dtype=np.int64)
    st_par = np.empty(n, dtype=np.int64)
    st_left = np.empty(n, dtype=np.bool_)
    top = 0
    st_lo[0], st_hi[0], st_par[0], st_left[0] = 0, n, -1, False
    top = 1
    next_node = 0
    root = 0
    mean = np.empty(dim)
    var = np.empty(dim)
    while top > 0:
        top -= 1
        lo, hi, parent, is_left = st_lo[top], st_hi[top], st_par[top], st_left[top]
        m = hi - lo
        if m == 1:
            ref = -perm[lo] - 1
        else:
            node = next_node
            next_node += 1
            ref = node
            seg = perm[lo:hi]
            for j in range(dim):
                mean[j] = 0.0
                var[j] = 0.0
            for i in range(m):
                for j in range(dim):
                    mean[j] += points[seg[i], j]
            for j in range(dim):
                mean[j] /= m
            for i in range(m):
                for j in range(dim):
                    dv = points[seg[i], j] - mean[j]
                    var[j] += dv * dv
            order = np.argsort(-var, kind="mergesort")
            d = order[draws[node]]
            # ids ascending, then a stable sort by value: ties stay ordered by id
            seg.sort()
            vals = np.empty(m)
            for i in range(m):
                vals[i] = points[seg[i], d]
            o = np.argsort(vals, kind="mergesort")
            sorted_ids = seg[o]
            perm[lo:hi] = sorted_ids
            half = m // 2
            split_dim[node] = d
            split_val[node] = 0.5 * (vals[o[half - 1]] + vals[o[half]])
            # right pushed first so the left subtree gets the lower node ids
            st_lo[top], st_hi[top], st_par[top], st_left[top] = lo + half, hi, node, False
            top += 1
            st_lo[top], st_hi[top], st_par[top], st_left[top] = lo, lo + half, node, True
            top += 1
        if parent < 0:
            root = ref
        elif is_left:
            left[parent] = ref
        else:
            right[parent] = ref
    return root


def _build_tree(points: np.ndarray, rng: np.random.Generator):
    n, dim = points.shape
    m = max(n - 1, 0)
    split_dim = np.zeros(m, dtype=np.int32)
    split_val = np.zeros(m, dtype=np.float64)
    left = np.zeros(m, dtype=np.int64)
    right = np.zeros(m, dtype=np.int64)
    r = min(TOP_VARIANCE_DIMS, dim)
    draws = rng.integers(r, size=m)
    root = _grow(points, draws, r, split_dim, split_val, left, right)
    return split_dim, split_val, left, right, int(root)


def build(points, labels: Sequence[str] | None = None, num_trees: int = DEFAULT_TREES, seed: int = 0) -> KDForest:
    """Grow ``num_trees`` randomized KD-Trees over ``points`` (n, dim).

    Each split picks a dimension uniformly among the five highest-variance
    dimensions of the node's points and cuts at the median (ties ordered by
    point id). Trees draw from independent child seeds of ``seed``.
    """
    points = np.ascontiguousarray(points, dtype=np.float64)
    if points.ndim != 2 or points.shape[0] == 0:
        raise EmptyIndex("cannot index zero points")
    if num_trees < 1:
        raise ValueError("num_trees must be >= 1")
    n = points.shape[0]
    labels = list(labels) if labels is not None else [str(i) for i in range(n)]
    if len(labels) != n:
        raise ValueError("one label per point is required")
    seqs = np.random.SeedSequence(seed).spawn(num_trees)
    trees = [_build_tree(points, np.random.default_rng(s)) for s in seqs]
    return KDForest(
        points=points,
        labels=labels,
        split_dim=np.stack([t[0] for t in trees]),
        split_val=np.stack([t[1] for t in trees]),
        left=np.stack([t[2] for t in trees]),
        right=np.stack([t[3] for t in trees]),
        roots=np.array([t[4] for t in trees], dtype=np.int64),
        seed=seed,
    )


# --- search -----------------------------------------------------------------


@numba.njit(cache=True)
def _row_distances(points, ids, q):
    out = np.empty(ids.shape[0])
    dim = points.shape[1]
    for k in range(ids.shape[0]):
        s = 0.0
        p = ids[k]
        for j in range(dim):
            diff = points[p, j] - q[j]
            s += diff * diff
        out[k] = np.sqrt(s)
    return out


@numba.njit(cache=True)
def _heap_push(pri, tree, node, size, d, t, v):
    if size == pri.shape[0]:
        cap = 2 * size
        p2 = np.empty(cap)
        t2 = np.empty(cap, dtype=np.int64)
        v2 = np.empty(cap, dtype=np.int64)
        p2[:size] = pri[:size]
        t2[:size] = tree[:size]
        v2[:size] = node[:size]
        pri, tree, node = p2, t2, v2
    i = size
    pri[i] = d
    tree[i] = t
    node[i] = v
    while i > 0:
        parent = (i - 1) // 2
        if pri[parent] <= pri[i]:
            break
        pri[i], pri[parent] = pri[parent], pri[i]
        tree[i], tree[parent] = tree[parent], tree[i]
        node[i], node[parent] = node[parent], node[i]
        i = parent
    return pri, tree, node, size + 1


@numba.njit(cache=True)
def _heap_pop(pri, tree, node, size):
    d, t, v = pri[0], tree[0], node[0]
    size -= 1
    pri[0], tree[0], node[0] = pri[size], tree[size], node[size]
    i = 0
    while True:
        a = 2 * i + 1
        b = a + 1
        m = i
        if a < size and pri[a] < pri[m]:
            m = a
        if b < size and pri[b] < pri[m]:
            m = b
        if m == i:
            break
        pri[i], pri[m] = pri[m], pri[i]
        tree[i], tree[m] = tree[m], tree[i]
        node[i], node[m] = node[m], node[i]
        i = m
    return d, t, v, size


@numba.njit(cache=True)
def _descend(split_dim, split_val, left, right, t, cur, mind, q, pri, tree, node, size):
    # walk to a leaf, queueing the far side of every split on the way
    while cur >= 0:
        diff = q[split_dim[t, cur]] - split_val[t, cur]
        if diff < 0:
            near, far = left[t, cur], right[t, cur]
        else:
            near, far = right[t, cur], left[t, cur]
        pri, tree, node, size = _heap_push(pri, tree, node, size, mind + diff * diff, t, far)
        cur = near
    return -cur - 1, pri, tree, node, size


@numba.njit(cache=True)
def _bbf(split_dim, split_val, left, right, roots, n, q, checks):
    """Best-bin-first over all trees with one shared queue.

    Every tree is descended once, then the closest queued bin is expanded
    until ``checks`` leaves have been visited. The sequence of leaf visits
    does not depend on ``checks``; the budget only truncates it. Returns the
    distinct point ids reached, in visit order, and the leaves visited.
    """
    seen = np.zeros(n, dtype=np.bool_)
    found = np.empty(max(min(n, checks), 1), dtype=np.int64)
    nfound = 0
    used = 0
    pri = np.empty(64)
    tree = np.empty(64, dtype=np.int64)
    node = np.empty(64, dtype=np.int64)
    size = 0
    t = 0
    while used < checks:
        if t < roots.shape[0]:
            pid, pri, tree, node, size = _descend(
                split_dim, split_val, left, right, t, roots[t], 0.0, q, pri, tree, node, size
            )
            t += 1
        elif size > 0:
            mind, tt, cur, size = _heap_pop(pri, tree, node, size)
            pid, pri, tree, node, size = _descend(
                split_dim, split_val, left, right, tt, cur, mind, q, pri, tree, node, size
            )
        else:
            break
        used += 1
        if not seen[pid]:
            seen[pid] = True
            found[nfound] = pid
            nfound += 1
    return found[:nfound], used


def _as_query(forest: KDForest, q) -> np.ndarray:
    q = np.ascontiguousarray(q, dtype=np.float64).reshape(-1)
    if q.shape[0] != forest.points.shape[1]:
        raise ValueError(f"query has dimension {q.shape[0]}, index has {forest.points.shape[1]}")
    return q


def _result(forest: KDForest, ids: np.ndarray, dists: np.ndarray, used: int, k: int | None) -> QueryResult:
    order = np.lexsort((ids, dists))
    if k is not None:
        order = order[:k]
    ids, dists = ids[order], dists[order]
    return QueryResult(ids, [forest.labels[i] for i in ids], dists, used)


def candidates(forest: KDForest, q, checks: int = DEFAULT_CHECKS) -> tuple[np.ndarray, int]:
    """Distinct point ids reached within the ``checks`` budget, in visit order."""
    if checks < 1:
        raise ValueError("checks must be >= 1")
    q = _as_query(forest, q)
    f = forest
    return _bbf(f.split_dim, f.split_val, f.left, f.right, f.roots, f.size, q, int(checks))


def query(forest: KDForest, q, k: int = 1, checks: int = DEFAULT_CHECKS) -> QueryResult:
    """Approximate k nearest neighbours by Euclidean distance, ordered by (distance, id)."""
    if k < 1:
        raise ValueError("k must be >= 1")
    ids, used = candidates(forest, q, checks)
    q = _as_query(forest, q)
    return _result(forest, ids, _row_distances(forest.points, ids, q), used, k)


def query_radius(forest: KDForest, q, radius: float, checks: int = DEFAULT_CHECKS) -> QueryResult:
    """Every reached point within ``radius`` (inclusive), ordered by (distance, id)."""
    ids, used = candidates(forest, q, checks)
    q = _as_query(forest, q)
    d = _row_distances(forest.points, ids, q)
    keep = d <= radius
    return _result(forest, ids[keep], d[keep], used, None)


def linear_scan(forest: KDForest, q, k: int = 1) -> QueryResult:
    """Exact k nearest neighbours by scoring every indexed point."""
    if k < 1:
        raise ValueError("k must be >= 1")
    q = _as_query(forest, q)
    ids = np.arange(forest.size, dtype=np.int64)
    d = _row_distances(forest.points, ids, q)
    if k < forest.size:
        # cheap preselect; keeps everything tied with the k-th distance
        kth = np.partition(d, k - 1)[k - 1]
        sel = np.flatnonzero(d <= kth)
        ids, d = ids[sel], d[sel]
    return _result(forest, ids, d, forest.size, k)


# --- persistence ------------------------------------------------------------

_HEADER = struct.Struct("<8sIIIIQ32s")


def index_bytes(forest: KDForest) -> bytes:
    """Little-endian binary image of the forest: header, points, trees, labels."""
    f = forest
    digest = bytes.fromhex(f.model_digest) if f.model_digest else bytes(32)
    buf = io.BytesIO()
    buf.write(_HEADER.pack(INDEX_MAGIC, INDEX_VERSION, f.size, f.points.shape[1], f.num_trees, f.seed, digest))
    buf.write(f.points.astype("<f8").tobytes())
    buf.write(f.roots.astype("<i8").tobytes())
    buf.write(f.split_dim.astype("<i4").tobytes())
    buf.write(f.split_val.astype("<f8").tobytes())
    buf.write(f.left.astype("<i8").tobytes())
    buf.write(f.right.astype("<i8").tobytes())
    for s in f.labels:
        b = s.encode("utf-8")
        buf.write(struct.pack("<I", len(b)))
        buf.write(b)
    return buf.getvalue()


def save_index(forest: KDForest, path: str | Path) -> str:
    data = index_bytes(forest)
    Path(path).write_bytes(data)
    return hashlib.sha256(data).hexdigest()


def load_index(path: str | Path) -> KDForest:
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise IndexFormatError("file too short for an index header")
    magic, version, n, dim, trees, seed, digest = _HEADER.unpack_from(data, 0)
    if magic != INDEX_MAGIC:
        raise IndexFormatError("not an index file")
    if version != INDEX_VERSION:
        raise IndexFormatError(f"unsupported index version {version}")
    off = _HEADER.size
    m = max(n - 1, 0)

    def take(dtype, count, shape):
        nonlocal off
        size = np.dtype(dtype).itemsize * count
        if off + size > len(data):
            raise IndexFormatError("truncated index file")
        arr = np.frombuffer(data, dtype=dtype, count=count, offset=off).reshape(shape)
        off += size
        return arr.astype(np.dtype(dtype).newbyteorder("="))

    points = take("<f8", n * dim, (n, dim))
    roots = take("<i8", trees, (trees,))
    split_dim = take("<i4", trees * m, (trees, m))
    split_val = take("<f8", trees * m, (trees, m))
    left = take("<i8", trees * m, (trees, m))
    right = take("<i8", trees * m, (trees, m))
    labels = []
    for _ in range(n):
        if off + 4 > len(data):
            raise IndexFormatError("truncated label table")
        (ln,) = struct.unpack_from("<I", data, off)
        off += 4
        labels.append(data[off : off + ln].decode("utf-8"))
        off += ln
    if off != len(data):
        raise IndexFormatError("trailing bytes after label table")
    return KDForest(
        points=points,
        labels=labels,
        split_dim=split_dim,
        split_val=split_val,
        left=left,
        right=right,
        roots=roots,
        seed=seed,
        model_digest=digest.hex() if any(digest) else "",
    )
