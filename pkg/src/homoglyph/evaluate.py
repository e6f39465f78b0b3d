"""Evaluation harness: ROC/AUC, recall and latency versus checks, edit-distance
histograms, PCA projections and cluster separation."""

from __future__ import annotations

import csv
import io
import json
import math
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from scipy.stats import rankdata

from . import index as kd
from .corpus import nearest_neighbor_distances

HIST_BUCKETS = 20
PCA_TOL = 1e-10
PCA_MAX_ITER = 10_000


class DegenerateLabels(ValueError):
    pass


class ConvergenceFailure(ArithmeticError):
    pass


# --- ROC --------------------------------------------------------------------


@dataclass(frozen=True)
class RocResult:
    fpr: np.ndarray
    tpr: np.ndarray
    thresholds: np.ndarray  # thresholds[i] produced point i+1; point 0 is "flag nothing"
    auc: float
    scorer: str = ""

    @property
    def points(self) -> list[tuple[float, float]]:
        return list(zip(self.fpr.tolist(), self.tpr.tolist()))

    def trapezoid(self) -> float:
        return float(np.sum(np.diff(self.fpr) * (self.tpr[1:] + self.tpr[:-1]) / 2))

    def threshold_at_fpr(self, max_fpr: float = 0.01) -> float:
        """Largest-TPR threshold whose false-positive rate stays within ``max_fpr``.

        A pair is flagged when its score is <= the returned threshold.
        """
        ok = np.flatnonzero(self.fpr[1:] <= max_fpr)
        if ok.size == 0:
            return float("-inf")
        best = ok[np.argmax(self.tpr[1:][ok])]
        return float(self.thresholds[best])

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["threshold", "fpr", "tpr"])
        w.writerow(["", 0.0, 0.0])
        for t, f, p in zip(self.thresholds, self.fpr[1:], self.tpr[1:]):
            w.writerow([repr(float(t)), repr(float(f)), repr(float(p))])
        return buf.getvalue()


def _check_labels(scores, labels):
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = np.asarray(labels).reshape(-1)
    if s.shape != y.shape:
        raise ValueError("scores and labels differ in length")
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("labels must be 0 or 1")
    n_pos = int(np.count_nonzero(y == 0))
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise DegenerateLabels("both labels must be present")
    return s, y, n_pos, n_neg


def auc_rank(scores, labels) -> float:
    """P(spoof score < benign score) + P(tie)/2 from average ranks (Mann-Whitney U)."""
    s, y, n_pos, n_neg = _check_labels(scores, labels)
    ranks = rankdata(s)  # ties get their average rank
    # U counts benign-over-spoof wins; ranks sum to half-integers so this is exact
    u = ranks[y == 1].sum() - n_neg * (n_neg + 1) / 2
    return float(u / (n_pos * n_neg))


def roc_auc(scores, labels, scorer: str = "") -> RocResult:
    """ROC for spoof detection: label 0 is positive and flagged when score <= threshold."""
    s, y, n_pos, n_neg = _check_labels(scores, labels)
    order = np.argsort(s, kind="stable")
    s_sorted = s[order]
    pos = (y[order] == 0).astype(np.int64)
    last = np.r_[np.flatnonzero(np.diff(s_sorted)), s.size - 1]
    tp = np.cumsum(pos)[last]
    fp = (last + 1) - tp
    fpr = np.r_[0.0, fp / n_neg]
    tpr = np.r_[0.0, tp / n_pos]
    return RocResult(fpr, tpr, s_sorted[last], auc_rank(s, y), scorer)


# --- recall vs checks -------------------------------------------------------


@dataclass(frozen=True)
class RecallTimingCurve:
    checks: list[int]
    recall: list[float]
    query_us: list[float]
    linear_us: float = float("nan")

    def rows(self):
        return list(zip(self.checks, self.recall, self.query_us))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["checks", "recall_at_1", "mean_query_us"])
        for c, r, t in self.rows():
            w.writerow([c, repr(r), f"{t:.3f}"])
        return buf.getvalue()


def _median_time(fn, repeats: int) -> float:
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return float(np.median(times))


def oracle_top1(forest: kd.KDForest, queries) -> np.ndarray:
    return np.array([kd.linear_scan(forest, q, 1).ids[0] for q in queries], dtype=np.int64)


def time_linear_scan(forest: kd.KDForest, queries, repeats: int = 3) -> float:
    """Median-of-runs mean microseconds per exact query."""
    queries = np.asarray(queries, dtype=np.float64)

    def run():
        for q in queries:
            kd.linear_scan(forest, q, 1)

    kd.linear_scan(forest, queries[0], 1)  # warm
    return 1e6 * _median_time(run, repeats) / len(queries)


def recall_vs_checks(
    forest: kd.KDForest,
    queries,
    oracle: Sequence[int],
    checks_list: Sequence[int],
    repeats: int = 3,
    time_queries: int | None = None,
) -> RecallTimingCurve:
    """Recall@1 (id equality with the oracle) and mean query latency per budget.

    Latency is the median over ``repeats`` passes of the mean per-query time,
    measured on the first ``time_queries`` queries (all by default).
    """
    queries = np.asarray(queries, dtype=np.float64)
    oracle = np.asarray(oracle, dtype=np.int64)
    if len(oracle) != len(queries):
        raise ValueError("one oracle answer per query is required")
    tq = queries if time_queries is None else queries[:time_queries]
    kd.query(forest, queries[0], 1, 1)  # warm the compiled search
    recall, lat = [], []
    for c in checks_list:
        hits = sum(int(kd.query(forest, q, 1, c).ids[0] == o) for q, o in zip(queries, oracle))
        recall.append(hits / len(queries))

        def run(c=c):
            for q in tq:
                kd.query(forest, q, 1, c)

        lat.append(1e6 * _median_time(run, repeats) / len(tq))
    return RecallTimingCurve([int(c) for c in checks_list], recall, lat)


def synthetic_embeddings(
    n: int,
    n_queries: int = 1000,
    dim: int = 32,
    latent: int = 10,
    clusters: int = 500,
    spread: float = 0.5,
    noise: float = 0.02,
    seed: int = 0,
) -> tuple[np.ndarray, np.ndarray]:
    """Points and held-out queries shaped like name embeddings.

    Draws come from a Gaussian mixture on a ``latent``-dimensional subspace
    (names form families of close variants) embedded by a random linear map,
    plus small full-rank noise. Queries are fresh draws, not perturbed points.
    """
    rng = np.random.default_rng(seed)
    centers = rng.normal(size=(clusters, latent))
    basis = rng.normal(size=(latent, dim)) / math.sqrt(latent)

    def draw(m):
        z = centers[rng.integers(clusters, size=m)] + spread * rng.normal(size=(m, latent))
        return z @ basis + noise * rng.normal(size=(m, dim))

    return draw(n), draw(n_queries)


# --- edit-distance histogram ------------------------------------------------


def percent_bucket(fraction: float, buckets: int = HIST_BUCKETS) -> int:
    """Right-closed bucket: (0, 5%] -> 0, (5%, 10%] -> 1, ...; 0 falls in bucket 0."""
    return max(int(math.ceil(fraction * buckets - 1e-12)) - 1, 0)


def percent_edit_distance_histogram(names: Sequence[str], buckets: int = HIST_BUCKETS) -> np.ndarray:
    """Counts of nearest-neighbour Levenshtein distance over the longer length, in 5% buckets."""
    if len(names) < 2:
        raise ValueError("need at least two names")
    d, longer = nearest_neighbor_distances(names)
    hist = np.zeros(buckets, dtype=np.int64)
    for di, li in zip(d, longer):
        hist[min(percent_bucket(di / li, buckets), buckets - 1)] += 1
    return hist


def histogram_csv(hist: np.ndarray) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["bucket_low_pct", "bucket_high_pct", "count"])
    step = 100 // len(hist)
    for i, c in enumerate(hist):
        w.writerow([i * step, (i + 1) * step, int(c)])
    return buf.getvalue()


# --- PCA --------------------------------------------------------------------


def _fix_sign(v: np.ndarray) -> np.ndarray:
    nz = np.flatnonzero(np.abs(v) > 1e-12)
    if nz.size and v[nz[0]] < 0:
        return -v
    return v


def top_eigenvectors(cov: np.ndarray, k: int, tol: float = PCA_TOL, max_iter: int = PCA_MAX_ITER, seed: int = 0):
    """Leading ``k`` eigenpairs of a symmetric PSD matrix by power iteration with deflation."""
    a = np.array(cov, dtype=np.float64)
    rng = np.random.default_rng(seed)
    vecs, vals = [], []
    for _ in range(k):
        v = rng.normal(size=a.shape[0])
        v /= np.linalg.norm(v)
        for it in range(max_iter):
            w = a @ v
            norm = np.linalg.norm(w)
            if norm == 0.0:
                # nothing left in the deflated matrix; any orthogonal direction will do
                break
            w /= norm
            if w @ v < 0:
                w = -w
            if np.linalg.norm(w - v) < tol:
                v = w
                break
            v = w
        else:
            raise ConvergenceFailure(f"power iteration did not converge in {max_iter} steps")
        lam = float(v @ a @ v)
        v = _fix_sign(v)
        vecs.append(v)
        vals.append(lam)
        a = a - lam * np.outer(v, v)
    return np.array(vals), np.array(vecs)


def pca_project(features, dims: int = 2, tol: float = PCA_TOL, max_iter: int = PCA_MAX_ITER):
    """Mean-centred projection onto the top ``dims`` principal axes.

    Returns (coords (n, dims), components (dims, d), mean (d,)).
    """
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 3:
        raise ValueError("need at least three feature vectors")
    mean = x.mean(axis=0)
    xc = x - mean
    cov = xc.T @ xc / (x.shape[0] - 1)
    _, comps = top_eigenvectors(cov, dims, tol, max_iter)
    return xc @ comps.T, comps, mean


def pca_csv(labels: Sequence[str], groups: Sequence[str], coords: np.ndarray) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["name", "group", "pc1", "pc2"])
    for s, g, (a, b) in zip(labels, groups, coords):
        w.writerow([s, g, repr(float(a)), repr(float(b))])
    return buf.getvalue()


# --- clusters ---------------------------------------------------------------


def cluster_separation(groups: Mapping[str, np.ndarray] | Sequence[np.ndarray]) -> tuple[float, float]:
    """Mean pairwise distance within groups and between members of different groups."""
    arrays = list(groups.values()) if isinstance(groups, Mapping) else list(groups)
    arrays = [np.asarray(g, dtype=np.float64) for g in arrays]
    if len(arrays) < 2 or any(len(g) < 2 for g in arrays):
        raise ValueError("need at least two groups with two members each")
    intra, inter = [], []
    for i, g in enumerate(arrays):
        d = np.linalg.norm(g[:, None, :] - g[None, :, :], axis=-1)
        intra.extend(d[np.triu_indices(len(g), 1)])
        for h in arrays[i + 1 :]:
            inter.extend(np.linalg.norm(g[:, None, :] - h[None, :, :], axis=-1).ravel())
    return float(np.mean(intra)), float(np.mean(inter))


# --- output -----------------------------------------------------------------


def auc_summary(results: Mapping[str, RocResult], baseline: str = "edit") -> dict:
    """AUC per scorer plus absolute and relative gains over ``baseline`` when present."""
    out = {"auc": {k: r.auc for k, r in results.items()}}
    if baseline in results:
        b = results[baseline].auc
        out["gain_over_" + baseline] = {
            k: {"absolute": r.auc - b, "relative": (r.auc - b) / b if b else None}
            for k, r in results.items()
            if k != baseline
        }
    return out


def write_text(path: str | Path, text: str) -> None:
    Path(path).write_text(text, encoding="utf-8")


def write_json(path: str | Path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")
