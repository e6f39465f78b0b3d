"""Siamese convolutional embedder with hand-derived gradients.

Architecture (fixed)::

    12x150x1 -> conv3x3(8, same) -> leaky -> maxpool2 -> 6x75x8
             -> conv3x3(16, same) -> leaky -> maxpool2 -> 3x37x16
             -> flatten(1776) -> dense(32)

Activations are kept channels-last (N, H, W, C); the flatten step reorders
to (C, H, W) so the dense weight rows follow the documented parameter order.
"""

from __future__ import annotations

import hashlib
import io
import logging
import struct
import time
from dataclasses import dataclass, field, fields
from pathlib import Path

import numba
import numpy as np

from .render import IMAGE_HEIGHT, IMAGE_WIDTH, GlyphAtlas, render_string

log = logging.getLogger(__name__)

C1 = 8
C2 = 16
KERNEL = 3
POOL = 2
EMBED_DIM = 32
H1, W1 = IMAGE_HEIGHT // POOL, IMAGE_WIDTH // POOL  # 6, 75
H2, W2 = H1 // POOL, W1 // POOL  # 3, 37
FLAT = C2 * H2 * W2  # 1776

EPS = 1e-8
DIST_FLOOR = 1e-12
# dissimilar-pair loss never exceeds margin**2, so a batch loss this far above
# it means the embeddings have blown up even if the floats are still finite
DIVERGED_LOSS = 1e12

MODEL_MAGIC = b"HOMOGLYPHNET\0\0\0\0"
MODEL_VERSION = 1
ARCH = (IMAGE_HEIGHT, IMAGE_WIDTH, C1, C2, KERNEL, POOL, EMBED_DIM)


class NonFiniteUpdate(FloatingPointError):
    """An optimizer step produced NaN or Inf parameters."""


class ModelFormatError(ValueError):
    pass


@dataclass
class WeightSet:
    conv1_w: np.ndarray  # (8, 1, 3, 3)
    conv1_b: np.ndarray  # (8,)
    conv2_w: np.ndarray  # (16, 8, 3, 3)
    conv2_b: np.ndarray  # (16,)
    dense_w: np.ndarray  # (1776, 32), rows in (channel, row, col) order
    dense_b: np.ndarray  # (32,)

    SHAPES = {
        "conv1_w": (C1, 1, KERNEL, KERNEL),
        "conv1_b": (C1,),
        "conv2_w": (C2, C1, KERNEL, KERNEL),
        "conv2_b": (C2,),
        "dense_w": (FLAT, EMBED_DIM),
        "dense_b": (EMBED_DIM,),
    }

    def arrays(self) -> list[np.ndarray]:
        return [getattr(self, f.name) for f in fields(self)]

    def names(self) -> list[str]:
        return [f.name for f in fields(self)]

    @classmethod
    def zeros(cls) -> "WeightSet":
        return cls(**{k: np.zeros(s) for k, s in cls.SHAPES.items()})

    @classmethod
    def init(cls, seed: int) -> "WeightSet":
        """He-style uniform fan-in initialization; biases start at zero."""
        rng = np.random.default_rng(seed)
        w = cls.zeros()
        for name in ("conv1_w", "conv2_w", "dense_w"):
            shape = cls.SHAPES[name]
            fan_in = int(np.prod(shape[1:])) if name != "dense_w" else shape[0]
            bound = np.sqrt(6.0 / fan_in)
            setattr(w, name, rng.uniform(-bound, bound, size=shape))
        return w

    def copy(self) -> "WeightSet":
        return WeightSet(*(a.copy() for a in self.arrays()))

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays()])

    @classmethod
    def from_flat(cls, vec: np.ndarray) -> "WeightSet":
        vec = np.asarray(vec, dtype=np.float64)
        if vec.size != num_params():
            raise ValueError(f"expected {num_params()} values, got {vec.size}")
        out, i = {}, 0
        for name, shape in cls.SHAPES.items():
            n = int(np.prod(shape))
            out[name] = vec[i : i + n].reshape(shape).copy()
            i += n
        return cls(**out)

    def all_finite(self) -> bool:
        return all(np.isfinite(a).all() for a in self.arrays())

    def digest(self) -> str:
        return hashlib.sha256(self.flat().astype("<f8").tobytes()).hexdigest()


def num_params() -> int:
    return sum(int(np.prod(s)) for s in WeightSet.SHAPES.values())


@dataclass
class TrainConfig:
    margin: float = 1.0
    batch_size: int = 8
    learning_rate: float = 1e-3
    rmsprop_decay: float = 0.9
    epochs: int = 25
    early_stop_patience: int = 5
    leaky_slope: float = 0.01
    rng_seed: int = 0

    def __post_init__(self):
        if not self.margin > 0:
            raise ValueError("margin must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not 0 < self.rmsprop_decay < 1:
            raise ValueError("rmsprop_decay must lie in (0, 1)")
        if self.epochs < 1 or self.early_stop_patience < 0:
            raise ValueError("epochs must be >= 1 and patience >= 0")


@dataclass
class TrainHistory:
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    seconds: list[float] = field(default_factory=list)
    best_epoch: int = -1

    def __len__(self):
        return len(self.train_loss)

    def to_csv(self, seconds: bool = True) -> str:
        """Per-epoch CSV; ``seconds=False`` drops the wall-clock column so reruns match byte for byte."""
        lines = ["epoch,train_loss,val_loss" + (",seconds" if seconds else "")]
        for i, (t, v, s) in enumerate(zip(self.train_loss, self.val_loss, self.seconds), 1):
            lines.append(f"{i},{t!r},{v!r}" + (f",{s:.3f}" if seconds else ""))
        return "\n".join(lines) + "\n"


# --- layers -----------------------------------------------------------------


@numba.njit(cache=True)
def _conv1(x, wk, bias):
    """Direct 3x3 same conv of a single-channel binary image stack.

    x: (N, H, W) in {0, 1}; wk: (3, 3, C); returns (N, H, W, C). Only inked
    input pixels contribute, so the loop runs over ink, not over outputs.
    """
    n, h, w = x.shape
    c = wk.shape[2]
    z = np.empty((n, h, w, c))
    for b in range(n):
        for i in range(h):
            for j in range(w):
                for ch in range(c):
                    z[b, i, j, ch] = bias[ch]
        for ii in range(h):
            for jj in range(w):
                v = x[b, ii, jj]
                if v == 0.0:
                    continue
                # input (ii, jj) feeds output (ii - kh + 1, jj - kw + 1)
                for kh in range(3):
                    i = ii - kh + 1
                    if i < 0 or i >= h:
                        continue
                    for kw in range(3):
                        j = jj - kw + 1
                        if 0 <= j < w:
                            for ch in range(c):
                                z[b, i, j, ch] += v * wk[kh, kw, ch]
    return z


@numba.njit(cache=True)
def _conv1_grad(x, dz):
    """Kernel gradient (3, 3, C) of :func:`_conv1` given dLoss/dz."""
    n, h, w = x.shape
    c = dz.shape[3]
    g = np.zeros((3, 3, c))
    for b in range(n):
        for ii in range(h):
            for jj in range(w):
                v = x[b, ii, jj]
                if v == 0.0:
                    continue
                for kh in range(3):
                    i = ii - kh + 1
                    if i < 0 or i >= h:
                        continue
                    for kw in range(3):
                        j = jj - kw + 1
                        if 0 <= j < w:
                            for ch in range(c):
                                g[kh, kw, ch] += v * dz[b, i, j, ch]
    return g


@numba.njit(cache=True)
def _im2col(x):
    """(N, H, W, C) -> (N, H, W, 9*C) same-padded 3x3 patches, (kh, kw, ch) order."""
    n, h, w, c = x.shape
    xp = np.zeros((n, h + 2, w + 2, c))
    xp[:, 1 : h + 1, 1 : w + 1, :] = x
    out = np.empty((n, h, w, 9 * c))
    for b in range(n):
        for i in range(h):
            for j in range(w):
                for kh in range(3):
                    for kw in range(3):
                        base = (kh * 3 + kw) * c
                        for ch in range(c):
                            out[b, i, j, base + ch] = xp[b, i + kh, j + kw, ch]
    return out


@numba.njit(cache=True)
def _col2im(dcols, c):
    n, h, w, _ = dcols.shape
    dxp = np.zeros((n, h + 2, w + 2, c))
    for b in range(n):
        for i in range(h):
            for j in range(w):
                for kh in range(3):
                    for kw in range(3):
                        base = (kh * 3 + kw) * c
                        for ch in range(c):
                            dxp[b, i + kh, j + kw, ch] += dcols[b, i, j, base + ch]
    return dxp[:, 1 : h + 1, 1 : w + 1, :].copy()


@numba.njit(cache=True)
def _leaky_pool(z, slope):
    """Leaky ReLU then 2x2/2 max pool; ties go to the first window element."""
    n, h, w, c = z.shape
    ho, wo = h // 2, w // 2
    out = np.empty((n, ho, wo, c))
    idx = np.empty((n, ho, wo, c), dtype=np.int8)
    for b in range(n):
        for i in range(ho):
            for j in range(wo):
                for ch in range(c):
                    best = -np.inf
                    bi = 0
                    for k in range(4):
                        v = z[b, 2 * i + k // 2, 2 * j + k % 2, ch]
                        if v <= 0:
                            v = slope * v
                        if v > best:
                            best = v
                            bi = k
                    out[b, i, j, ch] = best
                    idx[b, i, j, ch] = bi
    return out, idx


@numba.njit(cache=True)
def _unpool_leaky(dout, idx, z, slope):
    """Route pooled gradients to the argmax cell and back through the leaky ReLU.

    Also returns the per-channel sum of the result, i.e. the bias gradient.
    """
    n, ho, wo, c = dout.shape
    dz = np.zeros(z.shape)
    bsum = np.zeros(c)
    for b in range(n):
        for i in range(ho):
            for j in range(wo):
                for ch in range(c):
                    k = idx[b, i, j, ch]
                    hh = 2 * i + k // 2
                    ww = 2 * j + k % 2
                    g = dout[b, i, j, ch]
                    if z[b, hh, ww, ch] <= 0:
                        g *= slope
                    dz[b, hh, ww, ch] = g
                    bsum[ch] += g
    return dz, bsum


def _conv2_matrix(w: WeightSet) -> np.ndarray:
    """conv2 kernels as (C2, 3*3*C1) matching the (kh, kw, ch) patch layout."""
    return w.conv2_w.transpose(0, 2, 3, 1).reshape(C2, -1)


@dataclass
class ForwardCache:
    x: np.ndarray
    z1: np.ndarray
    idx1: np.ndarray
    cols2: np.ndarray
    z2: np.ndarray
    idx2: np.ndarray
    flat: np.ndarray


def forward_batch(w: WeightSet, x: np.ndarray, slope: float = 0.01, keep: bool = False):
    """Embed a stack of images (N, 12, 150) into (N, 32) feature vectors.

    With ``keep=True`` also returns the intermediate values needed by
    :func:`backward_batch`.
    """
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[0]
    k1 = np.ascontiguousarray(w.conv1_w[:, 0].transpose(1, 2, 0))  # (3, 3, C1)
    z1 = _conv1(x, k1, w.conv1_b)
    p1, idx1 = _leaky_pool(z1, slope)

    cols2 = _im2col(p1)
    z2 = cols2 @ _conv2_matrix(w).T
    z2 += w.conv2_b
    p2, idx2 = _leaky_pool(z2, slope)

    flat = p2.transpose(0, 3, 1, 2).reshape(n, FLAT)
    out = flat @ w.dense_w + w.dense_b
    if keep:
        return out, ForwardCache(x, z1, idx1, cols2, z2, idx2, flat)
    return out


def backward_batch(w: WeightSet, cache: ForwardCache, dout: np.ndarray, slope: float = 0.01) -> WeightSet:
    """Parameter gradients, summed over the batch, given dLoss/dOutput (N, 32)."""
    n = dout.shape[0]
    g = WeightSet.zeros()
    g.dense_w = cache.flat.T @ dout
    g.dense_b = dout.sum(axis=0)
    dflat = dout @ w.dense_w.T
    dp2 = dflat.reshape(n, C2, H2, W2).transpose(0, 2, 3, 1)

    dz2, g.conv2_b = _unpool_leaky(np.ascontiguousarray(dp2), cache.idx2, cache.z2, slope)
    gk2 = dz2.reshape(-1, C2).T @ cache.cols2.reshape(-1, 9 * C1)  # (C2, 3*3*C1)
    g.conv2_w = gk2.reshape(C2, KERNEL, KERNEL, C1).transpose(0, 3, 1, 2).copy()
    dp1 = _col2im(dz2 @ _conv2_matrix(w), C1)

    dz1, g.conv1_b = _unpool_leaky(dp1, cache.idx1, cache.z1, slope)
    g.conv1_w = _conv1_grad(cache.x, dz1).transpose(2, 0, 1)[:, None].copy()
    return g


def _pixels(img) -> np.ndarray:
    return img.pixels if hasattr(img, "pixels") else np.asarray(img)


def forward(w: WeightSet, img, slope: float = 0.01) -> np.ndarray:
    return forward_batch(w, _pixels(img)[None], slope)[0]


def embed(w: WeightSet, strings, atlas: GlyphAtlas | None = None, batch: int = 256) -> np.ndarray:
    from .render import render_batch

    strings = list(strings)
    out = np.zeros((len(strings), EMBED_DIM))
    for i in range(0, len(strings), batch):
        out[i : i + batch] = forward_batch(w, render_batch(strings[i : i + batch], atlas))
    return out


# --- loss -------------------------------------------------------------------


def distance(f1, f2) -> float:
    return float(np.sqrt(np.sum((np.asarray(f1) - np.asarray(f2)) ** 2)))


def contrastive_loss(d, y, margin: float = 1.0):
    """Squared distance for similar pairs (y=0), squared hinge for dissimilar (y=1)."""
    d = np.asarray(d, dtype=np.float64)
    y = np.asarray(y)
    loss = np.where(y == 0, d**2, np.maximum(0.0, margin - d) ** 2)
    return float(loss) if loss.ndim == 0 else loss


def _pair_loss_grad(f1, f2, y, margin):
    """Per-pair losses and dLoss/df1 (dLoss/df2 is its negation)."""
    diff = f1 - f2
    d = np.sqrt(np.sum(diff**2, axis=1))
    loss = contrastive_loss(d, y, margin)
    y = np.asarray(y).reshape(-1)
    # similar: d(d^2)/df1 = 2 diff; dissimilar: -2 (m - d)+ diff / d, with 0 at d = 0
    hinge = np.maximum(0.0, margin - d)
    scale = np.where(y == 0, 2.0, -2.0 * hinge / np.maximum(d, DIST_FLOOR))
    scale = np.where((y == 1) & (d == 0), 0.0, scale)
    return np.atleast_1d(loss), scale[:, None] * diff


def pair_loss_and_grad(w: WeightSet, x1, x2, y, margin=1.0, slope=0.01):
    """Mean contrastive loss over a batch of pairs and its gradient."""
    x1 = np.asarray(x1, dtype=np.float64)
    x2 = np.asarray(x2, dtype=np.float64)
    n = x1.shape[0]
    out, cache = forward_batch(w, np.concatenate([x1, x2]), slope, keep=True)
    loss, dfa = _pair_loss_grad(out[:n], out[n:], y, margin)
    dout = np.concatenate([dfa, -dfa]) / n
    return float(loss.mean()), backward_batch(w, cache, dout, slope)


def backward(w: WeightSet, img1, img2, y: int, margin: float = 1.0, slope: float = 0.01) -> WeightSet:
    """Gradient of one pair's contrastive loss; both branches share ``w``."""
    _, g = pair_loss_and_grad(w, _pixels(img1)[None], _pixels(img2)[None], np.array([y]), margin, slope)
    return g


def pair_distances(w: WeightSet, x1, x2, slope=0.01) -> np.ndarray:
    n = len(x1)
    out = forward_batch(w, np.concatenate([x1, x2]), slope)
    return np.sqrt(np.sum((out[:n] - out[n:]) ** 2, axis=1))


# --- optimizer --------------------------------------------------------------


def rmsprop_init(w: WeightSet) -> WeightSet:
    return WeightSet.zeros()


def rmsprop_step(w: WeightSet, g: WeightSet, state: WeightSet, cfg: TrainConfig):
    """One RMSProp update; returns new (weights, state) without mutating inputs."""
    rho, lr = cfg.rmsprop_decay, cfg.learning_rate
    new_w, new_s = {}, {}
    for name, p, gp, s in zip(w.names(), w.arrays(), g.arrays(), state.arrays()):
        s = rho * s + (1.0 - rho) * gp * gp
        new_s[name] = s
        new_w[name] = p - lr * gp / (np.sqrt(s) + EPS)
    out = WeightSet(**new_w)
    if not out.all_finite():
        raise NonFiniteUpdate("parameters became non-finite; lower the learning rate")
    return out, WeightSet(**new_s)


# --- training ---------------------------------------------------------------


class _ImageBank:
    """Renders each distinct string once, stored as uint8."""

    def __init__(self, strings, atlas):
        uniq = sorted(set(strings))
        self.row = {s: i for i, s in enumerate(uniq)}
        self.bits = np.zeros((len(uniq), IMAGE_HEIGHT, IMAGE_WIDTH), dtype=np.uint8)
        for s, i in self.row.items():
            self.bits[i] = render_string(s, atlas).pixels

    def take(self, strings) -> np.ndarray:
        return self.bits[[self.row[s] for s in strings]].astype(np.float64)


def _as_arrays(pairs):
    s1 = [p.s1 for p in pairs]
    s2 = [p.s2 for p in pairs]
    y = np.array([p.label for p in pairs], dtype=np.int64)
    return s1, s2, y


def mean_pair_loss(w, bank, s1, s2, y, cfg, chunk=512) -> float:
    total = 0.0
    for i in range(0, len(y), chunk):
        d = pair_distances(w, bank.take(s1[i : i + chunk]), bank.take(s2[i : i + chunk]), cfg.leaky_slope)
        total += float(np.sum(contrastive_loss(d, y[i : i + chunk], cfg.margin)))
    return total / len(y)


def train(pairs_train, pairs_val, atlas: GlyphAtlas | None, cfg: TrainConfig, init: WeightSet | None = None):
    """Train the embedder with mini-batch RMSProp and validation early stopping.

    Returns the weights from the epoch with the lowest mean validation loss
    together with the per-epoch history.
    """
    for name, ps in (("train", pairs_train), ("validation", pairs_val)):
        labels = {p.label for p in ps}
        if labels != {0, 1}:
            raise ValueError(f"{name} pairs must be non-empty and contain both labels")
    rng = np.random.default_rng(cfg.rng_seed)
    w = init.copy() if init is not None else WeightSet.init(int(rng.integers(2**63)))
    state = rmsprop_init(w)
    bank = _ImageBank([s for p in (*pairs_train, *pairs_val) for s in (p.s1, p.s2)], atlas)
    t1, t2, ty = _as_arrays(pairs_train)
    v1, v2, vy = _as_arrays(pairs_val)

    hist = TrainHistory()
    best, best_loss, stale = w.copy(), np.inf, 0
    for epoch in range(cfg.epochs):
        start = time.perf_counter()
        order = rng.permutation(len(ty))
        total = 0.0
        for i in range(0, len(order), cfg.batch_size):
            b = order[i : i + cfg.batch_size]
            loss, g = pair_loss_and_grad(
                w,
                bank.take([t1[j] for j in b]),
                bank.take([t2[j] for j in b]),
                ty[b],
                cfg.margin,
                cfg.leaky_slope,
            )
            if not np.isfinite(loss) or loss > DIVERGED_LOSS * cfg.margin**2:
                raise NonFiniteUpdate(f"training diverged (batch loss {loss:.3g}); lower the learning rate")
            total += loss * len(b)
            w, state = rmsprop_step(w, g, state, cfg)
        val = mean_pair_loss(w, bank, v1, v2, vy, cfg)
        hist.train_loss.append(total / len(ty))
        hist.val_loss.append(val)
        hist.seconds.append(time.perf_counter() - start)
        log.info("epoch %d train %.5f val %.5f", epoch + 1, hist.train_loss[-1], val)
        if val < best_loss:
            best, best_loss, stale = w.copy(), val, 0
            hist.best_epoch = epoch
        else:
            stale += 1
            if stale >= cfg.early_stop_patience:
                break
    return best, hist


# --- model file -------------------------------------------------------------


def model_bytes(w: WeightSet) -> bytes:
    """Serialize: magic, u32 version, u32 arch constants, f64 params (documented order)."""
    buf = io.BytesIO()
    buf.write(MODEL_MAGIC)
    buf.write(struct.pack("<I", MODEL_VERSION))
    buf.write(struct.pack("<" + "I" * len(ARCH), *ARCH))
    buf.write(struct.pack("<I", num_params()))
    buf.write(w.flat().astype("<f8").tobytes())
    return buf.getvalue()


def save_model(w: WeightSet, path: str | Path) -> None:
    Path(path).write_bytes(model_bytes(w))


def load_model(path: str | Path) -> WeightSet:
    data = Path(path).read_bytes()
    head = len(MODEL_MAGIC)
    if data[:head] != MODEL_MAGIC:
        raise ModelFormatError(f"{path}: not a model file")
    (version,) = struct.unpack_from("<I", data, head)
    if version != MODEL_VERSION:
        raise ModelFormatError(f"{path}: unsupported model version {version}")
    arch = struct.unpack_from("<" + "I" * len(ARCH), data, head + 4)
    if arch != ARCH:
        raise ModelFormatError(f"{path}: architecture {arch} does not match {ARCH}")
    off = head + 4 + 4 * len(ARCH)
    (count,) = struct.unpack_from("<I", data, off)
    off += 4
    if count != num_params() or len(data) - off != 8 * count:
        raise ModelFormatError(f"{path}: expected {num_params()} parameters")
    return WeightSet.from_flat(np.frombuffer(data, dtype="<f8", offset=off))
