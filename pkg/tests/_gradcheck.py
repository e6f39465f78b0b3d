"""Central finite-difference check of the analytic pair gradient."""

import numpy as np

from homoglyph import net

STEP = 1e-5
# a central difference carries about eps*|loss|/STEP ~ 2e-11*|loss| of roundoff; gradients
# below GRAD_FLOOR*max(|loss|, 1) are compared by absolute error instead of relative error
GRAD_FLOOR = 1e-6


def random_weights(seed: int) -> net.WeightSet:
    """He-initialised kernels with non-zero biases, so no activation sits exactly on a kink."""
    w = net.WeightSet.init(seed)
    rng = np.random.default_rng(seed + 1)
    for name in ("conv1_b", "conv2_b", "dense_b"):
        arr = getattr(w, name)
        arr[...] = 0.1 * rng.standard_normal(arr.shape)
    return w


def _loss(w, x1, x2, y, margin, slope):
    d = net.pair_distances(w, x1, x2, slope)
    return float(np.mean(net.contrastive_loss(d, y, margin)))


def _pattern(w, x1, x2, y, margin, slope):
    """Everything piecewise about the loss: ReLU signs, pooling winners, hinge state."""
    parts = []
    for x in (x1, x2):
        _, c = net.forward_batch(w, x, slope, keep=True)
        parts += [c.z1 > 0, c.idx1, c.z2 > 0, c.idx2]
    d = net.pair_distances(w, x1, x2, slope)
    parts.append(np.where(y == 1, margin - d > 0, True))
    return parts


def _same(a, b):
    return all(np.array_equal(p, q) for p, q in zip(a, b))


def check_case(w, x1, x2, y, margin, slope, rng, per_tensor=1):
    """Compare analytic and central-difference gradients on sampled parameters.

    Parameters whose +-STEP perturbation changes any activation pattern are
    near a kink, where the difference quotient is meaningless; they are
    skipped and redrawn. Returns a list of (name, index, analytic, numeric, loss).
    """
    loss, g = net.pair_loss_and_grad(w, x1, x2, y, margin, slope)
    base = _pattern(w, x1, x2, y, margin, slope)
    flat = w.flat()
    offsets = {}
    i = 0
    for name, shape in net.WeightSet.SHAPES.items():
        offsets[name] = (i, int(np.prod(shape)))
        i += offsets[name][1]
    gflat = g.flat()
    out = []
    for name, (start, size) in offsets.items():
        taken = 0
        for _ in range(50):
            if taken == per_tensor:
                break
            j = start + int(rng.integers(size))
            plus, minus = flat.copy(), flat.copy()
            plus[j] += STEP
            minus[j] -= STEP
            wp, wm = net.WeightSet.from_flat(plus), net.WeightSet.from_flat(minus)
            if not (_same(base, _pattern(wp, x1, x2, y, margin, slope)) and _same(base, _pattern(wm, x1, x2, y, margin, slope))):
                continue
            num = (_loss(wp, x1, x2, y, margin, slope) - _loss(wm, x1, x2, y, margin, slope)) / (2 * STEP)
            out.append((name, j - start, float(gflat[j]), num, loss))
            taken += 1
    return out


def relative_error(analytic: float, numeric: float, loss: float = 1.0) -> float:
    floor = GRAD_FLOOR * max(abs(loss), 1.0)
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)
