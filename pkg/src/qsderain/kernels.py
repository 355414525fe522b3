"""Hot numeric kernels with numba and pure-numpy implementations.

Each public kernel dispatches on :data:`qsderain._accel.USE_NUMBA` at call
time; pass ``backend="numba"`` or ``backend="numpy"`` to force one.  Both
paths must agree to floating-point rounding, which the test-suite checks.
"""
from __future__ import annotations

import numpy as np

from . import _accel
from ._accel import njit

__all__ = ["correlate_same", "stamp_segments", "laplace_em_pass", "BACKENDS"]

BACKENDS = ("numba", "numpy")


def _pick(backend):
    if backend is None:
        return "numba" if _accel.USE_NUMBA else "numpy"
    if backend not in BACKENDS:
        raise ValueError(f"unknown backend {backend!r}; expected one of {BACKENDS}")
    if backend == "numba" and not _accel.HAVE_NUMBA:
        raise RuntimeError("numba backend requested but numba is not installed")
    return backend


# --- same-size correlation with symmetric padding --------------------------


@njit
def _correlate_same_nb(stack, kernel, ay, ax):
    h, w, c = stack.shape
    kh, kw = kernel.shape
    out = np.zeros((h, w, c))
    for i in range(h):
        for j in range(w):
            for u in range(kh):
                ii = i + u - ay
                if ii < 0:
                    ii = -ii - 1
                elif ii >= h:
                    ii = 2 * h - ii - 1
                for v in range(kw):
                    k = kernel[u, v]
                    if k == 0.0:
                        continue
                    jj = j + v - ax
                    if jj < 0:
                        jj = -jj - 1
                    elif jj >= w:
                        jj = 2 * w - jj - 1
                    for ch in range(c):
                        out[i, j, ch] += k * stack[ii, jj, ch]
    return out


def _correlate_same_np(stack, kernel, ay, ax):
    h, w, _ = stack.shape
    kh, kw = kernel.shape
    padded = np.pad(stack, ((ay, kh - 1 - ay), (ax, kw - 1 - ax), (0, 0)), mode="symmetric")
    out = np.zeros(stack.shape)
    for u in range(kh):
        for v in range(kw):
            if kernel[u, v] != 0.0:
                out += kernel[u, v] * padded[u:u + h, v:v + w]
    return out


def correlate_same(img, kernel, backend=None):
    """Correlate ``img`` (H x W or H x W x C) with a 2-D ``kernel``.

    ``out[i, j] = sum_{u,v} kernel[u, v] * img[i + u - ay, j + v - ax]`` with
    anchor ``(ay, ax) = ((kh - 1) // 2, (kw - 1) // 2)``, so a two-tap
    ``[-1, 1]`` is the forward difference.  Out-of-range indices reflect
    symmetrically (edge sample repeated), which keeps constants at zero
    response for zero-sum kernels.
    """
    img = np.asarray(img, dtype=np.float64)
    kernel = np.asarray(kernel, dtype=np.float64)
    if kernel.ndim != 2:
        raise ValueError("kernel must be 2-D")
    squeeze = img.ndim == 2
    stack = img[:, :, None] if squeeze else img
    if stack.ndim != 3:
        raise ValueError("image must be H x W or H x W x C")
    kh, kw = kernel.shape
    if stack.shape[0] < kh or stack.shape[1] < kw:
        raise ValueError(f"image {stack.shape[:2]} smaller than kernel support {kernel.shape}")
    ay, ax = (kh - 1) // 2, (kw - 1) // 2
    if _pick(backend) == "numba":
        out = _correlate_same_nb(np.ascontiguousarray(stack), np.ascontiguousarray(kernel), ay, ax)
    else:
        out = _correlate_same_np(stack, kernel, ay, ax)
    return out[:, :, 0] if squeeze else out


# --- oriented line-segment rasterisation -----------------------------------


@njit
def _stamp_segments_nb(canvas, segs):
    h, w = canvas.shape
    for s in range(segs.shape[0]):
        x0, y0, x1, y1, hw, val = segs[s, 0], segs[s, 1], segs[s, 2], segs[s, 3], segs[s, 4], segs[s, 5]
        dx = x1 - x0
        dy = y1 - y0
        ll = dx * dx + dy * dy
        i_lo = max(int(np.floor(min(y0, y1) - hw)), 0)
        i_hi = min(int(np.ceil(max(y0, y1) + hw)), h - 1)
        j_lo = max(int(np.floor(min(x0, x1) - hw)), 0)
        j_hi = min(int(np.ceil(max(x0, x1) + hw)), w - 1)
        hw2 = hw * hw
        for i in range(i_lo, i_hi + 1):
            for j in range(j_lo, j_hi + 1):
                t = 0.0
                if ll > 0.0:
                    t = ((j - x0) * dx + (i - y0) * dy) / ll
                    t = min(max(t, 0.0), 1.0)
                px = x0 + t * dx - j
                py = y0 + t * dy - i
                if px * px + py * py <= hw2 and val > canvas[i, j]:
                    canvas[i, j] = val
    return canvas


def _stamp_segments_np(canvas, segs):
    h, w = canvas.shape
    for x0, y0, x1, y1, hw, val in segs:
        i_lo = max(int(np.floor(min(y0, y1) - hw)), 0)
        i_hi = min(int(np.ceil(max(y0, y1) + hw)), h - 1)
        j_lo = max(int(np.floor(min(x0, x1) - hw)), 0)
        j_hi = min(int(np.ceil(max(x0, x1) + hw)), w - 1)
        if i_lo > i_hi or j_lo > j_hi:
            continue
        ii, jj = np.mgrid[i_lo:i_hi + 1, j_lo:j_hi + 1].astype(np.float64)
        dx, dy = x1 - x0, y1 - y0
        ll = dx * dx + dy * dy
        if ll > 0.0:
            t = np.clip(((jj - x0) * dx + (ii - y0) * dy) / ll, 0.0, 1.0)
        else:
            t = np.zeros_like(ii)
        px = x0 + t * dx - jj
        py = y0 + t * dy - ii
        hit = px * px + py * py <= hw * hw
        win = canvas[i_lo:i_hi + 1, j_lo:j_hi + 1]
        win[...] = np.where(hit & (val > win), val, win)
    return canvas


def stamp_segments(canvas, segments, backend=None):
    """Max-composite line segments onto ``canvas`` in place and return it.

    ``segments`` is ``n x 6``: ``x0, y0, x1, y1, half_width, intensity`` in
    pixel coordinates (pixel ``(i, j)`` sits at ``x=j, y=i``).  A pixel is
    covered when its centre lies within ``half_width`` of the segment.
    """
    canvas = np.asarray(canvas)
    if canvas.ndim != 2 or canvas.dtype != np.float64:
        raise ValueError("canvas must be a 2-D float64 array")
    segs = np.asarray(segments, dtype=np.float64).reshape(-1, 6)
    if _pick(backend) == "numba":
        return _stamp_segments_nb(canvas, np.ascontiguousarray(segs))
    return _stamp_segments_np(canvas, segs)


# --- one EM pass for a zero-mean two-Laplacian mixture ---------------------


@njit
def _laplace_em_pass_nb(a, pi1, s1, pi2, s2):
    c1 = np.log(pi1) - np.log(2.0 * s1)
    c2 = np.log(pi2) - np.log(2.0 * s2)
    ll = 0.0
    r1_sum = 0.0
    r1a_sum = 0.0
    r2a_sum = 0.0
    for n in range(a.shape[0]):
        l1 = c1 - a[n] / s1
        l2 = c2 - a[n] / s2
        m = max(l1, l2)
        e1 = np.exp(l1 - m)
        e2 = np.exp(l2 - m)
        tot = e1 + e2
        ll += m + np.log(tot)
        r1 = e1 / tot
        r1_sum += r1
        r1a_sum += r1 * a[n]
        r2a_sum += (1.0 - r1) * a[n]
    return ll, r1_sum, r1a_sum, r2a_sum


def _laplace_em_pass_np(a, pi1, s1, pi2, s2):
    l1 = np.log(pi1) - np.log(2.0 * s1) - a / s1
    l2 = np.log(pi2) - np.log(2.0 * s2) - a / s2
    lse = np.logaddexp(l1, l2)
    r1 = np.exp(l1 - lse)
    return float(lse.sum()), float(r1.sum()), float(r1 @ a), float((1.0 - r1) @ a)


def laplace_em_pass(abs_values, pi1, s1, pi2, s2, backend=None):
    """Log-likelihood at the given parameters plus the E-step sufficient statistics.

    Returns ``(loglik, sum r1, sum r1*|x|, sum r2*|x|)`` where ``r1`` is the
    posterior weight of component 1.  ``abs_values`` must be ``|x|``.
    """
    a = np.ascontiguousarray(abs_values, dtype=np.float64)
    if _pick(backend) == "numba":
        return _laplace_em_pass_nb(a, float(pi1), float(s1), float(pi2), float(s2))
    return _laplace_em_pass_np(a, pi1, s1, pi2, s2)
