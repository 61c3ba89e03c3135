"""Pure numpy implementations of the hot kernels.

These mirror ``_ckernels.pyx`` operation for operation so both backends
produce the same floating point results.
"""
import numpy as np


def black_row_bounds(pixels, threshold):
    """Return ``(top, bottom)`` so that ``pixels[top:bottom]`` drops the
    leading and trailing rows whose every channel value is below
    ``threshold``. Returns ``(0, 0)`` for an all-black image."""
    pixels = np.asarray(pixels, dtype=np.float64)
    bright = pixels.max(axis=(1, 2)) >= threshold
    idx = np.flatnonzero(bright)
    if idx.size == 0:
        return 0, 0
    return int(idx[0]), int(idx[-1]) + 1


def _axis_weights(n_in, n_out):
    # half-pixel centres, source coordinate clamped at 0 (align_corners=False)
    scale = n_in / n_out
    src = (np.arange(n_out, dtype=np.float64) + 0.5) * scale - 0.5
    src = np.maximum(src, 0.0)
    i0 = np.floor(src).astype(np.intp)
    i0 = np.minimum(i0, n_in - 1)
    i1 = np.minimum(i0 + 1, n_in - 1)
    lam = src - i0
    return i0, i1, lam


def resize_bilinear(src, out_h, out_w):
    """Bilinear resize of an ``H x W x C`` float64 array."""
    src = np.ascontiguousarray(src, dtype=np.float64)
    h, w, _ = src.shape
    y0, y1, ly = _axis_weights(h, out_h)
    x0, x1, lx = _axis_weights(w, out_w)
    lx = lx[None, :, None]
    ly = ly[:, None, None]
    r0 = src[y0]
    r1 = src[y1]
    # a + t * (b - a) keeps constant regions bit-exact
    top = r0[:, x0] + lx * (r0[:, x1] - r0[:, x0])
    bot = r1[:, x0] + lx * (r1[:, x1] - r1[:, x0])
    return top + ly * (bot - top)


def hue_shift(pixels, shift):
    """Rotate the HSV hue of every pixel by ``shift`` turns."""
    px = np.asarray(pixels, dtype=np.float64)
    r, g, b = px[..., 0], px[..., 1], px[..., 2]
    maxc = np.maximum(np.maximum(r, g), b)
    minc = np.minimum(np.minimum(r, g), b)
    delta = maxc - minc
    safe_delta = np.where(delta > 0, delta, 1.0)
    v = maxc
    s = np.where(maxc > 0, delta / np.where(maxc > 0, maxc, 1.0), 0.0)
    rc = (maxc - r) / safe_delta
    gc = (maxc - g) / safe_delta
    bc = (maxc - b) / safe_delta
    h = np.where(maxc == r, bc - gc, np.where(maxc == g, 2.0 + rc - bc, 4.0 + gc - rc))
    h = np.where(delta > 0, (h / 6.0) % 1.0, 0.0)

    h = (h + shift) % 1.0
    h6 = h * 6.0
    i = np.floor(h6)
    f = h6 - i
    i = i.astype(np.int64) % 6
    p = v * (1.0 - s)
    q = v * (1.0 - s * f)
    t = v * (1.0 - s * (1.0 - f))
    out = np.empty_like(px)
    choices_r = [v, q, p, p, t, v]
    choices_g = [t, v, v, q, p, p]
    choices_b = [p, p, t, v, v, q]
    out[..., 0] = np.choose(i, choices_r)
    out[..., 1] = np.choose(i, choices_g)
    out[..., 2] = np.choose(i, choices_b)
    return out


def rank_sum_null_counts(doubled_ranks, n1):
    """Count ``n1``-subsets of ``doubled_ranks`` by their sum.

    ``counts[t]`` is the number of size-``n1`` subsets whose doubled-rank
    sum equals ``t``. Doubling makes midranks integral so ties are exact.
    """
    ranks = np.asarray(doubled_ranks, dtype=np.int64)
    total = int(ranks.sum())
    dp = np.zeros((n1 + 1, total + 1), dtype=np.int64)
    dp[0, 0] = 1
    for i, r in enumerate(ranks):
        r = int(r)
        for k in range(min(i + 1, n1), 0, -1):
            dp[k, r:] += dp[k - 1, : total + 1 - r]
    return dp[n1]
