"""Independent reference implementations and numeric utilities for the tests.

Nothing here imports the package's kernels: the oracles are deliberately
naive loops so that agreement with the optimized code means something.
"""

from collections import deque
from itertools import permutations

import numpy as np


def rel_err(a, b):
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-300)
    return float(np.linalg.norm(a - b) / denom)


def numeric_grad(f, arr, idx, h=1e-6):
    """Central difference of scalar ``f()`` with respect to ``arr.flat[i]`` for i in ``idx``."""
    out = np.empty(len(idx))
    flat = arr.reshape(-1)
    for n, i in enumerate(idx):
        old = flat[i]
        flat[i] = old + h
        fp = f()
        flat[i] = old - h
        fm = f()
        flat[i] = old
        out[n] = (fp - fm) / (2 * h)
    return out


def sample_idx(rng, size, k=24):
    return rng.choice(size, size=min(k, size), replace=False)


# ---------------------------------------------------------------------------
# Layer oracles
# ---------------------------------------------------------------------------


def conv_ref(x, w, b=None, stride=1, pad=0):
    """Direct 6-loop cross-correlation in float64."""
    x = np.asarray(x, dtype=np.float64)
    n, c, h, wd = x.shape
    oc, ic, k, _ = w.shape
    xp = np.zeros((n, c, h + 2 * pad, wd + 2 * pad))
    xp[:, :, pad:pad + h, pad:pad + wd] = x
    ho = (h + 2 * pad - k) // stride + 1
    wo = (wd + 2 * pad - k) // stride + 1
    out = np.zeros((n, oc, ho, wo))
    for i in range(ho):
        for j in range(wo):
            patch = xp[:, :, i * stride:i * stride + k, j * stride:j * stride + k]
            out[:, :, i, j] = np.tensordot(patch, w, axes=([1, 2, 3], [1, 2, 3]))
    if b is not None:
        out += np.asarray(b, dtype=np.float64)[None, :, None, None]
    return out


def tconv_ref(x, w, b=None, stride=2, pad=1):
    """Transposed conv as zero-stuffing + full padding + conv with the flipped, swapped kernel."""
    x = np.asarray(x, dtype=np.float64)
    n, c, h, wd = x.shape
    ic, oc, k, _ = w.shape
    stuffed = np.zeros((n, c, (h - 1) * stride + 1, (wd - 1) * stride + 1))
    stuffed[:, :, ::stride, ::stride] = x
    wf = np.asarray(w, dtype=np.float64)[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)
    return conv_ref(stuffed, wf, b, 1, k - 1 - pad)


def maxpool_ref(x):
    n, c, h, w = x.shape
    return x.reshape(n, c, h // 2, 2, w // 2, 2).max(axis=(3, 5))


def bn_ref(x, gamma, beta, eps=1e-5):
    x = np.asarray(x, dtype=np.float64)
    mean = x.mean(axis=(0, 2, 3), keepdims=True)
    var = x.var(axis=(0, 2, 3), keepdims=True)
    return (x - mean) / np.sqrt(var + eps) * gamma[None, :, None, None] + beta[None, :, None, None]


# ---------------------------------------------------------------------------
# Postprocessing and matching oracles
# ---------------------------------------------------------------------------


def flood_components(binary):
    """8-connected components by BFS; returns a list of (x0, y0, x1, y1, area) sorted."""
    h, w = binary.shape
    seen = np.zeros_like(binary, dtype=bool)
    comps = []
    for r in range(h):
        for c in range(w):
            if binary[r, c] and not seen[r, c]:
                q = deque([(r, c)])
                seen[r, c] = True
                ys, xs = [], []
                while q:
                    y, x = q.popleft()
                    ys.append(y)
                    xs.append(x)
                    for dy in (-1, 0, 1):
                        for dx in (-1, 0, 1):
                            yy, xx = y + dy, x + dx
                            if 0 <= yy < h and 0 <= xx < w and binary[yy, xx] and not seen[yy, xx]:
                                seen[yy, xx] = True
                                q.append((yy, xx))
                comps.append((min(xs), min(ys), max(xs), max(ys), len(xs)))
    return sorted(comps)


def overlaps(a, b):
    return not (a[2] < b[0] or b[2] < a[0] or a[3] < b[1] or b[3] < a[1])


def max_matching(dets, gts):
    """Maximum bipartite matching size under any-overlap, by exhaustive search."""
    best = 0
    small, large, flip = (dets, gts, False) if len(dets) <= len(gts) else (gts, dets, True)
    for perm in permutations(range(len(large)), len(small)):
        cnt = sum(
            overlaps(small[i], large[j]) for i, j in enumerate(perm)
        )
        best = max(best, cnt)
    return best


# One "criterion N: PASS/FAIL ..." line per acceptance check, echoed in the run summary.
ACCEPTANCE = []
