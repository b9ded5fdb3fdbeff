"""Hot inner loops, each available as a numba kernel and as a numpy path.

The public functions dispatch on :data:`fastenet._accel.USE_NUMBA`.  The
copy and scatter kernels give bitwise-identical results on both paths; the
reductions (channel moments, fused batch-norm backward) agree up to
floating-point reassociation.

Array kernels work on channels-last ``(N, H, W, C)`` memory.  Column
matrices are laid out ``cols[(n, oy, ox), (ki, kj, c)]`` so a convolution is
one ``cols @ W`` product with ``W`` shaped ``(k*k*C, out_ch)``.
"""

import numpy as np

from ._accel import USE_NUMBA, njit


def out_size(size, k, stride, pad):
    span = size + 2 * pad - k
    if span < 0 or span % stride:
        return None
    return span // stride + 1


# ---------------------------------------------------------------------------
# im2col / col2im (channels-last)
# ---------------------------------------------------------------------------


@njit
def _im2col_nb(x, k, stride, pad, ho, wo):
    n_, h, w, c_ = x.shape
    cols = np.zeros((n_ * ho * wo, k * k * c_), dtype=x.dtype)
    for n in range(n_):
        for oy in range(ho):
            for ox in range(wo):
                row = (n * ho + oy) * wo + ox
                for ki in range(k):
                    iy = oy * stride + ki - pad
                    if iy < 0 or iy >= h:
                        continue
                    for kj in range(k):
                        ix = ox * stride + kj - pad
                        if ix < 0 or ix >= w:
                            continue
                        base = (ki * k + kj) * c_
                        for c in range(c_):
                            cols[row, base + c] = x[n, iy, ix, c]
    return cols


def _im2col_np(x, k, stride, pad, ho, wo):
    n_, h, w, c_ = x.shape
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0))) if pad else x
    cols = np.empty((n_, ho, wo, k, k, c_), dtype=x.dtype)
    for ki in range(k):
        for kj in range(k):
            cols[:, :, :, ki, kj] = xp[:, ki:ki + stride * ho:stride, kj:kj + stride * wo:stride]
    return cols.reshape(n_ * ho * wo, k * k * c_)


@njit
def _col2im_nb(cols, n_, h, w, c_, k, stride, pad, ho, wo):
    # (ki, kj) outermost so each output cell accumulates in the numpy path's order.
    x = np.zeros((n_, h, w, c_), dtype=cols.dtype)
    for ki in range(k):
        for kj in range(k):
            base = (ki * k + kj) * c_
            for n in range(n_):
                for oy in range(ho):
                    iy = oy * stride + ki - pad
                    if iy < 0 or iy >= h:
                        continue
                    for ox in range(wo):
                        ix = ox * stride + kj - pad
                        if ix < 0 or ix >= w:
                            continue
                        row = (n * ho + oy) * wo + ox
                        for c in range(c_):
                            x[n, iy, ix, c] += cols[row, base + c]
    return x


def _col2im_np(cols, n_, h, w, c_, k, stride, pad, ho, wo):
    cols = cols.reshape(n_, ho, wo, k, k, c_)
    xp = np.zeros((n_, h + 2 * pad, w + 2 * pad, c_), dtype=cols.dtype)
    for ki in range(k):
        for kj in range(k):
            xp[:, ki:ki + stride * ho:stride, kj:kj + stride * wo:stride] += cols[:, :, :, ki, kj]
    if pad:
        xp = np.ascontiguousarray(xp[:, pad:pad + h, pad:pad + w])
    return xp


def im2col(x, k, stride, pad):
    """Unfold channels-last ``x`` (N, H, W, C) into ``(N*Ho*Wo, k*k*C)``."""
    n_, h, w, c_ = x.shape
    ho = out_size(h, k, stride, pad)
    wo = out_size(w, k, stride, pad)
    fn = _im2col_nb if USE_NUMBA else _im2col_np
    return fn(np.ascontiguousarray(x), k, stride, pad, ho, wo), ho, wo


def col2im(cols, shape, k, stride, pad, ho, wo):
    """Adjoint of :func:`im2col`: scatter-add columns into an (N, H, W, C) array."""
    n_, h, w, c_ = shape
    fn = _col2im_nb if USE_NUMBA else _col2im_np
    return fn(np.ascontiguousarray(cols), n_, h, w, c_, k, stride, pad, ho, wo)


# ---------------------------------------------------------------------------
# 2x2 max pooling (channels-last)
# ---------------------------------------------------------------------------


@njit
def _maxpool2_nb(x):
    n_, h, w, c_ = x.shape
    ho, wo = h // 2, w // 2
    out = np.empty((n_, ho, wo, c_), dtype=x.dtype)
    arg = np.empty((n_, ho, wo, c_), dtype=np.uint8)
    for n in range(n_):
        for oy in range(ho):
            for ox in range(wo):
                for c in range(c_):
                    best = x[n, 2 * oy, 2 * ox, c]
                    bi = 0
                    for q in range(1, 4):
                        v = x[n, 2 * oy + q // 2, 2 * ox + q % 2, c]
                        if v > best:
                            best = v
                            bi = q
                    out[n, oy, ox, c] = best
                    arg[n, oy, ox, c] = bi
    return out, arg


def _maxpool2_np(x):
    n_, h, w, c_ = x.shape
    win = x.reshape(n_, h // 2, 2, w // 2, 2, c_).transpose(0, 1, 3, 5, 2, 4)
    win = win.reshape(n_, h // 2, w // 2, c_, 4)
    arg = win.argmax(axis=-1).astype(np.uint8)
    out = np.take_along_axis(win, arg[..., None].astype(np.intp), axis=-1)[..., 0]
    return out, arg


@njit
def _maxpool2_back_nb(grad, arg):
    n_, ho, wo, c_ = grad.shape
    gx = np.zeros((n_, 2 * ho, 2 * wo, c_), dtype=grad.dtype)
    for n in range(n_):
        for oy in range(ho):
            for ox in range(wo):
                for c in range(c_):
                    q = arg[n, oy, ox, c]
                    gx[n, 2 * oy + q // 2, 2 * ox + q % 2, c] = grad[n, oy, ox, c]
    return gx


def _maxpool2_back_np(grad, arg):
    n_, ho, wo, c_ = grad.shape
    gx = np.zeros((n_, ho, wo, c_, 4), dtype=grad.dtype)
    np.put_along_axis(gx, arg[..., None].astype(np.intp), grad[..., None], axis=-1)
    gx = gx.reshape(n_, ho, wo, c_, 2, 2).transpose(0, 1, 4, 2, 5, 3)
    return gx.reshape(n_, 2 * ho, 2 * wo, c_)


def maxpool2(x):
    """2x2 stride-2 max over a channels-last array; ties go to the first cell."""
    fn = _maxpool2_nb if USE_NUMBA else _maxpool2_np
    return fn(np.ascontiguousarray(x))


def maxpool2_backward(grad, arg):
    fn = _maxpool2_back_nb if USE_NUMBA else _maxpool2_back_np
    return fn(np.ascontiguousarray(grad), np.ascontiguousarray(arg))


# ---------------------------------------------------------------------------
# Border following (Suzuki & Abe 1985) and component labelling
# ---------------------------------------------------------------------------

# Clockwise neighbour order starting east, in (drow, dcol).
_DR = np.array([0, 1, 1, 1, 0, -1, -1, -1], dtype=np.int64)
_DC = np.array([1, 1, 0, -1, -1, -1, 0, 1], dtype=np.int64)


@njit
def _dir_of(dr, dc, DR, DC):
    for d in range(8):
        if DR[d] == dr and DC[d] == dc:
            return d
    return -1


@njit
def _follow_borders(binary, DR, DC):
    """Trace every border of a 0/1 image.

    Returns ``(points, starts, is_outer)``: ``points`` is an ``(M, 2)`` array
    of (row, col) coordinates, contour ``i`` occupies
    ``points[starts[i]:starts[i + 1]]``.
    """
    h, w = binary.shape
    f = np.zeros((h + 2, w + 2), dtype=np.int64)
    for r in range(h):
        for c in range(w):
            if binary[r, c] != 0:
                f[r + 1, c + 1] = 1

    cap = 4 * (h + 2) * (w + 2) + 16
    pts = np.empty((cap, 2), dtype=np.int64)
    npts = 0
    starts = np.empty(h * w + 2, dtype=np.int64)
    outer = np.empty(h * w + 1, dtype=np.bool_)
    ncont = 0
    nbd = 1

    for i in range(1, h + 1):
        for j in range(1, w + 1):
            fij = f[i, j]
            if fij == 0:
                continue
            if fij == 1 and f[i, j - 1] == 0:
                is_outer = True
                i2 = i
                j2 = j - 1
            elif fij >= 1 and f[i, j + 1] == 0:
                is_outer = False
                i2 = i
                j2 = j + 1
            else:
                continue
            nbd += 1
            starts[ncont] = npts
            outer[ncont] = is_outer
            ncont += 1

            # 3.1: clockwise from (i2, j2) around (i, j) for a nonzero pixel.
            d0 = _dir_of(i2 - i, j2 - j, DR, DC)
            found = -1
            for t in range(8):
                d = (d0 + t) % 8
                if f[i + DR[d], j + DC[d]] != 0:
                    found = d
                    break
            if found < 0:
                f[i, j] = -nbd
                pts[npts, 0] = i - 1
                pts[npts, 1] = j - 1
                npts += 1
                continue
            i1 = i + DR[found]
            j1 = j + DC[found]
            i2 = i1
            j2 = j1
            i3 = i
            j3 = j
            while True:
                if npts >= pts.shape[0]:
                    grown = np.empty((2 * pts.shape[0], 2), dtype=np.int64)
                    grown[:npts] = pts[:npts]
                    pts = grown
                pts[npts, 0] = i3 - 1
                pts[npts, 1] = j3 - 1
                npts += 1
                # 3.3: counter-clockwise from the element after (i2, j2).
                d0 = _dir_of(i2 - i3, j2 - j3, DR, DC)
                east_zero_seen = False
                d4 = -1
                for t in range(1, 9):
                    d = (d0 - t) % 8
                    v = f[i3 + DR[d], j3 + DC[d]]
                    if v != 0:
                        d4 = d
                        break
                    if d == 0:
                        east_zero_seen = True
                i4 = i3 + DR[d4]
                j4 = j3 + DC[d4]
                # 3.4
                if east_zero_seen:
                    f[i3, j3] = -nbd
                elif f[i3, j3] == 1:
                    f[i3, j3] = nbd
                # 3.5
                if i4 == i and j4 == j and i3 == i1 and j3 == j1:
                    break
                i2 = i3
                j2 = j3
                i3 = i4
                j3 = j4
    starts[ncont] = npts
    return pts[:npts].copy(), starts[:ncont + 1].copy(), outer[:ncont].copy()


@njit
def _label8(binary):
    """Stack-based 8-connected labelling; labels start at 1 in raster order."""
    h, w = binary.shape
    labels = np.zeros((h, w), dtype=np.int32)
    stack = np.empty((h * w, 2), dtype=np.int64)
    cur = 0
    for r0 in range(h):
        for c0 in range(w):
            if binary[r0, c0] == 0 or labels[r0, c0] != 0:
                continue
            cur += 1
            labels[r0, c0] = cur
            top = 0
            stack[0, 0] = r0
            stack[0, 1] = c0
            top = 1
            while top > 0:
                top -= 1
                r = stack[top, 0]
                c = stack[top, 1]
                for dr in range(-1, 2):
                    rr = r + dr
                    if rr < 0 or rr >= h:
                        continue
                    for dc in range(-1, 2):
                        cc = c + dc
                        if cc < 0 or cc >= w:
                            continue
                        if binary[rr, cc] != 0 and labels[rr, cc] == 0:
                            labels[rr, cc] = cur
                            stack[top, 0] = rr
                            stack[top, 1] = cc
                            top += 1
    return labels, cur


def follow_borders(binary):
    return _follow_borders(np.ascontiguousarray(binary, dtype=np.uint8), _DR, _DC)


def label8(binary):
    return _label8(np.ascontiguousarray(binary, dtype=np.uint8))


# ---------------------------------------------------------------------------
# Fused batch-norm + leaky ReLU over a channels-last (M, C) matrix
# ---------------------------------------------------------------------------


@njit
def _channel_moments_nb(z):
    m, c_ = z.shape
    s = np.zeros(c_, dtype=np.float64)
    for i in range(m):
        for c in range(c_):
            s[c] += z[i, c]
    mean = s / m
    q = np.zeros(c_, dtype=np.float64)
    for i in range(m):
        for c in range(c_):
            d = z[i, c] - mean[c]
            q[c] += d * d
    return mean, q / m


def _channel_moments_np(z):
    mean = z.mean(axis=0, dtype=np.float64)
    d = z - mean.astype(z.dtype)
    return mean, np.einsum("ij,ij->j", d, d, dtype=np.float64) / z.shape[0]


@njit
def _bn_leaky_fwd_nb(z, mean, inv_std, gamma, beta, slope):
    m, c_ = z.shape
    out = np.empty_like(z)
    for i in range(m):
        for c in range(c_):
            y = (z[i, c] - mean[c]) * inv_std[c] * gamma[c] + beta[c]
            out[i, c] = y if y > 0 else y * slope
    return out


def _bn_leaky_fwd_np(z, mean, inv_std, gamma, beta, slope):
    y = (z - mean) * (inv_std * gamma) + beta
    return np.where(y > 0, y, y * slope)


@njit
def _bn_leaky_bwd_nb(g, z, mean, inv_std, gamma, beta, slope):
    m, c_ = z.shape
    sum_dy = np.zeros(c_, dtype=np.float64)
    sum_dy_xhat = np.zeros(c_, dtype=np.float64)
    dy = np.empty_like(g)
    for i in range(m):
        for c in range(c_):
            xhat = (z[i, c] - mean[c]) * inv_std[c]
            d = g[i, c]
            if xhat * gamma[c] + beta[c] <= 0:
                d = d * slope
            dy[i, c] = d
            sum_dy[c] += d
            sum_dy_xhat[c] += d * xhat
    scale = gamma * inv_std / m
    for i in range(m):
        for c in range(c_):
            xhat = (z[i, c] - mean[c]) * inv_std[c]
            dy[i, c] = scale[c] * (m * dy[i, c] - sum_dy[c] - xhat * sum_dy_xhat[c])
    return dy, sum_dy_xhat, sum_dy


def _bn_leaky_bwd_np(g, z, mean, inv_std, gamma, beta, slope):
    m = z.shape[0]
    xhat = (z - mean) * inv_std
    dy = np.where(xhat * gamma + beta > 0, g, g * slope)
    sum_dy = dy.sum(axis=0, dtype=np.float64)
    sum_dy_xhat = np.einsum("ij,ij->j", dy, xhat, dtype=np.float64)
    scale = (gamma * inv_std / m).astype(z.dtype)
    gz = (dy * m - sum_dy.astype(z.dtype) - xhat * sum_dy_xhat.astype(z.dtype)) * scale
    return gz, sum_dy_xhat, sum_dy


def channel_moments(z):
    """Per-column mean and biased variance (float64) of an (M, C) matrix."""
    fn = _channel_moments_nb if USE_NUMBA else _channel_moments_np
    return fn(np.ascontiguousarray(z))


def bn_leaky_forward(z, mean, inv_std, gamma, beta, slope):
    fn = _bn_leaky_fwd_nb if USE_NUMBA else _bn_leaky_fwd_np
    dt = z.dtype
    return fn(np.ascontiguousarray(z), mean.astype(dt), inv_std.astype(dt), gamma.astype(dt),
              beta.astype(dt), dt.type(slope))


def bn_leaky_backward(g, z, mean, inv_std, gamma, beta, slope):
    """Returns ``(grad_z, grad_gamma, grad_beta)``; the parameter grads are float64."""
    fn = _bn_leaky_bwd_nb if USE_NUMBA else _bn_leaky_bwd_np
    dt = z.dtype
    return fn(np.ascontiguousarray(g), np.ascontiguousarray(z), mean.astype(dt), inv_std.astype(dt),
              gamma.astype(dt), beta.astype(dt), dt.type(slope))
