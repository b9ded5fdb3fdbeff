"""Layer primitives with hand-written backward passes.

Tensors are plain ``numpy.ndarray`` objects indexed ``(batch, channels,
height, width)``.  Results are returned as views over channels-last memory
(``as_nchw``) because that makes every convolution a single BLAS product;
callers may pass ordinary C-ordered arrays, which are converted on entry.
Every function is dtype-preserving: float32 is the working precision,
float64 inputs run the same code for gradient checks.
"""

from dataclasses import dataclass

import numpy as np

from . import kernels

BN_EPS = 1e-5
BN_MOMENTUM = 0.1
LEAKY_SLOPE = 0.1


class ShapeError(ValueError):
    """Raised when tensor shapes are incompatible with an operation."""


def _check4(name, x):
    if x.ndim != 4:
        raise ShapeError(f"{name}: expected a 4-d (batch, channels, height, width) tensor, got shape {x.shape}")


def channels_last(x):
    """Channels-last ``(N, H, W, C)`` contiguous view of a logical NCHW tensor (copy only if needed)."""
    return np.ascontiguousarray(x.transpose(0, 2, 3, 1))


def as_nchw(a):
    """Logical NCHW view of a channels-last ``(N, H, W, C)`` array."""
    return a.transpose(0, 3, 1, 2)


def new_tensor(shape, dtype=np.float32):
    """Zero tensor of logical ``shape`` (N, C, H, W) with channels-last memory."""
    n, c, h, w = shape
    return as_nchw(np.zeros((n, h, w, c), dtype=dtype))


# ---------------------------------------------------------------------------
# Convolution
# ---------------------------------------------------------------------------


def conv2d_forward(x, weights, bias=None, stride=1, pad=0):
    """Cross-correlate ``x`` with ``weights`` of shape (out_ch, in_ch, k, k).

    Returns ``(out, cache)``; ``cache`` feeds :func:`conv2d_backward`.
    """
    _check4("conv2d", x)
    if weights.ndim != 4 or weights.shape[2] != weights.shape[3]:
        raise ShapeError(f"conv2d: weights must be (out_ch, in_ch, k, k), got {weights.shape}")
    out_ch, in_ch, k, _ = weights.shape
    n, c, h, w = x.shape
    if c != in_ch:
        raise ShapeError(f"conv2d: input has {c} channels but weights expect {in_ch}")
    if bias is not None and bias.shape != (out_ch,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} != ({out_ch},)")
    ho = kernels.out_size(h, k, stride, pad)
    wo = kernels.out_size(w, k, stride, pad)
    if ho is None or wo is None or ho < 1 or wo < 1:
        raise ShapeError(
            f"conv2d: input {h}x{w} with k={k}, stride={stride}, pad={pad} "
            "does not give a positive integer output size"
        )
    xl = channels_last(x)
    if k == 1 and stride == 1 and pad == 0:
        cols = xl.reshape(-1, c)
    else:
        cols, ho, wo = kernels.im2col(xl, k, stride, pad)
    wmat = weights.transpose(2, 3, 1, 0).reshape(-1, out_ch)
    out = cols @ wmat
    if bias is not None:
        out += bias
    cache = (xl.shape, cols, weights, wmat, stride, pad, ho, wo)
    return as_nchw(out.reshape(n, ho, wo, out_ch)), cache


def conv2d_backward(grad_out, cache):
    """Return ``(grad_input, grad_weights, grad_bias)``."""
    xl_shape, cols, weights, wmat, stride, pad, ho, wo = cache
    out_ch, in_ch, k, _ = weights.shape
    n = xl_shape[0]
    expect = (n, out_ch, ho, wo)
    if grad_out.shape != expect:
        raise ShapeError(f"conv2d_backward: grad_out shape {grad_out.shape} != forward output {expect}")
    g = channels_last(grad_out).reshape(-1, out_ch)
    grad_w = (cols.T @ g).reshape(k, k, in_ch, out_ch).transpose(3, 2, 0, 1)
    grad_b = g.sum(axis=0)
    grad_cols = g @ wmat.T
    if k == 1 and stride == 1 and pad == 0:
        grad_x = grad_cols.reshape(xl_shape)
    else:
        grad_x = kernels.col2im(grad_cols, xl_shape, k, stride, pad, ho, wo)
    return as_nchw(grad_x), np.ascontiguousarray(grad_w), grad_b


def transposed_conv2d_forward(x, weights, bias=None, stride=2, pad=1):
    """Transposed convolution with ``weights`` shaped (in_ch, out_ch, k, k).

    Implemented as the adjoint of a strided convolution: every input cell
    scatters a weighted copy of the kernel into the output.
    """
    _check4("transposed_conv2d", x)
    if weights.ndim != 4 or weights.shape[2] != weights.shape[3]:
        raise ShapeError(f"transposed_conv2d: weights must be (in_ch, out_ch, k, k), got {weights.shape}")
    in_ch, out_ch, k, _ = weights.shape
    n, c, h, w = x.shape
    if c != in_ch:
        raise ShapeError(f"transposed_conv2d: input has {c} channels but weights expect {in_ch}")
    if bias is not None and bias.shape != (out_ch,):
        raise ShapeError(f"transposed_conv2d: bias shape {bias.shape} != ({out_ch},)")
    ho = (h - 1) * stride - 2 * pad + k
    wo = (w - 1) * stride - 2 * pad + k
    if ho < 1 or wo < 1:
        raise ShapeError(f"transposed_conv2d: input {h}x{w} gives empty output")
    xm = channels_last(x).reshape(-1, in_ch)
    wmat = weights.transpose(0, 2, 3, 1).reshape(in_ch, -1)
    cols = xm @ wmat
    out = kernels.col2im(cols, (n, ho, wo, out_ch), k, stride, pad, h, w)
    if bias is not None:
        out += bias
    cache = (xm, (n, c, h, w), weights, wmat, stride, pad)
    return as_nchw(out), cache


def transposed_conv2d_backward(grad_out, cache):
    xm, x_shape, weights, wmat, stride, pad = cache
    in_ch, out_ch, k, _ = weights.shape
    n, _, h, w = x_shape
    expect = (n, out_ch, (h - 1) * stride - 2 * pad + k, (w - 1) * stride - 2 * pad + k)
    if grad_out.shape != expect:
        raise ShapeError(f"transposed_conv2d_backward: grad_out shape {grad_out.shape} != forward output {expect}")
    gl = channels_last(grad_out)
    gcols, _, _ = kernels.im2col(gl, k, stride, pad)
    grad_w = (xm.T @ gcols).reshape(in_ch, k, k, out_ch).transpose(0, 3, 1, 2)
    grad_b = gl.reshape(-1, out_ch).sum(axis=0)
    grad_x = (gcols @ wmat.T).reshape(n, h, w, in_ch)
    return as_nchw(grad_x), np.ascontiguousarray(grad_w), grad_b


# ---------------------------------------------------------------------------
# Pooling
# ---------------------------------------------------------------------------


def maxpool2(x):
    """2x2 stride-2 max pool; returns ``(out, argmax)`` with argmax in 0..3 (row-major in the window)."""
    _check4("maxpool2", x)
    if x.shape[2] % 2 or x.shape[3] % 2:
        raise ShapeError(f"maxpool2: spatial dims must be even, got {x.shape[2]}x{x.shape[3]}")
    out, arg = kernels.maxpool2(channels_last(x))
    return as_nchw(out), as_nchw(arg)


def maxpool2_backward(grad_out, argmax):
    if grad_out.shape != argmax.shape:
        raise ShapeError(f"maxpool2_backward: grad_out {grad_out.shape} vs argmax {argmax.shape}")
    return as_nchw(kernels.maxpool2_backward(channels_last(grad_out), channels_last(argmax)))


# ---------------------------------------------------------------------------
# Batch normalisation
# ---------------------------------------------------------------------------


def batchnorm_forward(x, gamma, beta, running_mean, running_var, mode="train",
                      eps=BN_EPS, momentum=BN_MOMENTUM):
    """Per-channel batch norm.

    In train mode the batch statistics are used and ``running_mean`` /
    ``running_var`` are updated in place (unbiased variance, as is customary).
    """
    _check4("batchnorm", x)
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batchnorm: gamma/beta must have length {c}")
    xl = channels_last(x).reshape(-1, c)
    if mode == "train":
        m = xl.shape[0]
        mean = xl.mean(axis=0)
        xc = xl - mean
        var = np.einsum("ij,ij->j", xc, xc) / m
        inv_std = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
        xhat = xc
        xhat *= inv_std
        unbiased = var * (m / max(m - 1, 1))
        running_mean *= 1.0 - momentum
        running_mean += momentum * mean
        running_var *= 1.0 - momentum
        running_var += momentum * unbiased
        cache = (xhat, inv_std, gamma)
    elif mode == "infer":
        if running_mean is None or running_var is None:
            raise ValueError("batchnorm: infer mode needs running statistics")
        inv_std = (1.0 / np.sqrt(running_var + eps)).astype(x.dtype)
        xhat = (xl - running_mean.astype(x.dtype)) * inv_std
        cache = None
    else:
        raise ValueError(f"batchnorm: unknown mode {mode!r}")
    out = xhat * gamma.astype(x.dtype) + beta.astype(x.dtype)
    return as_nchw(out.reshape(x.shape[0], x.shape[2], x.shape[3], c)), cache


def batchnorm_backward(grad_out, cache):
    """Backward of train-mode batch norm: ``(grad_input, grad_gamma, grad_beta)``."""
    if cache is None:
        raise ValueError("batchnorm_backward: no train-mode cache")
    xhat, inv_std, gamma = cache
    n, c, h, w = grad_out.shape
    if c != xhat.shape[1] or n * h * w != xhat.shape[0]:
        raise ShapeError(f"batchnorm_backward: grad_out {grad_out.shape} does not match the forward pass")
    g = channels_last(grad_out).reshape(-1, c)
    m = g.shape[0]
    grad_beta = g.sum(axis=0)
    grad_gamma = np.einsum("ij,ij->j", g, xhat)
    scale = (gamma * inv_std / m).astype(g.dtype)
    grad_x = (g * m - grad_beta - xhat * grad_gamma) * scale
    return as_nchw(grad_x.reshape(n, h, w, c)), grad_gamma, grad_beta


def batchnorm_leaky_forward(x, gamma, beta, running_mean, running_var, mode="train",
                            slope=LEAKY_SLOPE, eps=BN_EPS, momentum=BN_MOMENTUM):
    """``leaky_relu(batchnorm(x))`` in one pass over memory.

    Numerically the composition of :func:`batchnorm_forward` and
    :func:`leaky_relu`; the cache keeps only the input and the statistics.
    """
    _check4("batchnorm", x)
    n, c, h, w = x.shape
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batchnorm: gamma/beta must have length {c}")
    xl = channels_last(x).reshape(-1, c)
    if mode == "train":
        m = xl.shape[0]
        mean, var = kernels.channel_moments(xl)
        running_mean *= 1.0 - momentum
        running_mean += momentum * mean
        running_var *= 1.0 - momentum
        running_var += momentum * var * (m / max(m - 1, 1))
    elif mode == "infer":
        mean, var = running_mean.astype(np.float64), running_var.astype(np.float64)
    else:
        raise ValueError(f"batchnorm: unknown mode {mode!r}")
    inv_std = 1.0 / np.sqrt(var + eps)
    out = kernels.bn_leaky_forward(xl, mean, inv_std, gamma, beta, slope)
    cache = (xl, mean, inv_std, gamma, beta, slope, (n, h, w, c)) if mode == "train" else None
    return as_nchw(out.reshape(n, h, w, c)), cache


def batchnorm_leaky_backward(grad_out, cache):
    """Backward of train-mode :func:`batchnorm_leaky_forward`."""
    if cache is None:
        raise ValueError("batchnorm_leaky_backward: no train-mode cache")
    xl, mean, inv_std, gamma, beta, slope, shape = cache
    n, h, w, c = shape
    if grad_out.shape != (n, c, h, w):
        raise ShapeError(f"batchnorm_leaky_backward: grad_out {grad_out.shape} vs forward {(n, c, h, w)}")
    g = channels_last(grad_out).reshape(-1, c)
    gz, ggamma, gbeta = kernels.bn_leaky_backward(g, xl, mean, inv_std, gamma, beta, slope)
    return as_nchw(gz.reshape(shape)), ggamma.astype(gamma.dtype), gbeta.astype(gamma.dtype)


# ---------------------------------------------------------------------------
# Activations and loss
# ---------------------------------------------------------------------------


def leaky_relu(x, slope=LEAKY_SLOPE):
    return np.where(x > 0, x, x * x.dtype.type(slope))


def leaky_relu_backward(grad_out, x, slope=LEAKY_SLOPE):
    return np.where(x > 0, grad_out, grad_out * grad_out.dtype.type(slope))


def sigmoid(x):
    # Split by sign so exp never overflows; clip so saturation stays inside (0, 1).
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    info = np.finfo(x.dtype)
    np.clip(out, info.smallest_subnormal, 1.0 - info.epsneg, out=out)
    return out


def sigmoid_backward(grad_out, y):
    """Gradient through a sigmoid given its output ``y``."""
    return grad_out * y * (1.0 - y)


def mse_loss(pred, target, reduction="sum"):
    """Squared-error loss and its gradient with respect to ``pred``."""
    if pred.shape != target.shape:
        raise ShapeError(f"mse_loss: pred {pred.shape} vs target {target.shape}")
    diff = pred - target
    if reduction == "sum":
        return float(np.sum(diff.astype(np.float64) ** 2)), 2.0 * diff
    if reduction == "mean":
        return float(np.mean(diff.astype(np.float64) ** 2)), diff * diff.dtype.type(2.0 / diff.size)
    raise ValueError(f"mse_loss: unknown reduction {reduction!r}")


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    m: list
    v: list
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params, **kw):
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params], **kw)


def adam_step(params, grads, state, lr=1e-6, weight_decay=1e-2, decoupled=True):
    """One in-place Adam update of every array in ``params``.

    With ``decoupled`` the decay is applied directly to the parameters
    (``p -= lr * wd * p``) before the moment update; otherwise it is folded
    into the gradient as L2 regularisation.
    """
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ShapeError("adam_step: params, grads and state differ in length")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1 ** t
    bc2 = 1.0 - b2 ** t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape or m.shape != p.shape:
            raise ShapeError(f"adam_step: parameter {p.shape} vs gradient {g.shape}")
        if weight_decay:
            if decoupled:
                p -= p.dtype.type(lr * weight_decay) * p
            else:
                g = g + p.dtype.type(weight_decay) * p
        m *= p.dtype.type(b1)
        m += p.dtype.type(1.0 - b1) * g
        v *= p.dtype.type(b2)
        v += p.dtype.type(1.0 - b2) * (g * g)
        p -= p.dtype.type(lr / bc1) * m / (np.sqrt(v / p.dtype.type(bc2)) + p.dtype.type(state.eps))
    return params, state
