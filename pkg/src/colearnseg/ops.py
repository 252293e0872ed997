"""Differentiable layer primitives over :class:`~colearnseg.tensor.Tensor`.

Convolutions run as im2col + GEMM with float32 storage; the input gradient of
a convolution is itself a convolution with the spatially flipped, channel
transposed kernel, so every heavy path stays on the BLAS. Backward closures
may return views; the engine copies on first accumulation.

Convention: convolution means cross-correlation (no kernel flip). With learned
kernels the two parameterizations are equivalent.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError, DegenerateVarianceError, DimensionError
from .tensor import DTYPE, Parameter, Tensor, grad_enabled

# ---------------------------------------------------------------------------
# numpy-level convolution helpers (shared by conv2d and conv3d_modality)
# ---------------------------------------------------------------------------


def _im2col(xd: np.ndarray, k: int, pad: int, stride: int) -> np.ndarray:
    """[b,h,w,cin] -> [b,oh,ow,k*k*cin], patch layout matching w.reshape(k*k*cin, cout)."""
    b, h, w, cin = xd.shape
    if pad:
        xd = np.pad(xd, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    win = sliding_window_view(xd, (k, k), axis=(1, 2))  # [b, oh', ow', cin, k, k]
    if stride > 1:
        win = win[:, ::stride, ::stride]
    oh, ow = win.shape[1], win.shape[2]
    cols = win.transpose(0, 1, 2, 4, 5, 3).reshape(b, oh, ow, k * k * cin)
    return np.ascontiguousarray(cols, dtype=DTYPE)


def _conv_forward(xd, wd, stride, pad):
    b = xd.shape[0]
    k, _, cin, cout = wd.shape
    cols = _im2col(xd, k, pad, stride)
    oh, ow = cols.shape[1], cols.shape[2]
    out = cols.reshape(b * oh * ow, k * k * cin) @ wd.reshape(k * k * cin, cout)
    return out.reshape(b, oh, ow, cout), cols


def _dilate(g: np.ndarray, stride: int) -> np.ndarray:
    if stride == 1:
        return g
    b, oh, ow, c = g.shape
    out = np.zeros((b, (oh - 1) * stride + 1, (ow - 1) * stride + 1, c), dtype=g.dtype)
    out[:, ::stride, ::stride] = g
    return out


def _conv_input_grad(g, wd, x_shape, stride, pad):
    """dx via correlation of the (dilated) output grad with the flipped kernel."""
    k = wd.shape[0]
    wt = np.ascontiguousarray(wd[::-1, ::-1].transpose(0, 1, 3, 2))  # [k,k,cout,cin]
    dx, _ = _conv_forward(_dilate(g, stride), wt, 1, k - 1 - pad)
    assert dx.shape == x_shape
    return dx


def _conv_weight_grad(g, cols, k, cin, cout):
    b, oh, ow, _ = g.shape
    dw = cols.reshape(b * oh * ow, k * k * cin).T @ g.reshape(b * oh * ow, cout)
    return dw.reshape(k, k, cin, cout)


def _resolve_padding(padding, k):
    if padding == "same":
        return (k - 1) // 2
    if padding == "valid":
        return 0
    raise ConfigError(f"padding must be 'same' or 'valid', got {padding!r}")


# ---------------------------------------------------------------------------
# layer operations
# ---------------------------------------------------------------------------


def conv2d(x: Tensor, weights: Tensor, bias: Tensor, stride: int = 1,
           padding: str = "same") -> Tensor:
    """2D cross-correlation, channels-last: x[b,h,w,cin] * w[k,k,cin,cout] + b."""
    if x.ndim != 4:
        raise DimensionError("conv2d input must be [b,h,w,c]", got=x.shape)
    if weights.ndim != 4 or weights.shape[0] != weights.shape[1]:
        raise DimensionError("conv2d kernel must be [k,k,cin,cout]", got=weights.shape)
    k, _, cin, cout = weights.shape
    if k % 2 == 0:
        raise ConfigError(f"kernel size must be odd, got {k}")
    if stride < 1:
        raise ConfigError(f"stride must be >= 1, got {stride}")
    if x.shape[3] != cin:
        raise DimensionError("input channels do not match kernel", expected=cin, got=x.shape[3])
    if bias.shape != (cout,):
        raise DimensionError("bias shape", expected=(cout,), got=bias.shape)
    pad = _resolve_padding(padding, k)
    h, w = x.shape[1], x.shape[2]
    if pad == 0 and (h < k or w < k):
        raise DimensionError("valid padding needs spatial extents >= kernel", expected=k, got=(h, w))
    if stride > 1 and ((h + 2 * pad - k) % stride or (w + 2 * pad - k) % stride):
        raise DimensionError(
            f"spatial extents {h}x{w} not compatible with stride {stride} and kernel {k}")

    out, cols = _conv_forward(x.data, weights.data, stride, pad)
    out += bias.data
    if not grad_enabled():
        return Tensor(out)

    x_shape = x.data.shape
    wd = weights.data
    need_x, need_w = x.requires_grad, weights.requires_grad
    if not need_w:
        cols = None

    def _bw(g):
        dx = _conv_input_grad(g, wd, x_shape, stride, pad) if need_x else None
        dw = _conv_weight_grad(g, cols, k, cin, cout) if need_w else None
        db = g.sum(axis=(0, 1, 2))
        return dx, dw, db

    return Tensor(out, parents=(x, weights, bias), backward=_bw)


def conv3d_modality(x: Tensor, weights: Tensor, bias: Tensor) -> Tensor:
    """3D convolution across the stacked modality axis, contracting it away.

    x[b,h,w,m,c] * w[k,k,m,c,cout] -> [b,h,w,cout] with 'same' spatial padding
    and no padding on the modality axis, which has extent m == 2 and is fully
    summed out together with the channels. Equivalent to a 2D convolution over
    the (modality, channel) axes flattened modality-major.
    """
    if x.ndim != 5:
        raise DimensionError("conv3d_modality input must be [b,h,w,m,c]", got=x.shape)
    if weights.ndim != 5:
        raise DimensionError("conv3d_modality kernel must be [k,k,m,c,cout]", got=weights.shape)
    b, h, w, m, c = x.shape
    k, k2, mw, cw, cout = weights.shape
    if k != k2:
        raise DimensionError("conv3d_modality spatial kernel must be square", got=(k, k2))
    if m != 2 or mw != m:
        raise DimensionError("modality extent must be 2 on input and kernel",
                             expected=2, got=(m, mw))
    if cw != c:
        raise DimensionError("kernel channel extent", expected=c, got=cw)
    if bias.shape != (cout,):
        raise DimensionError("bias shape", expected=(cout,), got=bias.shape)

    pad = (k - 1) // 2
    xd2 = x.data.reshape(b, h, w, m * c)          # modality-major flatten
    wd2 = weights.data.reshape(k, k2, m * c, cout)
    out, cols = _conv_forward(xd2, wd2, 1, pad)
    out += bias.data
    if not grad_enabled():
        return Tensor(out)

    need_x, need_w = x.requires_grad, weights.requires_grad
    if not need_w:
        cols = None

    def _bw(g):
        dx = dw = None
        if need_x:
            dx = _conv_input_grad(g, wd2, xd2.shape, 1, pad).reshape(b, h, w, m, c)
        if need_w:
            dw = _conv_weight_grad(g, cols, k, m * c, cout).reshape(k, k, m, c, cout)
        db = g.sum(axis=(0, 1, 2))
        return dx, dw, db

    return Tensor(out, parents=(x, weights, bias), backward=_bw)


def leaky_relu(x: Tensor, alpha: float) -> Tensor:
    """max(x, alpha*x); the subgradient at 0 is alpha (the nonpositive branch)."""
    if not (0.0 < alpha < 1.0):
        raise ConfigError(f"leaky_relu alpha must lie in (0, 1), got {alpha}")
    xd = x.data
    out = np.where(xd > 0, xd, np.float32(alpha) * xd)
    if not grad_enabled():
        return Tensor(out)

    def _bw(g):
        return (np.where(xd > 0, g, np.float32(alpha) * g),)

    return Tensor(out, parents=(x,), backward=_bw)


class BatchNormState:
    """Per-channel batch normalization state: affine parameters plus running stats."""

    def __init__(self, channels: int, name: str, momentum: float = 0.9,
                 epsilon: float = 1e-5):
        if not (0.0 < momentum < 1.0):
            raise ConfigError(f"batch norm momentum must lie in (0,1), got {momentum}")
        self.gamma = Parameter(np.ones(channels, dtype=DTYPE), f"{name}/gamma", kind="gain")
        self.beta = Parameter(np.zeros(channels, dtype=DTYPE), f"{name}/beta", kind="shift")
        self.running_mean = np.zeros(channels, dtype=DTYPE)
        self.running_var = np.ones(channels, dtype=DTYPE)
        self.momentum = momentum
        self.epsilon = epsilon
        self.mode = "train"

    @property
    def channels(self) -> int:
        return self.gamma.shape[0]


def batch_norm(x: Tensor, state: BatchNormState) -> Tensor:
    """Per-channel standardization over (batch, height, width), then affine.

    Training mode uses batch statistics and updates the running moments by
    exponential moving average; inference mode uses the running moments only.
    """
    if x.ndim != 4:
        raise DimensionError("batch_norm input must be [b,h,w,c]", got=x.shape)
    if x.shape[3] != state.channels:
        raise DimensionError("batch_norm channels", expected=state.channels, got=x.shape[3])
    xd = x.data
    gamma, beta = state.gamma, state.beta
    eps = np.float32(state.epsilon)

    if state.mode == "train":
        n = xd.shape[0] * xd.shape[1] * xd.shape[2]
        if n < 2:
            raise DegenerateVarianceError(
                "batch_norm training mode needs at least 2 elements per channel")
        mu = xd.mean(axis=(0, 1, 2))
        var = xd.var(axis=(0, 1, 2))
        m = np.float32(state.momentum)
        state.running_mean = m * state.running_mean + (1 - m) * mu
        state.running_var = m * state.running_var + (1 - m) * var
    else:
        mu = state.running_mean
        var = state.running_var

    inv = np.float32(1.0) / np.sqrt(var + eps)
    xhat = (xd - mu) * inv
    out = gamma.data * xhat + beta.data
    if not grad_enabled():
        return Tensor(out)

    training = state.mode == "train"
    need_x = x.requires_grad

    def _bw(g):
        dgamma = (g * xhat).sum(axis=(0, 1, 2))
        dbeta = g.sum(axis=(0, 1, 2))
        if not need_x:
            return None, dgamma, dbeta
        scale = gamma.data * inv
        if training:
            n = g.shape[0] * g.shape[1] * g.shape[2]
            dx = scale * (g - dbeta / n - xhat * (dgamma / n))
        else:
            dx = scale * g
        return dx, dgamma, dbeta

    return Tensor(out, parents=(x, gamma, beta), backward=_bw)


def max_pool2d(x: Tensor, size: int = 2, stride: int = 2) -> Tensor:
    """2x2 window maximum with stride 2; gradient routes to the first argmax."""
    if size != 2 or stride != 2:
        raise ConfigError("max_pool2d supports size=2, stride=2 only")
    if x.ndim != 4:
        raise DimensionError("max_pool2d input must be [b,h,w,c]", got=x.shape)
    b, h, w, c = x.shape
    if h % 2 or w % 2:
        raise DimensionError("max_pool2d needs even spatial extents", got=(h, w))
    hh, ww = h // 2, w // 2
    win = x.data.reshape(b, hh, 2, ww, 2, c).transpose(0, 1, 3, 2, 4, 5).reshape(b, hh, ww, 4, c)
    idx = win.argmax(axis=3)  # argmax takes the first maximum: deterministic tie-break
    out = np.take_along_axis(win, idx[:, :, :, None, :], axis=3)[:, :, :, 0, :]
    if not grad_enabled():
        return Tensor(out)

    def _bw(g):
        dwin = np.zeros((b, hh, ww, 4, c), dtype=DTYPE)
        np.put_along_axis(dwin, idx[:, :, :, None, :], g[:, :, :, None, :], axis=3)
        return (dwin.reshape(b, hh, ww, 2, 2, c).transpose(0, 1, 3, 2, 4, 5).reshape(b, h, w, c),)

    return Tensor(out, parents=(x,), backward=_bw)


def upsample_nearest(x: Tensor) -> Tensor:
    """Replicate every pixel into a 2x2 block."""
    if x.ndim != 4:
        raise DimensionError("upsample_nearest input must be [b,h,w,c]", got=x.shape)
    b, h, w, c = x.shape
    out = x.data.repeat(2, axis=1).repeat(2, axis=2)
    if not grad_enabled():
        return Tensor(out)

    def _bw(g):
        return (g.reshape(b, h, 2, w, 2, c).sum(axis=(2, 4)),)

    return Tensor(out, parents=(x,), backward=_bw)


def stack_modality(a: Tensor, b: Tensor) -> Tensor:
    """Insert a modality axis: CT at index 0, PET at index 1 -> [b,h,w,2,c]."""
    if a.shape != b.shape:
        raise DimensionError("stack_modality needs matching shapes", expected=a.shape, got=b.shape)
    out = np.stack([a.data, b.data], axis=3)
    if not grad_enabled():
        return Tensor(out)

    def _bw(g):
        return g[:, :, :, 0, :], g[:, :, :, 1, :]

    return Tensor(out, parents=(a, b), backward=_bw)


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    """Append along the channel axis, first argument's block first."""
    if a.ndim != 4 or b.ndim != 4 or a.shape[:3] != b.shape[:3]:
        raise DimensionError("concat_channels needs matching batch/spatial extents",
                             expected=a.shape[:3], got=b.shape[:3])
    c1 = a.shape[3]
    out = np.concatenate([a.data, b.data], axis=3)
    if not grad_enabled():
        return Tensor(out)

    def _bw(g):
        return g[:, :, :, :c1], g[:, :, :, c1:]

    return Tensor(out, parents=(a, b), backward=_bw)


def elementwise_mul(a: Tensor, b: Tensor) -> Tensor:
    """Hadamard product of same-shape tensors."""
    if a.shape != b.shape:
        raise DimensionError("elementwise_mul needs identical shapes",
                             expected=a.shape, got=b.shape)
    out = a.data * b.data
    if not grad_enabled():
        return Tensor(out)

    ad, bd = a.data, b.data

    def _bw(g):
        return g * bd, g * ad

    return Tensor(out, parents=(a, b), backward=_bw)


def softmax_pixelwise(o: Tensor) -> Tensor:
    """Per-pixel softmax over the trailing class axis, max-shifted for stability."""
    od = o.data
    shifted = od - od.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=-1, keepdims=True)
    if not grad_enabled():
        return Tensor(p)

    def _bw(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return Tensor(p, parents=(o,), backward=_bw)


# ---------------------------------------------------------------------------
# scalar reductions and glue used by the loss
# ---------------------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError("add needs identical shapes", expected=a.shape, got=b.shape)
    out = a.data + b.data
    if not grad_enabled():
        return Tensor(out)
    return Tensor(out, parents=(a, b), backward=lambda g: (g, g))


def scale(x: Tensor, factor: float) -> Tensor:
    f = np.float32(factor)
    out = f * x.data
    if not grad_enabled():
        return Tensor(out)
    return Tensor(out, parents=(x,), backward=lambda g: (f * g,))


def tsum(x: Tensor) -> Tensor:
    out = x.data.sum()
    if not grad_enabled():
        return Tensor(out)
    shape = x.shape
    return Tensor(out, parents=(x,), backward=lambda g: (np.full(shape, g, dtype=DTYPE),))


def sq_sum(x: Tensor) -> Tensor:
    """Sum of squared entries, the building block of the L2 penalty."""
    xd = x.data
    out = (xd.astype(np.float64) ** 2).sum().astype(DTYPE)
    if not grad_enabled():
        return Tensor(out)
    return Tensor(out, parents=(x,), backward=lambda g: (np.float32(2.0) * g * xd,))
