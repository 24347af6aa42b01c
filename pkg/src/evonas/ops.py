"""Network primitives with hand-written backward passes.

All activations are NCHW. Convolutions use "same" padding ``(k - 1) // 2``;
transposed convolutions use output padding ``stride - 1`` so a stride-2
transposed conv exactly doubles the spatial size.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import NumericError, ShapeError, Tensor, make

__all__ = [
    "ConvSpec", "conv2d", "conv_output_hw",
    "ActivationKind", "activation", "relu", "prelu", "elu", "selu", "tanh", "sigmoid",
    "softmax_channels",
    "NormKind", "normalize", "batch_norm", "instance_norm", "local_response_norm",
    "max_pool_2x2", "upsample_nn_2x", "adaptive_avg_pool3d", "pool_matrix",
    "ConnectiveKind", "connective", "concat_channels", "mse_loss",
]


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ConvSpec:
    in_channels: int
    out_channels: int
    kernel: int = 3
    stride: int = 1
    transposed: bool = False
    separable_depthwise: bool = False
    weight_norm: bool = False
    bias: bool = True

    def __post_init__(self):
        if self.kernel not in (1, 3, 5):
            raise ShapeError(f"kernel must be 1, 3 or 5, got {self.kernel}")
        if self.stride not in (1, 2):
            raise ShapeError(f"stride must be 1 or 2, got {self.stride}")
        if self.in_channels < 1 or self.out_channels < 1:
            raise ShapeError("channel counts must be positive")
        if self.separable_depthwise and self.out_channels % self.in_channels:
            raise ShapeError(
                f"depthwise conv needs out_channels ({self.out_channels}) to be a "
                f"multiple of in_channels ({self.in_channels})")

    @property
    def groups(self) -> int:
        return self.in_channels if self.separable_depthwise else 1

    @property
    def padding(self) -> int:
        return (self.kernel - 1) // 2

    @property
    def weight_shape(self) -> tuple[int, int, int, int]:
        k, g = self.kernel, self.groups
        if self.transposed:
            return (self.in_channels, self.out_channels // g, k, k)
        return (self.out_channels, self.in_channels // g, k, k)

    @property
    def fan_in(self) -> int:
        return (self.in_channels // self.groups) * self.kernel * self.kernel

    def parameter_count(self) -> int:
        n = int(np.prod(self.weight_shape))
        if self.bias:
            n += self.out_channels
        if self.weight_norm:
            n += self.out_channels
        return n


def conv_output_hw(h: int, w: int, stride: int, transposed: bool) -> tuple[int, int]:
    if transposed:
        return h * stride, w * stride
    return -(-h // stride), -(-w // stride)


def _im2col(xp: np.ndarray, groups: int, k: int, s: int, ho: int, wo: int) -> np.ndarray:
    """(N, C, Hp, Wp) -> (G, C/G * k * k, N * ho * wo)."""
    n, c = xp.shape[:2]
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::s, ::s][:, :, :ho, :wo]
    win = win.reshape(n, groups, c // groups, ho, wo, k, k)
    cols = win.transpose(1, 2, 5, 6, 0, 3, 4)
    return cols.reshape(groups, (c // groups) * k * k, n * ho * wo)


def _col2im(cols: np.ndarray, shape: tuple[int, ...], groups: int, k: int, s: int,
            ho: int, wo: int) -> np.ndarray:
    """Adjoint of :func:`_im2col`; ``shape`` is the padded (N, C, Hp, Wp)."""
    n, c = shape[:2]
    out = np.zeros(shape, dtype=cols.dtype)
    cols = cols.reshape(groups, c // groups, k, k, n, ho, wo)
    hspan, wspan = s * (ho - 1) + 1, s * (wo - 1) + 1
    for i in range(k):
        for j in range(k):
            patch = cols[:, :, i, j].reshape(c, n, ho, wo).transpose(1, 0, 2, 3)
            out[:, :, i:i + hspan:s, j:j + wspan:s] += patch
    return out


def _weight_normalized(v: Tensor, gain: Tensor, spec: ConvSpec) -> Tensor:
    """g * v / ||v|| with one norm per output filter."""
    if not spec.transposed:
        norm = (v * v).sum(axis=(1, 2, 3), keepdims=True).sqrt()
        return v * (gain.reshape(-1, 1, 1, 1) / norm)
    g = spec.groups
    cin_g, cout_g, k = spec.in_channels // g, spec.out_channels // g, spec.kernel
    v5 = v.reshape(g, cin_g, cout_g, k, k)
    norm = (v5 * v5).sum(axis=(1, 3, 4), keepdims=True).sqrt()
    w5 = v5 * (gain.reshape(g, 1, cout_g, 1, 1) / norm)
    return w5.reshape(spec.weight_shape)


def conv2d(x: Tensor, spec: ConvSpec, weight: Tensor, bias: Tensor | None = None,
           gain: Tensor | None = None) -> Tensor:
    """Regular or transposed 2-D convolution described by ``spec``.

    ``gain`` is the per-filter weight-norm magnitude, required iff
    ``spec.weight_norm``.
    """
    if x.ndim != 4 or x.shape[1] != spec.in_channels:
        raise ShapeError(f"conv expects {spec.in_channels} input channels, got shape {x.shape}")
    if weight.shape != spec.weight_shape:
        raise ShapeError(f"weight shape {weight.shape} != {spec.weight_shape}")
    if not np.all(np.isfinite(weight.data)):
        raise NumericError("non-finite convolution weights")
    if spec.weight_norm:
        if gain is None:
            raise ShapeError("weight-normalised conv needs a gain tensor")
        weight = _weight_normalized(weight, gain, spec)

    y = (_conv_transposed if spec.transposed else _conv_regular)(x, weight, spec)
    if bias is not None:
        y = y + bias.reshape(1, -1, 1, 1)
    return y


def _conv_regular(x: Tensor, w: Tensor, spec: ConvSpec) -> Tensor:
    n, c, h, wd = x.shape
    k, s, p, g = spec.kernel, spec.stride, spec.padding, spec.groups
    ho, wo = conv_output_hw(h, wd, s, False)
    cout = spec.out_channels
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p))) if p else x.data
    cols = _im2col(xp, g, k, s, ho, wo)
    wm = w.data.reshape(g, cout // g, -1)
    out = np.matmul(wm, cols)                                  # (G, cout/G, N*ho*wo)
    y = out.reshape(cout, n, ho, wo).transpose(1, 0, 2, 3)

    def back(gy):
        gm = gy.transpose(1, 0, 2, 3).reshape(g, cout // g, -1)
        gw = np.matmul(gm, cols.transpose(0, 2, 1)).reshape(w.shape)
        gx = None
        if x.requires_grad:
            gcols = np.matmul(wm.transpose(0, 2, 1), gm)
            gxp = _col2im(gcols, xp.shape, g, k, s, ho, wo)
            gx = gxp[:, :, p:p + h, p:p + wd] if p else gxp
        return gx, gw

    return make(np.ascontiguousarray(y), (x, w), back)


def _conv_transposed(x: Tensor, w: Tensor, spec: ConvSpec) -> Tensor:
    n, c, h, wd = x.shape
    k, s, p, g = spec.kernel, spec.stride, spec.padding, spec.groups
    cout = spec.out_channels
    cin_g = c // g
    op = s - 1
    ho, wo = conv_output_hw(h, wd, s, True)
    full = (n, cout, (h - 1) * s + k + op, (wd - 1) * s + k + op)
    # weight (Cin, Cout/G, k, k) -> (G, Cin/G, Cout/G*k*k)
    wm = w.data.reshape(g, cin_g, -1)
    xm = x.data.transpose(1, 0, 2, 3).reshape(g, cin_g, n * h * wd)
    cols = np.matmul(wm.transpose(0, 2, 1), xm)                # (G, Cout/G*k*k, N*h*w)
    yfull = _col2im(cols, full, g, k, s, h, wd)
    y = yfull[:, :, p:p + ho, p:p + wo]

    def back(gy):
        gfull = np.zeros(full, dtype=gy.dtype)
        gfull[:, :, p:p + ho, p:p + wo] = gy
        gcols = _im2col(gfull, g, k, s, h, wd)                 # (G, Cout/G*k*k, N*h*w)
        gw = np.matmul(xm, gcols.transpose(0, 2, 1)).reshape(w.shape)
        gx = None
        if x.requires_grad:
            gxm = np.matmul(wm, gcols)                          # (G, Cin/G, N*h*w)
            gx = gxm.reshape(c, n, h, wd).transpose(1, 0, 2, 3)
        return gx, gw

    return make(np.ascontiguousarray(y), (x, w), back)


# ---------------------------------------------------------------------------
# activations
# ---------------------------------------------------------------------------

class ActivationKind(str, Enum):
    NONE = "None"
    RELU = "ReLU"
    PRELU = "PReLU"
    ELU = "ELU"
    SELU = "SELU"
    TANH = "Tanh"
    SIGMOID = "Sigmoid"
    SOFTMAX = "SoftmaxChannels"


SELU_ALPHA = 1.6732632423543772848170429916717
SELU_SCALE = 1.0507009873554804934193349852946


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return make(x.data * mask, (x,), lambda g: (g * mask,))


def prelu(x: Tensor, slope: Tensor) -> Tensor:
    """Leaky ReLU with one learnable negative slope shared by all channels."""
    a = slope.data.reshape(())
    pos = x.data > 0
    y = np.where(pos, x.data, a * x.data)

    def back(g):
        gx = g * np.where(pos, 1.0, a).astype(g.dtype)
        ga = np.sum(g * np.where(pos, 0.0, x.data)).reshape(slope.shape).astype(slope.dtype)
        return gx, ga

    return make(y, (x, slope), back)


def elu(x: Tensor, alpha: float = 1.0) -> Tensor:
    pos = x.data > 0
    neg = alpha * np.expm1(np.minimum(x.data, 0))
    y = np.where(pos, x.data, neg)
    return make(y, (x,), lambda g: (g * np.where(pos, 1.0, neg + alpha).astype(g.dtype),))


def selu(x: Tensor) -> Tensor:
    pos = x.data > 0
    neg = SELU_ALPHA * np.expm1(np.minimum(x.data, 0))
    y = SELU_SCALE * np.where(pos, x.data, neg)
    dy = SELU_SCALE * np.where(pos, 1.0, neg + SELU_ALPHA)
    return make(y.astype(x.dtype), (x,), lambda g: (g * dy.astype(g.dtype),))


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return make(y, (x,), lambda g: (g * (1 - y * y),))


def sigmoid(x: Tensor) -> Tensor:
    # split by sign to avoid overflow in exp
    d = x.data
    e = np.exp(-np.abs(d))
    y = np.where(d >= 0, 1 / (1 + e), e / (1 + e)).astype(d.dtype)
    return make(y, (x,), lambda g: (g * y * (1 - y),))


def softmax_channels(x: Tensor) -> Tensor:
    """Softmax across the channel axis at every pixel."""
    z = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=1, keepdims=True)
    return make(y, (x,), lambda g: (y * (g - np.sum(g * y, axis=1, keepdims=True)),))


def activation(x: Tensor, kind: ActivationKind | str, slope: Tensor | None = None) -> Tensor:
    kind = ActivationKind(kind)
    if kind is ActivationKind.NONE:
        return x
    if kind is ActivationKind.PRELU:
        if slope is None:
            raise ShapeError("PReLU needs a slope parameter")
        return prelu(x, slope)
    return {
        ActivationKind.RELU: relu,
        ActivationKind.ELU: elu,
        ActivationKind.SELU: selu,
        ActivationKind.TANH: tanh,
        ActivationKind.SIGMOID: sigmoid,
        ActivationKind.SOFTMAX: softmax_channels,
    }[kind](x)


# ---------------------------------------------------------------------------
# normalisation
# ---------------------------------------------------------------------------

class NormKind(str, Enum):
    NONE = "None"
    BATCH = "BatchNorm"
    INSTANCE = "InstanceNorm"
    LRN = "LocalResponseNorm"
    SOFTMAX = "SoftmaxChannels"


BN_EPS = 1e-5
BN_MOMENTUM = 0.1
LRN_ALPHA, LRN_BETA, LRN_K = 1e-4, 0.75, 1.0


def _standardize(x: np.ndarray, axes: tuple[int, ...], eps: float):
    mean = x.mean(axis=axes, keepdims=True)
    xc = x - mean
    var = np.mean(xc * xc, axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    return xc * inv, inv, mean, var


def _standardize_backward(gxhat, xhat, inv, axes):
    m = np.prod([xhat.shape[a] for a in axes])
    s1 = gxhat.sum(axis=axes, keepdims=True)
    s2 = np.sum(gxhat * xhat, axis=axes, keepdims=True)
    return inv * (gxhat - s1 / m - xhat * s2 / m)


def batch_norm(x: Tensor, weight: Tensor, bias: Tensor, running_mean: np.ndarray,
               running_var: np.ndarray, training: bool,
               momentum: float = BN_MOMENTUM, eps: float = BN_EPS) -> Tensor:
    """Per-channel batch normalisation; updates running stats in place when training."""
    c = x.shape[1]
    w4, b4 = weight.data.reshape(1, c, 1, 1), bias.data.reshape(1, c, 1, 1)
    if training:
        axes = (0, 2, 3)
        xhat, inv, mean, var = _standardize(x.data, axes, eps)
        m = x.data.size // c
        unbiased = var.reshape(c) * (m / (m - 1) if m > 1 else 1.0)
        running_mean *= 1 - momentum
        running_mean += momentum * mean.reshape(c)
        running_var *= 1 - momentum
        running_var += momentum * unbiased

        def back(g):
            gw = np.sum(g * xhat, axis=axes).reshape(weight.shape)
            gb = g.sum(axis=axes).reshape(bias.shape)
            gx = _standardize_backward(g * w4, xhat, inv, axes) if x.requires_grad else None
            return gx, gw, gb
    else:
        inv = (1.0 / np.sqrt(running_var + eps)).reshape(1, c, 1, 1).astype(x.dtype)
        xhat = (x.data - running_mean.reshape(1, c, 1, 1)) * inv

        def back(g):
            gw = np.sum(g * xhat, axis=(0, 2, 3)).reshape(weight.shape)
            gb = g.sum(axis=(0, 2, 3)).reshape(bias.shape)
            return g * w4 * inv, gw, gb

    return make((xhat * w4 + b4).astype(x.dtype), (x, weight, bias), back)


def instance_norm(x: Tensor, eps: float = BN_EPS) -> Tensor:
    """Per-sample, per-channel standardisation over (h, w); no affine parameters."""
    axes = (2, 3)
    xhat, inv, _, _ = _standardize(x.data, axes, eps)
    return make(xhat.astype(x.dtype), (x,),
                lambda g: (_standardize_backward(g, xhat, inv, axes),))


def _channel_window_sum(a: np.ndarray, before: int, after: int) -> np.ndarray:
    """out[:, c] = sum of a[:, c - before : c + after + 1] (zero outside)."""
    c = a.shape[1]
    pad = np.zeros((a.shape[0], 1) + a.shape[2:], dtype=a.dtype)
    cs = np.concatenate([pad, np.cumsum(a, axis=1)], axis=1)   # cs[:, j] = sum a[:, :j]
    hi = np.minimum(np.arange(c) + after + 1, c)
    lo = np.maximum(np.arange(c) - before, 0)
    return cs[:, hi] - cs[:, lo]


def local_response_norm(x: Tensor, size: int | None = None, alpha: float = LRN_ALPHA,
                        beta: float = LRN_BETA, k: float = LRN_K) -> Tensor:
    """Cross-channel LRN; ``size`` defaults to the channel count."""
    size = x.shape[1] if size is None else size
    before, after = size // 2, (size - 1) // 2
    a = x.data
    denom = k + (alpha / size) * _channel_window_sum(a * a, before, after)
    scale = denom ** -beta
    y = a * scale

    def back(g):
        t = g * a * scale / denom
        # adjoint of the window sum swaps before/after
        back_sum = _channel_window_sum(t, after, before)
        return (g * scale - (2 * alpha * beta / size) * a * back_sum,)

    return make(y.astype(x.dtype), (x,), back)


def normalize(x: Tensor, kind: NormKind | str, params: dict | None = None,
              running_stats: dict | None = None, training: bool = False) -> Tensor:
    """Dispatch on the normalisation kind.

    ``params`` holds ``weight``/``bias`` tensors for batch norm and
    ``running_stats`` its ``mean``/``var`` arrays.
    """
    kind = NormKind(kind)
    if kind is NormKind.NONE:
        return x
    if kind is NormKind.BATCH:
        if params is None or running_stats is None:
            raise ShapeError("batch norm needs affine params and running stats")
        if params["weight"].size != x.shape[1]:
            raise ShapeError("batch norm params do not match channel count")
        return batch_norm(x, params["weight"], params["bias"],
                          running_stats["mean"], running_stats["var"], training)
    if kind is NormKind.INSTANCE:
        return instance_norm(x)
    if kind is NormKind.LRN:
        return local_response_norm(x)
    return softmax_channels(x)


# ---------------------------------------------------------------------------
# resolution-changing primitives
# ---------------------------------------------------------------------------

def max_pool_2x2(x: Tensor) -> Tensor:
    n, c, h, w = x.shape
    if h < 2 or w < 2:
        raise ShapeError(f"2x2 max pooling needs h, w >= 2, got {(h, w)}")
    ho, wo = h // 2, w // 2
    blocks = x.data[:, :, :2 * ho, :2 * wo].reshape(n, c, ho, 2, wo, 2)
    blocks = blocks.transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho, wo, 4)
    idx = blocks.argmax(axis=-1)
    y = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]

    def back(g):
        gb = np.zeros((n, c, ho, wo, 4), dtype=g.dtype)
        np.put_along_axis(gb, idx[..., None], g[..., None], axis=-1)
        gb = gb.reshape(n, c, ho, wo, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, 2 * ho, 2 * wo)
        gx = np.zeros(x.shape, dtype=g.dtype)
        gx[:, :, :2 * ho, :2 * wo] = gb
        return (gx,)

    return make(y, (x,), back)


def upsample_nn_2x(x: Tensor) -> Tensor:
    n, c, h, w = x.shape
    y = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)
    return make(y, (x,), lambda g: (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),))


def pool_matrix(n_in: int, n_out: int, dtype=np.float64) -> np.ndarray:
    """Row i averages input window [floor(i*In/Out), ceil((i+1)*In/Out)).

    When ``n_out > n_in`` the row instead selects input ``floor(i*In/Out)``
    (nearest-neighbour enlargement).
    """
    m = np.zeros((n_out, n_in), dtype=dtype)
    for i in range(n_out):
        lo = (i * n_in) // n_out
        if n_out > n_in:
            m[i, lo] = 1.0
        else:
            hi = -(-((i + 1) * n_in) // n_out)
            m[i, lo:hi] = 1.0 / (hi - lo)
    return m


def adaptive_avg_pool3d(x: Tensor, target: tuple[int, int, int]) -> Tensor:
    """Resize (C, H, W) of an NCHW tensor to ``target`` by adaptive averaging."""
    tc, th, tw = (int(t) for t in target)
    if min(tc, th, tw) < 1:
        raise ShapeError(f"adaptive pool target must be positive, got {target}")
    _, c, h, w = x.shape
    out = x
    if c != tc:
        pc = pool_matrix(c, tc, x.dtype)
        out = _apply_axis(out, pc, 1)
    if h != th:
        out = _apply_axis(out, pool_matrix(h, th, x.dtype), 2)
    if w != tw:
        out = _apply_axis(out, pool_matrix(w, tw, x.dtype), 3)
    return out


def _apply_axis(x: Tensor, m: np.ndarray, axis: int) -> Tensor:
    """Contract ``x`` along ``axis`` with matrix ``m`` (out x in)."""
    def mul(a, mat):
        moved = np.moveaxis(a, axis, -1)
        return np.moveaxis(moved @ mat.T, -1, axis)

    y = mul(x.data, m)
    return make(np.ascontiguousarray(y), (x,), lambda g: (np.ascontiguousarray(mul(g, m.T)),))


# ---------------------------------------------------------------------------
# connectives and loss
# ---------------------------------------------------------------------------

class ConnectiveKind(str, Enum):
    CONCAT = "Concat"
    ADD = "Add"
    MUL = "Mul"


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    ca = a.shape[1]
    y = np.concatenate([a.data, b.data], axis=1)
    return make(y, (a, b), lambda g: (g[:, :ca], g[:, ca:]))


def connective(kind: ConnectiveKind | str, a: Tensor, b: Tensor, resize_target: str = "First") -> Tensor:
    """Join two tensors, coercing the non-target one with adaptive pooling.

    Concat only coerces (h, w) and stacks channels as ``[a, b]``.
    """
    kind = ConnectiveKind(kind)
    first = str(getattr(resize_target, "value", resize_target)) == "First"
    target, other = (a, b) if first else (b, a)
    _, tc, th, tw = target.shape
    if kind is ConnectiveKind.CONCAT:
        other = adaptive_avg_pool3d(other, (other.shape[1], th, tw))
    else:
        other = adaptive_avg_pool3d(other, (tc, th, tw))
    a2, b2 = (target, other) if first else (other, target)
    if kind is ConnectiveKind.CONCAT:
        return concat_channels(a2, b2)
    if kind is ConnectiveKind.ADD:
        return a2 + b2
    return a2 * b2


def mse_loss(pred: Tensor, target) -> Tensor:
    t = target.data if isinstance(target, Tensor) else np.asarray(target)
    if pred.shape != t.shape:
        raise ShapeError(f"mse_loss shape mismatch {pred.shape} vs {t.shape}")
    diff = pred.data - t
    n = diff.size
    val = np.asarray(np.mean(diff * diff, dtype=np.float64), dtype=pred.dtype)
    return make(val, (pred,), lambda g: (g * (2.0 / n) * diff,))

