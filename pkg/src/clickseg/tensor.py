"""Dense tensors with tape-based reverse-mode differentiation.

Image ops use the NCHW layout. float32 is the working precision for
training and inference, float64 is reserved for gradient verification,
and int8 is storage-only (never differentiable). Buffers are contiguous
row-major numpy arrays.
"""
from __future__ import annotations

import contextlib
import math

import numpy as np

FLOAT_DTYPES = (np.float32, np.float64)
SUPPORTED_DTYPES = (np.float32, np.float64, np.int8)


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class NumericError(ArithmeticError):
    """Non-finite values or degenerate statistics encountered."""


def make_rng(seed: int) -> np.random.Generator:
    """PCG64 generator; identical seeds give identical streams everywhere."""
    return np.random.Generator(np.random.PCG64(int(seed)))


# --------------------------------------------------------------------------
# Tape
# --------------------------------------------------------------------------

_grad_enabled = True
_tape: list = []


class _Node:
    __slots__ = ("out", "backward")

    def __init__(self, out, backward):
        self.out = out
        self.backward = backward


def _record(out: "Tensor", backward) -> None:
    if out.requires_grad:
        _tape.append(_Node(out, backward))


def reset_tape() -> None:
    """Drop all recorded operations (start of a training step)."""
    _tape.clear()


def tape_size() -> int:
    return len(_tape)


@contextlib.contextmanager
def no_grad():
    """Disable recording; outputs created inside never require grad."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """N-dimensional value with an optional gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, dtype=None, requires_grad: bool = False):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype)
        elif not (isinstance(data, np.ndarray) and arr.dtype in SUPPORTED_DTYPES):
            arr = arr.astype(np.float32)
        if arr.dtype not in SUPPORTED_DTYPES:
            raise TypeError(f"unsupported dtype {arr.dtype}")
        if arr.dtype == np.int8 and requires_grad:
            raise TypeError("int8 tensors cannot take part in gradient computation")
        self.data = np.ascontiguousarray(arr)
        self.grad = None
        self.requires_grad = bool(requires_grad and _grad_enabled)

    # -- basics -----------------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate_grad(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    def backward(self, grad=None) -> None:
        """Reverse sweep over the tape starting from this tensor.

        With no argument the tensor must be scalar and is seeded with 1.
        """
        if grad is None:
            if self.data.size != 1:
                raise ShapeError("backward() without a seed needs a scalar tensor")
            grad = np.ones_like(self.data)
        self.grad = np.array(grad, dtype=self.data.dtype, copy=True)
        if self.grad.shape != self.data.shape:
            raise ShapeError("seed gradient shape must match the tensor shape")
        for node in reversed(_tape):
            if node.out.grad is not None:
                node.backward(node.out.grad)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype.name}, grad={'yes' if self.requires_grad else 'no'})"

    # arithmetic sugar, defined by the module-level ops below
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return sub(self, other)

    def __neg__(self):
        return neg(self)

    def __truediv__(self, other):
        return div(self, other)

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.data.dtype))


def _check_float(*ts: Tensor) -> None:
    for t in ts:
        if t.data.dtype == np.int8:
            raise TypeError("int8 tensors are storage-only; cast before computing")


def _result(data: np.ndarray, *parents: Tensor) -> Tensor:
    req = _grad_enabled and any(p.requires_grad for p in parents)
    out = Tensor.__new__(Tensor)
    out.data = np.ascontiguousarray(data)
    out.grad = None
    out.requires_grad = req
    return out


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum gradient over axes that were broadcast in the forward pass."""
    if g.shape == tuple(shape):
        return g
    nd = g.ndim - len(shape)
    if nd > 0:
        g = g.sum(axis=tuple(range(nd)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# --------------------------------------------------------------------------
# Elementwise and reduction ops
# --------------------------------------------------------------------------

def add(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a)
    _check_float(a, b)
    out = _result(a.data + b.data, a, b)

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(g, b.data.shape))

    _record(out, backward)
    return out


def sub(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a)
    _check_float(a, b)
    out = _result(a.data - b.data, a, b)

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(-g, b.data.shape))

    _record(out, backward)
    return out


def neg(a: Tensor) -> Tensor:
    _check_float(a)
    out = _result(-a.data, a)

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(-g)

    _record(out, backward)
    return out


def mul(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a)
    _check_float(a, b)
    out = _result(a.data * b.data, a, b)

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(g * a.data, b.data.shape))

    _record(out, backward)
    return out


def div(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a)
    _check_float(a, b)
    out = _result(a.data / b.data, a, b)

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g / b.data, a.data.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    _record(out, backward)
    return out


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    _check_float(a)
    out = _result(a.data.sum(axis=axis, keepdims=keepdims), a)

    def backward(g):
        if not a.requires_grad:
            return
        if axis is None:
            a.accumulate_grad(np.broadcast_to(g, a.data.shape))
        else:
            ge = g if keepdims else np.expand_dims(g, axis)
            a.accumulate_grad(np.broadcast_to(ge, a.data.shape))

    _record(out, backward)
    return out


def tmean(a: Tensor) -> Tensor:
    return mul(tsum(a), 1.0 / a.data.size)


def relu(a: Tensor) -> Tensor:
    _check_float(a)
    out = _result(np.maximum(a.data, 0), a)

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(g * (a.data > 0))

    _record(out, backward)
    return out


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    """tanh-form GELU; its own derivative is used in the reverse pass."""
    _check_float(a)
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x ** 3)
    th = np.tanh(inner)
    out = _result(0.5 * x * (1.0 + th), a)

    def backward(g):
        if a.requires_grad:
            sech2 = 1.0 - th * th
            d = 0.5 * (1.0 + th) + 0.5 * x * sech2 * _GELU_C * (1.0 + 3 * 0.044715 * x ** 2)
            a.accumulate_grad(g * d)

    _record(out, backward)
    return out


def sigmoid(a: Tensor) -> Tensor:
    _check_float(a)
    s = _stable_sigmoid(a.data)
    out = _result(s, a)

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(g * s * (1.0 - s))

    _record(out, backward)
    return out


def _stable_sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    _check_float(a)
    if a.data.shape[axis] == 0:
        raise ShapeError("softmax over an empty axis")
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)
    out = _result(s, a)

    def backward(g):
        if a.requires_grad:
            dot = (g * s).sum(axis=axis, keepdims=True)
            a.accumulate_grad(s * (g - dot))

    _record(out, backward)
    return out


# --------------------------------------------------------------------------
# Shape ops
# --------------------------------------------------------------------------

def reshape(a: Tensor, shape) -> Tensor:
    _check_float(a)
    out = _result(a.data.reshape(shape), a)

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(g.reshape(a.data.shape))

    _record(out, backward)
    return out


def transpose(a: Tensor, axes) -> Tensor:
    _check_float(a)
    axes = tuple(axes)
    out = _result(a.data.transpose(axes), a)
    inv = tuple(np.argsort(axes))

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(g.transpose(inv))

    _record(out, backward)
    return out


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ShapeError("concat of an empty list")
    _check_float(*tensors)
    out = _result(np.concatenate([t.data for t in tensors], axis=axis), *tensors)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                t.accumulate_grad(g[tuple(idx)])

    _record(out, backward)
    return out


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice along one axis."""
    _check_float(a)
    if start < 0 or start + length > a.data.shape[axis]:
        raise ShapeError(
            f"narrow [{start}:{start + length}] out of range for axis {axis} of size {a.data.shape[axis]}"
        )
    idx = [slice(None)] * a.data.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)
    out = _result(a.data[idx], a)

    def backward(g):
        if a.requires_grad:
            full = np.zeros_like(a.data)
            full[idx] = g
            a.accumulate_grad(full)

    _record(out, backward)
    return out


# --------------------------------------------------------------------------
# Linear algebra
# --------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    _check_float(a, b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul needs [m,k]@[k,n]; got {a.data.shape} @ {b.data.shape}")
    out = _result(a.data @ b.data, a, b)

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(g @ b.data.T)
        if b.requires_grad:
            b.accumulate_grad(a.data.T @ g)

    _record(out, backward)
    return out


def channel_dot(feat: Tensor, vecs: Tensor) -> Tensor:
    """Per-pixel dot product of a feature map with per-item channel vectors.

    feat: [N,C,H,W], vecs: [N,K,C] -> [N,K,H,W].
    """
    _check_float(feat, vecs)
    if feat.data.ndim != 4 or vecs.data.ndim != 3 or feat.data.shape[0] != vecs.data.shape[0] \
            or feat.data.shape[1] != vecs.data.shape[2]:
        raise ShapeError(f"channel_dot: incompatible {feat.data.shape} and {vecs.data.shape}")
    out = _result(np.einsum("nchw,nkc->nkhw", feat.data, vecs.data, optimize=True), feat, vecs)

    def backward(g):
        if feat.requires_grad:
            feat.accumulate_grad(np.einsum("nkhw,nkc->nchw", g, vecs.data, optimize=True))
        if vecs.requires_grad:
            vecs.accumulate_grad(np.einsum("nkhw,nchw->nkc", g, feat.data, optimize=True))

    _record(out, backward)
    return out


# --------------------------------------------------------------------------
# Convolutions
# --------------------------------------------------------------------------

def _conv_out_size(size: int, k: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - k) // stride + 1


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation, x: [N,C,H,W], w: [O,C,kh,kw], b: [O]."""
    _check_float(x, w)
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ShapeError(f"conv2d expects 4-d input and weight; got {x.data.shape}, {w.data.shape}")
    N, C, H, W = x.data.shape
    O, Cw, kh, kw = w.data.shape
    if C != Cw:
        raise ShapeError(f"conv2d channel mismatch: input has {C}, weight expects {Cw}")
    if stride < 1:
        raise ShapeError("conv2d stride must be >= 1")
    if kh > H + 2 * padding or kw > W + 2 * padding:
        raise ShapeError(f"kernel {kh}x{kw} larger than padded input {H + 2 * padding}x{W + 2 * padding}")
    if b is not None and b.data.shape != (O,):
        raise ShapeError(f"bias must have shape ({O},); got {b.data.shape}")

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    Ho = _conv_out_size(H, kh, stride, padding)
    Wo = _conv_out_size(W, kw, stride, padding)
    sN, sC, sH, sW = xp.strides
    view = np.lib.stride_tricks.as_strided(
        xp, (N, Ho, Wo, C, kh, kw), (sN, sH * stride, sW * stride, sC, sH, sW))
    cols = view.reshape(N * Ho * Wo, C * kh * kw)
    wmat = w.data.reshape(O, -1)
    y = cols @ wmat.T
    if b is not None:
        y += b.data
    out = _result(y.reshape(N, Ho, Wo, O).transpose(0, 3, 1, 2), x, w, *( [b] if b is not None else [] ))

    def backward(g):
        gmat = g.transpose(0, 2, 3, 1).reshape(N * Ho * Wo, O)
        if w.requires_grad:
            w.accumulate_grad((gmat.T @ cols).reshape(w.data.shape))
        if b is not None and b.requires_grad:
            b.accumulate_grad(gmat.sum(axis=0))
        if x.requires_grad:
            dcols = (gmat @ wmat).reshape(N, Ho, Wo, C, kh, kw)
            dxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, :, i:i + stride * Ho:stride, j:j + stride * Wo:stride] += \
                        dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            if padding:
                dxp = dxp[:, :, padding:padding + H, padding:padding + W]
            x.accumulate_grad(dxp)

    _record(out, backward)
    return out


def conv_transpose2d(x: Tensor, w: Tensor, stride: int = 2) -> Tensor:
    """Transposed convolution, x: [N,C,H,W], w: [C,O,kh,kw].

    Output spatial size is (H-1)*stride + kh; with stride 2 and a 2x2
    kernel this is exactly 2H.
    """
    _check_float(x, w)
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ShapeError(f"conv_transpose2d expects 4-d input and weight; got {x.data.shape}, {w.data.shape}")
    N, C, H, W = x.data.shape
    Cw, O, kh, kw = w.data.shape
    if C != Cw:
        raise ShapeError(f"conv_transpose2d channel mismatch: input has {C}, weight expects {Cw}")
    if stride < 1:
        raise ShapeError("conv_transpose2d stride must be >= 1")
    Ho = (H - 1) * stride + kh
    Wo = (W - 1) * stride + kw

    t = np.tensordot(x.data, w.data, axes=([1], [0]))  # [N,H,W,O,kh,kw]
    y = np.zeros((N, O, Ho, Wo), dtype=x.data.dtype)
    hs = stride * (H - 1) + 1
    ws = stride * (W - 1) + 1
    for i in range(kh):
        for j in range(kw):
            y[:, :, i:i + hs:stride, j:j + ws:stride] += t[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    out = _result(y, x, w)

    def backward(g):
        for i in range(kh):
            for j in range(kw):
                gij = g[:, :, i:i + hs:stride, j:j + ws:stride]  # [N,O,H,W]
                if x.requires_grad:
                    dx = np.tensordot(gij, w.data[:, :, i, j], axes=([1], [1]))  # [N,H,W,C]
                    x.accumulate_grad(dx.transpose(0, 3, 1, 2))
                if w.requires_grad:
                    dw = np.tensordot(x.data, gij, axes=([0, 2, 3], [0, 2, 3]))  # [C,O]
                    full = np.zeros_like(w.data)
                    full[:, :, i, j] = dw
                    w.accumulate_grad(full)

    _record(out, backward)
    return out


# --------------------------------------------------------------------------
# Batch normalization
# --------------------------------------------------------------------------

def batchnorm2d(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray,
                running_var: np.ndarray, training: bool, momentum: float = 0.1,
                eps: float = 1e-5) -> Tensor:
    """Per-channel normalization over [N,C,H,W].

    Training normalizes by batch statistics and updates the running
    buffers in place (unbiased variance, torch convention); inference
    uses the running buffers only.
    """
    _check_float(x, gamma, beta)
    if x.data.ndim != 4:
        raise ShapeError(f"batchnorm2d expects [N,C,H,W]; got {x.data.shape}")
    N, C, H, W = x.data.shape
    for name, p in (("gamma", gamma.data), ("beta", beta.data)):
        if p.shape != (C,):
            raise ShapeError(f"{name} must have shape ({C},); got {p.shape}")

    if training:
        m = N * H * W
        if m < 2:
            raise NumericError("batch statistics need at least 2 values per channel in training mode")
        mean = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))  # biased, used for normalization
        running_mean *= (1.0 - momentum)
        running_mean += momentum * mean
        running_var *= (1.0 - momentum)
        running_var += momentum * var * (m / (m - 1))
    else:
        if np.any(running_var <= -eps):
            raise NumericError("running variance produces a non-positive normalizer")
        mean = running_mean.astype(x.data.dtype)
        var = running_var.astype(x.data.dtype)

    inv = 1.0 / np.sqrt(var + eps)
    xc = x.data - mean[None, :, None, None]
    xhat = xc * inv[None, :, None, None]
    out = _result(xhat * gamma.data[None, :, None, None] + beta.data[None, :, None, None],
                  x, gamma, beta)

    def backward(g):
        if gamma.requires_grad:
            gamma.accumulate_grad((g * xhat).sum(axis=(0, 2, 3)))
        if beta.requires_grad:
            beta.accumulate_grad(g.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            gx = g * gamma.data[None, :, None, None]
            if training:
                m = N * H * W
                s1 = gx.sum(axis=(0, 2, 3))[None, :, None, None]
                s2 = (gx * xhat).sum(axis=(0, 2, 3))[None, :, None, None]
                x.accumulate_grad((inv[None, :, None, None] / m) * (m * gx - s1 - xhat * s2))
            else:
                x.accumulate_grad(gx * inv[None, :, None, None])

    _record(out, backward)
    return out


# --------------------------------------------------------------------------
# Attention
# --------------------------------------------------------------------------

def attention(tokens: Tensor, wq: Tensor, wk: Tensor, wv: Tensor, wo: Tensor,
              num_heads: int = 1) -> Tensor:
    """Scaled dot-product self-attention with a residual connection.

    tokens: [T,D]; all projections are [D,D]. Built from primitive ops so
    the reverse pass falls out of the tape.
    """
    T, D = tokens.data.shape[0], tokens.data.shape[1]
    if T == 0:
        raise ShapeError("attention over an empty token sequence")
    if D % num_heads != 0:
        raise ShapeError(f"token dim {D} not divisible by {num_heads} heads")
    dh = D // num_heads
    scale = 1.0 / math.sqrt(dh)

    q = matmul(tokens, wq)
    k = matmul(tokens, wk)
    v = matmul(tokens, wv)
    outs = []
    for h in range(num_heads):
        qh = narrow(q, 1, h * dh, dh)
        kh = narrow(k, 1, h * dh, dh)
        vh = narrow(v, 1, h * dh, dh)
        att = softmax(mul(matmul(qh, transpose(kh, (1, 0))), scale), axis=-1)
        outs.append(matmul(att, vh))
    mixed = outs[0] if num_heads == 1 else concat(outs, axis=1)
    return add(tokens, matmul(mixed, wo))


# --------------------------------------------------------------------------
# Segmentation-specific loss kernel
# --------------------------------------------------------------------------

def sigmoid_focal_loss(logits: Tensor, targets: np.ndarray, alpha: float = 0.25,
                       gamma: float = 2.0) -> Tensor:
    """Mean focal loss on binary targets, computed stably from logits.

    targets is a constant {0,1} array of the same shape as logits.
    """
    _check_float(logits)
    t = np.asarray(targets, dtype=logits.data.dtype)
    if t.shape != logits.data.shape:
        raise ShapeError(f"targets shape {t.shape} != logits shape {logits.data.shape}")
    z = logits.data
    zs = np.where(t > 0.5, z, -z)  # logit of the true class
    log_u = -_softplus(-zs)
    log_1mu = -_softplus(zs)
    u = np.exp(log_u)
    one_m_u = np.exp(log_1mu)
    at = alpha * t + (1.0 - alpha) * (1.0 - t)
    per_pixel = -at * one_m_u ** gamma * log_u
    n = z.size
    out = _result(np.asarray(per_pixel.sum() / n, dtype=z.dtype), logits)

    def backward(g):
        if logits.requires_grad:
            d = at * (2.0 * t - 1.0) * one_m_u ** gamma * (gamma * u * log_u - one_m_u)
            logits.accumulate_grad((np.asarray(g).item() / n) * d)

    _record(out, backward)
    return out


def _softplus(x: np.ndarray) -> np.ndarray:
    return np.log1p(np.exp(-np.abs(x))) + np.maximum(x, 0.0)


# --------------------------------------------------------------------------
# Gradient checking
# --------------------------------------------------------------------------

def grad_check(fn, inputs, h: float = 1e-5, rng: np.random.Generator | None = None,
               denom_floor: float = 1e-3) -> float:
    """Max relative error between tape gradients and central differences.

    fn maps the given float64 tensors to a tensor. A fixed random
    cotangent turns multi-output ops into a scalar objective. Elements
    where both gradients fall below ``denom_floor`` are effectively
    compared absolutely.
    """
    inputs = list(inputs)
    for t in inputs:
        if t.data.dtype != np.float64:
            raise TypeError("grad_check requires float64 inputs")
        t.requires_grad = True
        t.zero_grad()
    if rng is None:
        rng = make_rng(0)

    reset_tape()
    out = fn(*inputs)
    if not np.all(np.isfinite(out.data)):
        raise NumericError("non-finite values in the forward pass")
    cot = rng.standard_normal(out.data.shape)
    out.backward(cot)
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in inputs]
    reset_tape()

    max_rel = 0.0
    with no_grad():
        for t, a in zip(inputs, analytic):
            flat = t.data.reshape(-1)
            num = np.zeros_like(flat)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + h
                fp = float((fn(*inputs).data * cot).sum())
                flat[i] = orig - h
                fm = float((fn(*inputs).data * cot).sum())
                flat[i] = orig
                num[i] = (fp - fm) / (2.0 * h)
            if not np.all(np.isfinite(num)):
                raise NumericError("non-finite values in the finite-difference sweep")
            af = a.reshape(-1)
            denom = np.maximum(np.maximum(np.abs(af), np.abs(num)), denom_floor)
            max_rel = max(max_rel, float(np.max(np.abs(af - num) / denom)))
    return max_rel
