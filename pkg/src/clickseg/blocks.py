"""Composable network layers built on the tape tensor core.

Conventions: conv weights are [O,C,kh,kw], transposed-conv weights are
[C,O,kh,kw], linear weights are [in,out]. Every constructor takes an
explicit numpy Generator so weight init is reproducible.
"""
from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from .tensor import NumericError, ShapeError, Tensor


class Layer:
    """Base class: tracks parameters, buffers and child layers.

    Attribute assignment auto-registers Tensors as parameters and Layers
    as children, in insertion order; that order is the canonical
    serialization order.
    """

    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_buffers", {})
        object.__setattr__(self, "_children", {})
        object.__setattr__(self, "training", True)

    def __setattr__(self, name, value):
        if isinstance(value, Tensor):
            self._params[name] = value
        elif isinstance(value, Layer):
            self._children[name] = value
        object.__setattr__(self, name, value)

    def register_buffer(self, name: str, value: np.ndarray) -> None:
        self._buffers[name] = value
        object.__setattr__(self, name, value)

    def named_parameters(self, prefix: str = ""):
        for name, p in self._params.items():
            yield prefix + name, p
        for cname, child in self._children.items():
            yield from child.named_parameters(prefix + cname + ".")

    def named_buffers(self, prefix: str = ""):
        for name, b in self._buffers.items():
            yield prefix + name, b
        for cname, child in self._children.items():
            yield from child.named_buffers(prefix + cname + ".")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def train(self, mode: bool = True):
        object.__setattr__(self, "training", mode)
        for child in self._children.values():
            child.train(mode)
        return self

    def eval(self):
        return self.train(False)

    def requires_grad_(self, flag: bool = True):
        for p in self.parameters():
            p.requires_grad = flag
        return self


class ModuleList(Layer):
    def __init__(self, layers):
        super().__init__()
        self._list = list(layers)
        for i, layer in enumerate(self._list):
            setattr(self, str(i), layer)

    def __iter__(self):
        return iter(self._list)

    def __len__(self):
        return len(self._list)

    def __getitem__(self, i):
        return self._list[i]


def param_count(layer: Layer) -> int:
    """Learnable scalars only; running statistics are excluded."""
    return sum(p.data.size for _, p in layer.named_parameters())


class Conv2d(Layer):
    def __init__(self, in_ch: int, out_ch: int, k: int, rng, stride: int = 1,
                 padding: int = 0, bias: bool = True):
        super().__init__()
        std = math.sqrt(2.0 / (in_ch * k * k))
        self.weight = Tensor(rng.standard_normal((out_ch, in_ch, k, k)) * std,
                             dtype=np.float32, requires_grad=True)
        if bias:
            self.bias = Tensor(np.zeros(out_ch), dtype=np.float32, requires_grad=True)
        else:
            object.__setattr__(self, "bias", None)
        self.stride, self.padding = stride, padding

    def forward(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)


class ConvTranspose2d(Layer):
    def __init__(self, in_ch: int, out_ch: int, k: int, rng, stride: int = 2):
        super().__init__()
        std = math.sqrt(2.0 / (in_ch * k * k))
        self.weight = Tensor(rng.standard_normal((in_ch, out_ch, k, k)) * std,
                             dtype=np.float32, requires_grad=True)
        self.stride = stride

    def forward(self, x: Tensor) -> Tensor:
        return T.conv_transpose2d(x, self.weight, stride=self.stride)


class BatchNorm2d(Layer):
    def __init__(self, ch: int, eps: float = 1e-5, momentum: float = 0.1):
        super().__init__()
        self.gamma = Tensor(np.ones(ch), dtype=np.float32, requires_grad=True)
        self.beta = Tensor(np.zeros(ch), dtype=np.float32, requires_grad=True)
        self.register_buffer("running_mean", np.zeros(ch, dtype=np.float32))
        self.register_buffer("running_var", np.ones(ch, dtype=np.float32))
        self.eps, self.momentum = eps, momentum
        self.folded = False

    def forward(self, x: Tensor) -> Tensor:
        if self.folded:
            return x
        return T.batchnorm2d(x, self.gamma, self.beta, self.running_mean, self.running_var,
                             training=self.training, momentum=self.momentum, eps=self.eps)


class Linear(Layer):
    def __init__(self, in_dim: int, out_dim: int, rng, bias: bool = True):
        super().__init__()
        limit = math.sqrt(6.0 / (in_dim + out_dim))
        self.weight = Tensor(rng.uniform(-limit, limit, (in_dim, out_dim)),
                             dtype=np.float32, requires_grad=True)
        if bias:
            self.bias = Tensor(np.zeros(out_dim), dtype=np.float32, requires_grad=True)
        else:
            object.__setattr__(self, "bias", None)

    def forward(self, x: Tensor) -> Tensor:
        y = T.matmul(x, self.weight)
        return T.add(y, self.bias) if self.bias is not None else y


class Mlp(Layer):
    """Stack of linear layers with an activation between them."""

    def __init__(self, dims, rng, activation=T.relu):
        super().__init__()
        self.layers = ModuleList([Linear(a, b, rng) for a, b in zip(dims[:-1], dims[1:])])
        self.activation = activation

    def forward(self, x: Tensor) -> Tensor:
        for i, layer in enumerate(self.layers):
            x = layer.forward(x)
            if i < len(self.layers) - 1:
                x = self.activation(x)
        return x


class DoubleConvDown(Layer):
    """Halves the spatial extent: strided conv, then a refining conv."""

    def __init__(self, in_ch: int, out_ch: int, rng):
        super().__init__()
        self.conv1 = Conv2d(in_ch, out_ch, 3, rng, stride=2, padding=1)
        self.bn1 = BatchNorm2d(out_ch)
        self.conv2 = Conv2d(out_ch, out_ch, 3, rng, stride=1, padding=1)
        self.bn2 = BatchNorm2d(out_ch)

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[2] % 2 or x.shape[3] % 2:
            raise ShapeError(f"spatial extent must be even to halve; got {x.shape[2]}x{x.shape[3]}")
        x = T.relu(self.bn1.forward(self.conv1.forward(x)))
        return T.relu(self.bn2.forward(self.conv2.forward(x)))


class DoubleConvUp(Layer):
    """Doubles the spatial extent, optionally mixing in a skip tensor.

    The transposed conv halves the incoming channels; the skip (if any)
    is concatenated after upsampling.
    """

    def __init__(self, in_ch: int, skip_ch: int, out_ch: int, rng):
        super().__init__()
        if in_ch % 2:
            raise ShapeError(f"in_channels must be even to halve; got {in_ch}")
        self.up = ConvTranspose2d(in_ch, in_ch // 2, 2, rng, stride=2)
        self.conv1 = Conv2d(in_ch // 2 + skip_ch, out_ch, 3, rng, stride=1, padding=1)
        self.bn1 = BatchNorm2d(out_ch)
        self.conv2 = Conv2d(out_ch, out_ch, 3, rng, stride=1, padding=1)
        self.bn2 = BatchNorm2d(out_ch)
        self.skip_ch = skip_ch

    def forward(self, x: Tensor, skip: Tensor | None = None) -> Tensor:
        x = self.up.forward(x)
        if self.skip_ch:
            if skip is None:
                raise ShapeError("this stage was built with a skip input; none given")
            want = (x.shape[0], self.skip_ch, x.shape[2], x.shape[3])
            if tuple(skip.shape) != want:
                raise ShapeError(f"skip shape {tuple(skip.shape)} != expected {want}")
            x = T.concat([x, skip], axis=1)
        elif skip is not None:
            raise ShapeError("this stage takes no skip input")
        x = T.relu(self.bn1.forward(self.conv1.forward(x)))
        return T.relu(self.bn2.forward(self.conv2.forward(x)))


class TransformerLayer(Layer):
    """Self-attention + feed-forward, both residual, no normalization.

    Normalization-free on purpose: the surrounding network is BatchNorm
    only, which folds into convs for cheap inference, and nothing here
    should reintroduce a per-token normalizer.
    """

    def __init__(self, dim: int, head_count: int, rng, mlp_ratio: int = 2):
        super().__init__()
        if dim % head_count:
            raise ShapeError(f"dim {dim} not divisible by {head_count} heads")
        scale = math.sqrt(6.0 / (2 * dim))
        self.wq = Tensor(rng.uniform(-scale, scale, (dim, dim)), dtype=np.float32, requires_grad=True)
        self.wk = Tensor(rng.uniform(-scale, scale, (dim, dim)), dtype=np.float32, requires_grad=True)
        self.wv = Tensor(rng.uniform(-scale, scale, (dim, dim)), dtype=np.float32, requires_grad=True)
        self.wo = Tensor(rng.uniform(-scale, scale, (dim, dim)), dtype=np.float32, requires_grad=True)
        self.mlp = Mlp([dim, mlp_ratio * dim, dim], rng, activation=T.gelu)
        self.head_count = head_count

    def forward(self, tokens: Tensor) -> Tensor:
        t = T.attention(tokens, self.wq, self.wk, self.wv, self.wo, num_heads=self.head_count)
        return T.add(t, self.mlp.forward(t))


class MaskMlpHead(Layer):
    """k independent mask-token perceptrons plus one IoU perceptron.

    Each mask perceptron maps a token to a channel-weighting vector that
    is dotted against the decoder feature map per pixel; the IoU
    perceptron regresses k quality scores.
    """

    def __init__(self, token_dim: int, feat_channels: int, k: int, rng):
        super().__init__()
        self.mask_mlps = ModuleList(
            [Mlp([token_dim, token_dim, feat_channels], rng) for _ in range(k)])
        self.iou_mlp = Mlp([token_dim, token_dim, k], rng)
        self.k = k

    def mask_vectors(self, mask_tokens: Tensor) -> Tensor:
        """mask_tokens [k,D] -> [k,C], one perceptron per row."""
        if mask_tokens.shape[0] != self.k:
            raise ShapeError(f"expected {self.k} mask tokens; got {mask_tokens.shape[0]}")
        rows = [self.mask_mlps[i].forward(T.narrow(mask_tokens, 0, i, 1)) for i in range(self.k)]
        return T.concat(rows, axis=0)

    def iou_scores(self, iou_token: Tensor) -> Tensor:
        """iou_token [1,D] -> [1,k]."""
        return self.iou_mlp.forward(iou_token)


def fold_batchnorm(conv_weight: np.ndarray, conv_bias: np.ndarray | None, gamma: np.ndarray,
                   beta: np.ndarray, running_mean: np.ndarray, running_var: np.ndarray,
                   eps: float = 1e-5):
    """Absorb an inference-mode batchnorm into the preceding conv.

    Returns (weight', bias') such that conv(x, w', b') == bn(conv(x, w, b))
    for all x, using the frozen running statistics.
    """
    if np.any(running_var <= -eps):
        raise NumericError("running variance yields a non-positive normalizer")
    scale = gamma / np.sqrt(running_var + eps)
    w = conv_weight * scale[:, None, None, None]
    b = np.zeros_like(gamma) if conv_bias is None else conv_bias
    return w.astype(conv_weight.dtype), ((b - running_mean) * scale + beta).astype(conv_weight.dtype)


def fold_conv_bn(conv: Conv2d, bn: BatchNorm2d) -> None:
    """Rewrite conv in place and turn bn into a pass-through.

    The bn's learnables leave the parameter listing, so serialization
    after folding only sees the fused conv.
    """
    if bn.folded:
        raise ValueError("batchnorm already folded")
    if conv.bias is None:
        raise ValueError("folding requires the conv to own a bias term")
    w, b = fold_batchnorm(conv.weight.data, conv.bias.data, bn.gamma.data, bn.beta.data,
                          bn.running_mean, bn.running_var, eps=bn.eps)
    conv.weight.data = w
    conv.bias.data = b
    bn._params.clear()
    bn._buffers.clear()
    bn.folded = True
