"""Post-training weight quantization: per-output-channel symmetric int8.

Batchnorms must be folded into their convs first, so the quantized
weights already carry the normalization.  Only conv / transposed-conv /
linear weight matrices are quantized; biases, tokens and attention
matrices stay float32, and activations are never quantized — the int8
form is a storage format, dequantized back to float32 for inference.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import blocks as B
from .model import ClickSegNet
from .modelfile import SCALE_SUFFIX, ModelBundle, _walk_layers

QMAX = 127


@dataclass(frozen=True)
class QuantizedTensor:
    """Symmetric int8 values with a per-output-channel scale.

    ``scales`` keeps a broadcast-ready shape (size 1 everywhere except
    the channel axis) so ``values * scales`` dequantizes directly.
    ``zero_points`` is identically 0 for the symmetric scheme.
    """

    values: np.ndarray
    scales: np.ndarray
    zero_points: int = 0

    def __post_init__(self):
        if self.values.dtype != np.int8:
            raise TypeError("values must be int8")
        if self.zero_points != 0:
            raise ValueError("symmetric quantization fixes zero_points at 0")


def quantize_tensor(w: np.ndarray, channel_axis: int) -> QuantizedTensor:
    """Round to int8 with scale = max|w| / 127 along the channel axis.

    A channel that is entirely zero gets the sentinel scale 1.0 (its
    values quantize to 0 and dequantize to 0 exactly).
    """
    w = np.asarray(w, dtype=np.float32)
    reduce_axes = tuple(i for i in range(w.ndim) if i != channel_axis)
    absmax = np.max(np.abs(w), axis=reduce_axes, keepdims=True)
    scales = (absmax / QMAX).astype(np.float32)
    scales[absmax == 0] = 1.0
    q = np.clip(np.round(w / scales), -QMAX, QMAX).astype(np.int8)
    return QuantizedTensor(values=q, scales=scales)


def dequantize_tensor(qt: QuantizedTensor) -> np.ndarray:
    return (qt.values.astype(np.float32) * qt.scales).astype(np.float32)


def fold_all_batchnorms(net: B.Layer) -> int:
    """Fold every unfolded batchnorm into the conv registered just before it.

    Returns the number of folds performed; already-folded layers are left
    alone, so calling this twice is harmless.
    """
    folds = 0
    for _, layer in _walk_layers(net):
        prev_conv = None
        for child in layer._children.values():
            if isinstance(child, B.Conv2d):
                prev_conv = child
            elif isinstance(child, B.BatchNorm2d):
                if not child.folded:
                    if prev_conv is None:
                        raise ValueError("batchnorm has no preceding conv to fold into")
                    B.fold_conv_bn(prev_conv, child)
                    folds += 1
                prev_conv = None
            else:
                prev_conv = None
    return folds


def _quantizable_weight_axes(net: B.Layer) -> dict[str, int]:
    """Map dotted parameter names of quantizable weights to their channel axis."""
    axes: dict[str, int] = {}
    for prefix, layer in _walk_layers(net):
        if isinstance(layer, B.Conv2d):
            axes[prefix + "weight"] = 0          # [O, C, kh, kw]
        elif isinstance(layer, B.ConvTranspose2d):
            axes[prefix + "weight"] = 1          # [C_in, C_out, kh, kw]
        elif isinstance(layer, B.Linear):
            axes[prefix + "weight"] = 1          # [in, out]
    return axes


def quantize_model(net: ClickSegNet) -> ModelBundle:
    """Produce an int8 bundle; requires all batchnorms already folded."""
    from .modelfile import _all_batchnorms_folded
    if not _all_batchnorms_folded(net):
        raise ValueError("fold batchnorms before quantizing (fold_all_batchnorms)")
    axes = _quantizable_weight_axes(net)
    tensors: dict[str, np.ndarray] = {}
    for name, p in net.named_parameters():
        if name in axes:
            qt = quantize_tensor(p.data, axes[name])
            tensors[name] = qt.values
            tensors[name + SCALE_SUFFIX] = qt.scales
        else:
            tensors[name] = p.data
    for name, b in net.named_buffers():
        tensors[name] = b
    config = {"model": net.config.to_dict(), "folded": True, "quantized": True}
    return ModelBundle(config=config, tensors=tensors)
