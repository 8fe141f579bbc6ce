"""Independent reference implementations used as test oracles.

Everything here is written the slow, obvious way (python loops, direct
formulas) so it cannot share bugs with the vectorized production code.
"""
from __future__ import annotations

import numpy as np


def conv2d_loops(x: np.ndarray, w: np.ndarray, b=None, stride: int = 1,
                 padding: int = 0) -> np.ndarray:
    """Direct six-loop cross-correlation. x [N,C,H,W], w [O,C,kh,kw]."""
    N, C, H, W = x.shape
    O, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    Ho = (H + 2 * padding - kh) // stride + 1
    Wo = (W + 2 * padding - kw) // stride + 1
    y = np.zeros((N, O, Ho, Wo), dtype=np.float64)
    for n in range(N):
        for o in range(O):
            for i in range(Ho):
                for j in range(Wo):
                    patch = xp[n, :, i * stride:i * stride + kh, j * stride:j * stride + kw]
                    y[n, o, i, j] = float((patch * w[o]).sum())
                    if b is not None:
                        y[n, o, i, j] += b[o]
    return y.astype(x.dtype)


def conv_transpose2d_loops(x: np.ndarray, w: np.ndarray, stride: int = 2) -> np.ndarray:
    """Direct scatter-add transposed convolution. x [N,C,H,W], w [C,O,kh,kw]."""
    N, C, H, W = x.shape
    _, O, kh, kw = w.shape
    Ho = (H - 1) * stride + kh
    Wo = (W - 1) * stride + kw
    y = np.zeros((N, O, Ho, Wo), dtype=np.float64)
    for n in range(N):
        for c in range(C):
            for i in range(H):
                for j in range(W):
                    y[n, :, i * stride:i * stride + kh, j * stride:j * stride + kw] += \
                        x[n, c, i, j] * w[c]
    return y.astype(x.dtype)


def batchnorm_infer_scalar(x: np.ndarray, gamma, beta, mean, var, eps=1e-5) -> np.ndarray:
    """Inference-mode normalization applied channel by channel."""
    y = np.empty_like(x)
    for c in range(x.shape[1]):
        y[:, c] = (x[:, c] - mean[c]) / np.sqrt(var[c] + eps) * gamma[c] + beta[c]
    return y


def attention_reference(tokens: np.ndarray, wq, wk, wv, wo, num_heads: int) -> np.ndarray:
    """Dense single-shot attention with residual, head by head."""
    T, D = tokens.shape
    dh = D // num_heads
    q, k, v = tokens @ wq, tokens @ wk, tokens @ wv
    heads = []
    for h in range(num_heads):
        sl = slice(h * dh, (h + 1) * dh)
        scores = q[:, sl] @ k[:, sl].T / np.sqrt(dh)
        scores = scores - scores.max(axis=1, keepdims=True)
        p = np.exp(scores)
        p /= p.sum(axis=1, keepdims=True)
        heads.append(p @ v[:, sl])
    return tokens + np.concatenate(heads, axis=1) @ wo


def focal_loss_reference(logits: np.ndarray, targets: np.ndarray, alpha=0.25,
                         gamma=2.0) -> float:
    """Focal loss from explicit probabilities (safe only for moderate logits)."""
    p = 1.0 / (1.0 + np.exp(-logits.astype(np.float64)))
    pt = np.where(targets > 0.5, p, 1.0 - p)
    at = np.where(targets > 0.5, alpha, 1.0 - alpha)
    return float(np.mean(-at * (1.0 - pt) ** gamma * np.log(pt)))


def dice_loss_reference(logits: np.ndarray, targets: np.ndarray) -> float:
    p = 1.0 / (1.0 + np.exp(-logits.astype(np.float64)))
    t = targets.astype(np.float64)
    return float(1.0 - 2.0 * (p * t).sum() / (p.sum() + t.sum()))


def otsu_exhaustive(hist: np.ndarray) -> int:
    """Try every bin split and maximize between-class variance directly.

    Returns the index of the best split bin (threshold = upper edge of
    that bin); ties resolved toward the lowest index.
    """
    total = hist.sum()
    best_idx, best_var = 0, -1.0
    centers = (np.arange(len(hist)) + 0.5) / len(hist)
    for i in range(len(hist)):
        w0 = hist[: i + 1].sum()
        w1 = total - w0
        if w0 == 0 or w1 == 0:
            continue
        m0 = (hist[: i + 1] * centers[: i + 1]).sum() / w0
        m1 = (hist[i + 1:] * centers[i + 1:]).sum() / w1
        var = w0 * w1 * (m0 - m1) ** 2
        if var > best_var + 1e-18:
            best_var, best_idx = var, i
    return best_idx


def blobs_bfs(mask: np.ndarray) -> np.ndarray:
    """8-connected labeling by flood fill, labels in raster-scan order."""
    H, W = mask.shape
    labels = np.zeros((H, W), dtype=np.int32)
    nxt = 1
    for sy in range(H):
        for sx in range(W):
            if mask[sy, sx] and labels[sy, sx] == 0:
                stack = [(sy, sx)]
                labels[sy, sx] = nxt
                while stack:
                    y, x = stack.pop()
                    for dy in (-1, 0, 1):
                        for dx in (-1, 0, 1):
                            ny, nx_ = y + dy, x + dx
                            if 0 <= ny < H and 0 <= nx_ < W and mask[ny, nx_] \
                                    and labels[ny, nx_] == 0:
                                labels[ny, nx_] = nxt
                                stack.append((ny, nx_))
                nxt += 1
    return labels


def merge_nested_masks_quadratic(masks):
    """Keep mask A unless some strictly larger B covers >= 0.9 of it."""
    areas = [int(m.sum()) for m in masks]
    keep = []
    for i, a in enumerate(masks):
        suppressed = False
        for j, b in enumerate(masks):
            if i == j or areas[j] <= areas[i]:
                continue
            inter = int(np.logical_and(a, b).sum())
            if areas[i] > 0 and inter / areas[i] >= 0.9:
                suppressed = True
                break
        if not suppressed:
            keep.append(a)
    return keep


def iou(a: np.ndarray, b: np.ndarray) -> float:
    inter = np.logical_and(a, b).sum()
    union = np.logical_or(a, b).sum()
    return float(inter) / float(union) if union else 0.0
