"""Loss, optimizer and the training loop.

Per step: pick one image, build a batch from up to 8 of its masks with
1-3 simulated clicks each, run one optimizer step on the batch mean
loss. The per-mask loss is 20*focal + dice on the best-fitting mask
head (argmin), plus an MSE pulling the quality scores toward each
head's actual IoU. Learning rate decays linearly from 5e-4 to 0.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import data as D
from . import tensor as T
from .model import ClickSegNet, ModelConfig, PromptSet, encode_prompts_early
from .tensor import Tensor, make_rng

FOCAL_WEIGHT = 20.0
BASE_LR = 5e-4


class TrainingDivergedError(RuntimeError):
    def __init__(self, message: str, diagnostics: dict):
        super().__init__(message)
        self.diagnostics = diagnostics


@dataclass
class LossBreakdown:
    focal: float
    dice: float
    iou_mse: float
    total: float
    chosen_mask_index: int


def dice_loss(logits: Tensor, gt: np.ndarray) -> Tensor:
    """Soft dice: 1 - 2*sum(p*g)/(sum(p)+sum(g)); gt must be nonempty."""
    p = T.sigmoid(logits)
    num = T.tsum(T.mul(p, Tensor(gt.astype(logits.data.dtype))))
    den = T.add(T.tsum(p), float(gt.sum()))
    return T.add(T.mul(T.div(num, den), -2.0), 1.0)


def mask_iou_np(pred: np.ndarray, gt: np.ndarray) -> float:
    inter = np.logical_and(pred, gt).sum()
    union = np.logical_or(pred, gt).sum()
    return float(inter / union) if union else 0.0


def segmentation_loss_tensors(mask_logits: Tensor, iou_scores: Tensor, gt: np.ndarray,
                              frozen_choice: int | None = None,
                              frozen_iou_targets: np.ndarray | None = None):
    """Differentiable loss for one item.

    mask_logits [k,S,S], iou_scores [k] (or [1,k]), gt bool [S,S].
    frozen_* pin the discrete pieces (head choice, IoU regression
    targets) so finite-difference checks see a smooth function.
    Returns (total loss Tensor, LossBreakdown).
    """
    gt = np.asarray(gt, bool)
    if not gt.any():
        raise ValueError("ground-truth mask is empty")
    k = mask_logits.shape[0]
    if gt.shape != tuple(mask_logits.shape[1:]):
        raise ValueError(f"gt shape {gt.shape} != logits {tuple(mask_logits.shape[1:])}")
    if iou_scores.data.size != k:
        raise ValueError(f"expected {k} quality scores; got {iou_scores.data.size}")
    scores = T.reshape(iou_scores, (k,))
    gt_f = gt.astype(mask_logits.data.dtype)

    focals, dices, totals = [], [], []
    for i in range(k):
        li = T.reshape(T.narrow(mask_logits, 0, i, 1), gt.shape)
        focals.append(T.sigmoid_focal_loss(li, gt_f))
        dices.append(dice_loss(li, gt))
        totals.append(FOCAL_WEIGHT * focals[-1].item() + dices[-1].item())

    chosen = int(np.argmin(totals)) if frozen_choice is None else int(frozen_choice)
    if frozen_iou_targets is None:
        with T.no_grad():
            probs = 1.0 / (1.0 + np.exp(-mask_logits.numpy().astype(np.float64)))
            targets = np.array([mask_iou_np(probs[i] > 0.5, gt) for i in range(k)],
                               dtype=mask_logits.data.dtype)
    else:
        targets = np.asarray(frozen_iou_targets, dtype=mask_logits.data.dtype)
    diff = T.sub(scores, Tensor(targets, dtype=mask_logits.data.dtype))
    iou_mse = T.tsum(T.mul(diff, diff))

    total = T.add(T.add(T.mul(focals[chosen], FOCAL_WEIGHT), dices[chosen]), iou_mse)
    breakdown = LossBreakdown(focal=focals[chosen].item(), dice=dices[chosen].item(),
                              iou_mse=iou_mse.item(), total=total.item(),
                              chosen_mask_index=chosen)
    return total, breakdown


def segmentation_loss(output, gt: np.ndarray) -> LossBreakdown:
    """Loss numbers for an inference result (no gradients involved)."""
    with T.no_grad():
        _, breakdown = segmentation_loss_tensors(
            Tensor(output.mask_logits), Tensor(output.iou_scores), gt)
    return breakdown


class Adam:
    def __init__(self, params, lr: float = BASE_LR, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        self.t += 1
        b1c = 1.0 - self.beta1 ** self.t
        b2c = 1.0 - self.beta2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data -= self.lr * (m / b1c) / (np.sqrt(v / b2c) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


def lr_at(step: int, total_steps: int, base: float = BASE_LR) -> float:
    """Linear decay from base to 0 over total_steps."""
    if total_steps <= 0:
        raise ValueError("total_steps must be positive")
    return base * (1.0 - step / total_steps)


MAX_MASKS_PER_STEP = 8


def build_step_batch(sample: D.Sample, cfg: ModelConfig, aug: D.AugmentConfig, rng,
                     merge_masks: bool = True):
    """(encoded [M,5,S,S], per-item clicks, per-item gt) for one step.

    Applies mask merging (optional), the object-centered crop, click
    simulation and stray-click injection. Always yields M >= 2 items so
    batch statistics are well defined at the 1x1 bottleneck.
    """
    masks = list(sample.masks)
    if merge_masks:
        masks = D.merge_nested_masks(masks, tau=aug.merge_containment_tau)
    decoded = [m.decode() for m in masks]
    decoded = [m for m in decoded if m.any()]
    if not decoded:
        return None

    target = decoded[int(rng.integers(0, len(decoded)))]
    cropped, _ = D.center_crop_around_object(
        D.Sample(image=sample.image, masks=[D.RleMask.encode(m) for m in decoded],
                 source_id=sample.source_id),
        target, rng, aug, out_size=cfg.input_size)
    pool = [m.decode() for m in cropped.masks]
    pool = [m for m in pool if m.any()]
    if not pool:
        return None

    count = min(MAX_MASKS_PER_STEP, len(pool))
    picks = rng.choice(len(pool), size=count, replace=False)
    if count == 1:
        picks = np.array([picks[0], picks[0]])  # two click draws of one mask
    occupied = np.zeros_like(pool[0])
    for m in pool:
        occupied |= m

    encoded, clicks_per_item, gts = [], [], []
    for idx in picks:
        gt = pool[int(idx)]
        clicks = D.sample_training_clicks(gt, int(rng.integers(1, 4)), rng)
        clicks = D.inject_outlier_click(clicks, occupied, rng, aug.outlier_prob)
        prompts = PromptSet(clicks=tuple(clicks))
        encoded.append(encode_prompts_early(cropped.image, prompts, cfg).tensor)
        clicks_per_item.append(prompts.clicks)
        gts.append(gt)
    return np.stack(encoded), clicks_per_item, gts


def train_loop(config: ModelConfig, dataset, steps: int, seed: int,
               augment: D.AugmentConfig | None = None, merge_masks: bool = True,
               base_lr: float = BASE_LR, log_every: int = 50, model: ClickSegNet | None = None):
    """Train a model from scratch; returns (model, metrics list).

    dataset: list of Samples. All randomness comes from one generator
    seeded with `seed`, so runs are bit-reproducible.
    """
    if not dataset:
        raise ValueError("empty dataset")
    aug = augment or D.AugmentConfig()
    rng = make_rng(seed)
    if model is None:
        model = ClickSegNet(config, rng)
    model.train(True)
    opt = Adam(model.parameters(), lr=base_lr)
    metrics = []

    step = 0
    while step < steps:
        sample = dataset[int(rng.integers(0, len(dataset)))]
        batch = build_step_batch(sample, config, aug, rng, merge_masks=merge_masks)
        if batch is None:
            continue
        encoded, clicks_per_item, gts = batch

        T.reset_tape()
        logits, scores = model.forward_tensors(Tensor(encoded), clicks_per_item)
        total = None
        breakdowns = []
        for m, gt in enumerate(gts):
            item_logits = T.reshape(T.narrow(logits, 0, m, 1), logits.shape[1:])
            item_scores = T.narrow(scores, 0, m, 1)
            item_total, bd = segmentation_loss_tensors(item_logits, item_scores, gt)
            breakdowns.append(bd)
            total = item_total if total is None else T.add(total, item_total)
        total = T.mul(total, 1.0 / len(gts))

        loss_val = total.item()
        if not np.isfinite(loss_val):
            raise TrainingDivergedError(
                f"non-finite loss at step {step}",
                {"step": step, "lr": opt.lr, "loss": loss_val,
                 "breakdowns": [vars(b) for b in breakdowns]})

        opt.zero_grad()
        total.backward()
        opt.lr = lr_at(step, steps, base_lr)
        opt.step()
        T.reset_tape()

        record = {
            "step": step, "loss": loss_val, "lr": opt.lr,
            "focal": float(np.mean([b.focal for b in breakdowns])),
            "dice": float(np.mean([b.dice for b in breakdowns])),
            "iou_mse": float(np.mean([b.iou_mse for b in breakdowns])),
            "batch": len(gts),
        }
        if step % log_every == 0 or step == steps - 1:
            metrics.append(record)
        step += 1

    model.eval()
    return model, metrics
