"""Click-simulation mIOU, the saliency evaluation protocol, and the
whole-object preference probe.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np

from . import data as D
from . import saliency as S
from .model import Click, PromptSet, select_best_mask

SMALL_MAX = 32 * 32     # exclusive upper bound for "small"
MEDIUM_MAX = 96 * 96    # inclusive upper bound for "medium"
FINE_SUBSTITUTION_IOU = 0.80
AMBIGUITY_MIN_POINTS = 4


def mask_iou(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, bool)
    b = np.asarray(b, bool)
    union = np.logical_or(a, b).sum()
    return float(np.logical_and(a, b).sum() / union) if union else 0.0


def size_bucket(area: int) -> str:
    if area < SMALL_MAX:
        return "small"
    if area <= MEDIUM_MAX:
        return "medium"
    return "large"


@dataclass
class EvalRecord:
    sample_id: str
    clicks_used: int
    iou: float
    size_bucket: str
    ambiguous: bool = False


def _summarize(records):
    by_bucket = {"small": [], "medium": [], "large": []}
    for r in records:
        by_bucket[r.size_bucket].append(r.iou)
    all_ious = [r.iou for r in records]
    out = {"overall": float(np.mean(all_ious)) if all_ious else None, "count": len(records)}
    for name, vals in by_bucket.items():
        out[name] = float(np.mean(vals)) if vals else None
    return out


def miou_eval(model, dataset, clicks_per_mask: int, rng):
    """Simulated-click evaluation over every ground-truth mask.

    Clicks are drawn uniformly from each gt mask with the shared seeded
    sampler. Returns (summary dict incl. per-size-bucket means, records).
    """
    records = []
    for si, sample in enumerate(dataset):
        size = model.config.input_size
        if sample.image.shape[1] != size or sample.image.shape[2] != size:
            raise ValueError(f"sample {si} size {sample.image.shape[1:]} != model {size}")
        for mi, rle in enumerate(sample.masks):
            gt = rle.decode()
            if not gt.any():
                continue
            clicks = D.sample_training_clicks(gt, clicks_per_mask, rng)
            out = model.predict(sample.image, PromptSet(clicks=tuple(clicks)))
            pred, _ = select_best_mask(out)
            records.append(EvalRecord(
                sample_id=f"{sample.source_id or si}/{mi}", clicks_used=clicks_per_mask,
                iou=mask_iou(pred, gt), size_bucket=size_bucket(int(gt.sum()))))
    return _summarize(records), records


def substitute_fine_masks(masks, fine_candidates, threshold: float = FINE_SUBSTITUTION_IOU):
    """Swap each mask for its best fine-grained variant when they
    overlap strongly (IoU strictly greater than threshold)."""
    if not fine_candidates:
        return list(masks)
    fine_dec = [f.decode() for f in fine_candidates]
    out = []
    for m in masks:
        dec = m.decode()
        ious = [mask_iou(dec, f) for f in fine_dec]
        best = int(np.argmax(ious)) if ious else -1
        if best >= 0 and ious[best] > threshold:
            out.append(fine_candidates[best])
        else:
            out.append(m)
    return out


def saliency_gt_selection(masks_decoded, binary_saliency: np.ndarray) -> int:
    """Index of the gt mask with max IoU against the binarized map."""
    ious = [mask_iou(m, binary_saliency) for m in masks_decoded]
    return int(np.argmax(ious))


def ambiguity_filter(points, gt_mask: np.ndarray) -> bool:
    """True (keep) iff at least 4 of the 5 gravity points hit the mask."""
    inside = sum(1 for x, y in points if gt_mask[y, x])
    return inside >= AMBIGUITY_MIN_POINTS


def saliency_eval(model, dataset, saliency_source=None, points_used: int = 3,
                  fine_masks_per_sample=None):
    """Zero-click protocol: heatmap -> 5 gravity clicks -> model.

    Per sample: synthesize the 5 points from the most salient blob;
    optionally substitute fine-grained mask variants; choose the gt mask
    maximizing IoU with the binarized saliency; keep the sample only if
    >= 4 of the 5 points lie inside that mask; then segment with 1 point
    (blob centroid) or 3 points (centroid + first two quadrant points).

    Returns (summary, records); summary counts exclusions by reason.
    """
    if points_used not in (1, 3):
        raise ValueError("points_used must be 1 or 3")
    source = saliency_source or (lambda s: S.baseline_saliency(s.image))
    records, excluded_ambiguous, excluded_no_blob = [], 0, 0
    for si, sample in enumerate(dataset):
        heat = source(sample)
        try:
            blob, binary = S.salient_blob_from_heatmap(heat)
        except (S.NoSalientRegionError, S.DegenerateInputError):
            excluded_no_blob += 1
            continue
        points = S.sample_five_clicks(blob)

        masks = list(sample.masks)
        if fine_masks_per_sample is not None:
            masks = substitute_fine_masks(masks, fine_masks_per_sample[si])
        decoded = [m.decode() for m in masks]
        nonempty = [(i, m) for i, m in enumerate(decoded) if m.any()]
        if not nonempty:
            excluded_no_blob += 1
            continue
        gt = nonempty[saliency_gt_selection([m for _, m in nonempty], binary)][1]

        if not ambiguity_filter(points, gt):
            excluded_ambiguous += 1
            continue

        clicks = tuple(Click(x, y, "fg") for x, y in points[:points_used])
        out = model.predict(sample.image, PromptSet(clicks=clicks))
        pred, _ = select_best_mask(out)
        records.append(EvalRecord(sample_id=sample.source_id or str(si),
                                  clicks_used=points_used, iou=mask_iou(pred, gt),
                                  size_bucket=size_bucket(int(gt.sum()))))
    summary = _summarize(records)
    summary["excluded_ambiguous"] = excluded_ambiguous
    summary["excluded_no_blob"] = excluded_no_blob
    summary["excluded_count"] = excluded_ambiguous + excluded_no_blob
    return summary, records


def centroid_click(mask: np.ndarray) -> Click:
    """Mask centroid snapped to the nearest mask pixel (ties: y then x)."""
    ys, xs = np.nonzero(mask)
    cx, cy = xs.mean(), ys.mean()
    d2 = (xs - cx) ** 2 + (ys - cy) ** 2
    order = np.lexsort((xs, ys, d2))
    i = order[0]
    return Click(int(xs[i]), int(ys[i]), "fg")


def whole_object_probe(model, scenes):
    """Fraction of scenes where a click on a part yields the whole object.

    scenes: list of (Sample, SceneMeta). The click goes at the centroid
    of the first part mask — a point every piece of the object contains —
    and the scene counts as whole-object only when the prediction
    overlaps the composite strictly more than BOTH the part and the bare
    base. A base-shaped answer (whole object minus its protrusions) is
    not whole-object behavior, so it must not count as a win.
    """
    wins, total = 0, 0
    for sample, meta in scenes:
        part_idx = next((i for i, (role, _) in enumerate(meta.roles) if role == "part"), None)
        if part_idx is None:
            continue
        obj = meta.roles[part_idx][1]
        comp_idx = next(i for i, (role, o) in enumerate(meta.roles)
                        if role == "composite" and o == obj)
        base_idx = next(i for i, (role, o) in enumerate(meta.roles)
                        if role == "base" and o == obj)
        part = sample.masks[part_idx].decode()
        comp = sample.masks[comp_idx].decode()
        base = sample.masks[base_idx].decode()
        click = centroid_click(part)
        out = model.predict(sample.image, PromptSet(clicks=(click,)))
        pred, _ = select_best_mask(out)
        total += 1
        iou_comp = mask_iou(pred, comp)
        if iou_comp > mask_iou(pred, part) and iou_comp > mask_iou(pred, base):
            wins += 1
    return wins / total if total else 0.0


def save_eval_report(prefix: str, summary: dict, records, seed=None) -> None:
    """<prefix>.jsonl gets one record per line; <prefix>.json the summary."""
    with open(prefix + ".jsonl", "w") as f:
        for r in records:
            f.write(json.dumps(asdict(r)) + "\n")
    full = dict(summary)
    if seed is not None:
        full["seed"] = seed
    with open(prefix + ".json", "w") as f:
        json.dump(full, f, indent=2)
