"""Dataset plumbing: RLE masks, whole-object augmentations, click
simulation, a synthetic nested-shapes generator, and COCO-style disk IO.
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from .model import Click


# --------------------------------------------------------------------------
# Run-length masks (COCO compatible: column-major, leading zeros-run)
# --------------------------------------------------------------------------

@dataclass
class RleMask:
    size: tuple          # (H, W)
    counts: list         # run lengths, alternating 0s/1s, starting with 0s

    def __post_init__(self):
        H, W = self.size
        if sum(self.counts) != H * W:
            raise ValueError(f"runs sum to {sum(self.counts)}, expected {H * W}")
        if any(c < 0 for c in self.counts):
            raise ValueError("negative run length")

    @staticmethod
    def encode(mask: np.ndarray) -> "RleMask":
        m = np.asarray(mask, bool)
        flat = m.reshape(-1, order="F").astype(np.int8)
        change = np.nonzero(np.diff(flat))[0] + 1
        bounds = np.concatenate([[0], change, [flat.size]])
        counts = np.diff(bounds).tolist()
        if flat.size and flat[0] == 1:
            counts = [0] + counts
        elif not flat.size:
            counts = [0]
        return RleMask(size=m.shape, counts=counts)

    def decode(self) -> np.ndarray:
        H, W = self.size
        flat = np.zeros(H * W, dtype=bool)
        pos = 0
        val = False
        for c in self.counts:
            if val:
                flat[pos:pos + c] = True
            pos += c
            val = not val
        return flat.reshape((H, W), order="F")

    def area(self) -> int:
        return sum(self.counts[1::2])


@dataclass
class Sample:
    image: np.ndarray    # [3,H,W] uint8
    masks: list          # of RleMask
    source_id: str = ""

    def __post_init__(self):
        H, W = self.image.shape[1], self.image.shape[2]
        for m in self.masks:
            if tuple(m.size) != (H, W):
                raise ValueError(f"mask size {m.size} does not fit image {(H, W)}")


@dataclass(frozen=True)
class AugmentConfig:
    merge_containment_tau: float = 0.9
    outlier_prob: float = 0.1
    crop_prob: float = 0.5
    crop_dilation_range: tuple = (1.2, 2.0)

    def __post_init__(self):
        if not (0.0 < self.merge_containment_tau <= 1.0):
            raise ValueError("tau must be in (0,1]")
        for p in (self.outlier_prob, self.crop_prob):
            if not (0.0 <= p <= 1.0):
                raise ValueError("probabilities must be in [0,1]")
        lo, hi = self.crop_dilation_range
        if lo > hi or lo <= 0:
            raise ValueError("bad dilation range")


# --------------------------------------------------------------------------
# Whole-object augmentations
# --------------------------------------------------------------------------

def merge_nested_masks(masks, tau: float = 0.9):
    """Drop masks mostly covered by a strictly larger mask.

    A is removed iff some B has area(B) > area(A) and
    area(A∩B)/area(A) >= tau, judged against the original set, so the
    result is order-preserving and idempotent.
    """
    masks = list(masks)
    if not masks:
        return []
    size = tuple(masks[0].size)
    for m in masks:
        if tuple(m.size) != size:
            raise ValueError(f"mask sizes differ: {m.size} vs {size}")
    dec = np.stack([m.decode().reshape(-1) for m in masks]).astype(np.int64)
    areas = dec.sum(axis=1)
    inter = dec @ dec.T
    keep = []
    for i, m in enumerate(masks):
        if areas[i] > 0:
            covered = (areas > areas[i]) & (inter[i] / areas[i] >= tau)
            if covered.any():
                continue
        keep.append(m)
    return keep


def union_of_masks(masks, size) -> np.ndarray:
    out = np.zeros(size, dtype=bool)
    for m in masks:
        out |= m.decode()
    return out


def inject_outlier_click(clicks, occupied: np.ndarray, rng, prob: float):
    """Maybe append one stray fg click on a pixel no mask covers.

    The training target stays whatever it was; the point of the stray
    click is teaching the model to ignore off-object prompts. If the
    image has no free background pixel, nothing is added.
    """
    clicks = list(clicks)
    if prob <= 0.0 or rng.random() >= prob:
        return clicks
    ys, xs = np.nonzero(~np.asarray(occupied, bool))
    if len(xs) == 0:
        return clicks
    i = int(rng.integers(0, len(xs)))
    clicks.append(Click(int(xs[i]), int(ys[i]), "fg"))
    return clicks


def mask_bbox(mask: np.ndarray):
    ys, xs = np.nonzero(mask)
    if len(xs) == 0:
        raise ValueError("empty mask has no bounding box")
    return int(xs.min()), int(ys.min()), int(xs.max()), int(ys.max())


def resize_bilinear(image: np.ndarray, out_hw) -> np.ndarray:
    """Channel-wise bilinear resample with pixel-center alignment."""
    img = np.asarray(image, dtype=np.float64)
    squeeze = img.ndim == 2
    if squeeze:
        img = img[None]
    C, H, W = img.shape
    H2, W2 = out_hw
    ys = np.clip((np.arange(H2) + 0.5) * H / H2 - 0.5, 0, H - 1)
    xs = np.clip((np.arange(W2) + 0.5) * W / W2 - 0.5, 0, W - 1)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, H - 1)
    x1 = np.minimum(x0 + 1, W - 1)
    fy = (ys - y0)[None, :, None]
    fx = (xs - x0)[None, None, :]
    tl = img[:, y0[:, None], x0[None, :]]
    tr = img[:, y0[:, None], x1[None, :]]
    bl = img[:, y1[:, None], x0[None, :]]
    br = img[:, y1[:, None], x1[None, :]]
    out = (tl * (1 - fy) * (1 - fx) + tr * (1 - fy) * fx
           + bl * fy * (1 - fx) + br * fy * fx)
    return out[0] if squeeze else out


def resize_nearest(mask: np.ndarray, out_hw) -> np.ndarray:
    m = np.asarray(mask)
    H, W = m.shape
    H2, W2 = out_hw
    ys = np.minimum(((np.arange(H2) + 0.5) * H / H2).astype(int), H - 1)
    xs = np.minimum(((np.arange(W2) + 0.5) * W / W2).astype(int), W - 1)
    return m[ys[:, None], xs[None, :]]


def center_crop_around_object(sample: Sample, target_mask: np.ndarray, rng,
                              cfg: AugmentConfig, out_size: int,
                              force_dilation: float | None = None):
    """Zoom toward one object, then resample everything to out_size.

    With probability crop_prob the window is the target's bbox dilated
    by a uniform factor from crop_dilation_range about the bbox center,
    clamped to the image; masks emptied by the crop are dropped.
    force_dilation pins the factor (and forces the crop) for testing.

    Returns (new sample, new target mask array).
    """
    H, W = sample.image.shape[1], sample.image.shape[2]
    if not target_mask.any():
        raise ValueError("target mask is empty")
    do_crop = force_dilation is not None or rng.random() < cfg.crop_prob
    if force_dilation is None and do_crop:
        lo, hi = cfg.crop_dilation_range
        d = float(rng.uniform(lo, hi))
    else:
        d = force_dilation if force_dilation is not None else 1.0

    if do_crop:
        x0, y0, x1, y1 = mask_bbox(target_mask)
        cx, cy = (x0 + x1) / 2.0, (y0 + y1) / 2.0
        hw = (x1 - x0 + 1) * d / 2.0
        hh = (y1 - y0 + 1) * d / 2.0
        wx0 = max(0, int(round(cx - hw + 0.5)))
        wy0 = max(0, int(round(cy - hh + 0.5)))
        wx1 = min(W - 1, int(round(cx + hw - 0.5)))
        wy1 = min(H - 1, int(round(cy + hh - 0.5)))
    else:
        wx0, wy0, wx1, wy1 = 0, 0, W - 1, H - 1

    win = (slice(wy0, wy1 + 1), slice(wx0, wx1 + 1))
    image = resize_bilinear(sample.image[:, win[0], win[1]], (out_size, out_size))
    image = np.clip(np.rint(image), 0, 255).astype(np.uint8)
    new_masks = []
    for m in sample.masks:
        cropped = resize_nearest(m.decode()[win], (out_size, out_size))
        if cropped.any():
            new_masks.append(RleMask.encode(cropped))
    new_target = resize_nearest(target_mask[win], (out_size, out_size))
    return Sample(image=image, masks=new_masks, source_id=sample.source_id), new_target


def sample_training_clicks(mask: np.ndarray, n: int, rng):
    """n i.i.d. uniform (with replacement) fg clicks on mask pixels."""
    if n < 1:
        raise ValueError("need at least one click")
    ys, xs = np.nonzero(np.asarray(mask, bool))
    if len(xs) == 0:
        raise ValueError("cannot click on an empty mask")
    picks = rng.integers(0, len(xs), size=n)
    return [Click(int(xs[i]), int(ys[i]), "fg") for i in picks]


# --------------------------------------------------------------------------
# Synthetic nested-shape scenes
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class SceneSpec:
    canvas: int = 64
    min_objects: int = 1
    max_objects: int = 3
    min_parts: int = 1
    max_parts: int = 2
    noise_sigma: float = 5.0


@dataclass
class SceneMeta:
    roles: list = field(default_factory=list)   # per mask: (role, object_index)


def _ellipse_mask(size, cx, cy, rx, ry):
    ys, xs = np.mgrid[0:size, 0:size]
    return ((xs - cx) / rx) ** 2 + ((ys - cy) / ry) ** 2 <= 1.0


def _rounded_rect_mask(size, cx, cy, hw, hh, r):
    ys, xs = np.mgrid[0:size, 0:size]
    dx = np.abs(xs - cx) - (hw - r)
    dy = np.abs(ys - cy) - (hh - r)
    outside = np.sqrt(np.maximum(dx, 0) ** 2 + np.maximum(dy, 0) ** 2)
    inside = np.minimum(np.maximum(dx, dy), 0)
    return (outside + inside) <= r


def _random_base(rng, size):
    r_lo, r_hi = size * 0.10, size * 0.22
    rx, ry = rng.uniform(r_lo, r_hi), rng.uniform(r_lo, r_hi)
    margin = max(rx, ry) * 1.6 + 2
    cx = rng.uniform(margin, size - margin)
    cy = rng.uniform(margin, size - margin)
    if rng.random() < 0.5:
        return _ellipse_mask(size, cx, cy, rx, ry), (cx, cy, max(rx, ry))
    r = min(rx, ry) * rng.uniform(0.2, 0.5)
    return _rounded_rect_mask(size, cx, cy, rx, ry, r), (cx, cy, max(rx, ry))


def _attach_part(rng, size, base, center, radius):
    """A smaller shape overlapping the base but poking out of it."""
    cx0, cy0, rb = center[0], center[1], radius
    for _ in range(40):
        ang = rng.uniform(0, 2 * np.pi)
        pr = rb * rng.uniform(0.35, 0.6)
        dist = rb * rng.uniform(0.8, 1.1)
        pcx = cx0 + np.cos(ang) * dist
        pcy = cy0 + np.sin(ang) * dist
        part = _ellipse_mask(size, pcx, pcy, pr, pr * rng.uniform(0.7, 1.3))
        if (part & base).any() and (part & ~base).any() and part.sum() >= 4 \
                and (part & ~base).sum() >= 2:
            return part
    return None


def generate_synthetic_scene(rng, spec: SceneSpec = SceneSpec()):
    """Build one scene of blobby objects with attached protruding parts.

    Emits, per object: one mask per part, the base mask, and the
    composite (base ∪ parts) — the nested structure whole-object
    training cares about. Returns (Sample, SceneMeta).
    """
    size = spec.canvas
    n_objects = int(rng.integers(spec.min_objects, spec.max_objects + 1))
    occupied = np.zeros((size, size), bool)
    image = np.zeros((3, size, size), np.float64)
    image += rng.uniform(20, 90, size=3)[:, None, None]
    masks, roles = [], []

    placed = 0
    attempts = 0
    while placed < n_objects and attempts < 60:
        attempts += 1
        base, (cx, cy, rb) = _random_base(rng, size)
        footprint = _ellipse_mask(size, cx, cy, rb * 2.2, rb * 2.2)
        if (footprint & occupied).any() or base.sum() < 16:
            continue
        n_parts = int(rng.integers(spec.min_parts, spec.max_parts + 1))
        parts = []
        for _ in range(n_parts):
            p = _attach_part(rng, size, base, (cx, cy), rb)
            if p is not None:
                parts.append(p)
        if not parts:
            continue
        composite = base.copy()
        for p in parts:
            composite |= p
        if not (composite.sum() > base.sum()):
            continue

        base_color = rng.uniform(100, 255, size=3)
        image[:, base] = base_color[:, None]
        for p in parts:
            part_color = np.clip(base_color + rng.uniform(-70, 70, size=3), 40, 255)
            image[:, p & ~base] = part_color[:, None]

        for p in parts:
            masks.append(RleMask.encode(p))
            roles.append(("part", placed))
        masks.append(RleMask.encode(base))
        roles.append(("base", placed))
        masks.append(RleMask.encode(composite))
        roles.append(("composite", placed))
        occupied |= composite
        placed += 1

    noise = rng.normal(0, spec.noise_sigma, size=image.shape)
    img8 = np.clip(image + noise, 0, 255).astype(np.uint8)
    return Sample(image=img8, masks=masks, source_id=f"synthetic-{placed}obj"), SceneMeta(roles)


def generate_dataset(seed: int, count: int, spec: SceneSpec = SceneSpec()):
    """count scenes, each from an independent child seed (reproducible)."""
    from .tensor import make_rng
    out = []
    for i in range(count):
        out.append(generate_synthetic_scene(make_rng(seed * 1_000_003 + i), spec))
    return out


# --------------------------------------------------------------------------
# COCO-style directory format
# --------------------------------------------------------------------------

def save_dataset(root: str, samples) -> None:
    """images/*.png plus annotations.json (COCO instance subset)."""
    from PIL import Image
    os.makedirs(os.path.join(root, "images"), exist_ok=True)
    images, annotations = [], []
    ann_id = 1
    for i, s in enumerate(samples):
        fname = f"{i:06d}.png"
        H, W = s.image.shape[1], s.image.shape[2]
        Image.fromarray(s.image.transpose(1, 2, 0)).save(os.path.join(root, "images", fname))
        images.append({"id": i + 1, "file_name": fname, "height": H, "width": W,
                       "source_id": s.source_id})
        for m in s.masks:
            dec = m.decode()
            x0, y0, x1, y1 = mask_bbox(dec) if dec.any() else (0, 0, 0, 0)
            annotations.append({
                "id": ann_id, "image_id": i + 1,
                "segmentation": {"size": [m.size[0], m.size[1]], "counts": list(m.counts)},
                "area": m.area(), "bbox": [x0, y0, x1 - x0 + 1, y1 - y0 + 1],
            })
            ann_id += 1
    with open(os.path.join(root, "annotations.json"), "w") as f:
        json.dump({"images": images, "annotations": annotations}, f)


def _polygon_to_mask(polys, H, W) -> np.ndarray:
    from PIL import Image, ImageDraw
    img = Image.new("1", (W, H), 0)
    draw = ImageDraw.Draw(img)
    for poly in polys:
        draw.polygon([(poly[i], poly[i + 1]) for i in range(0, len(poly), 2)],
                     outline=1, fill=1)
    return np.asarray(img, bool)


def load_dataset(root: str):
    """Read the directory format back into Samples (order by image id)."""
    from PIL import Image
    with open(os.path.join(root, "annotations.json")) as f:
        meta = json.load(f)
    by_image = {}
    for ann in meta["annotations"]:
        by_image.setdefault(ann["image_id"], []).append(ann)
    samples = []
    for info in sorted(meta["images"], key=lambda d: d["id"]):
        arr = np.asarray(Image.open(os.path.join(root, "images", info["file_name"])).convert("RGB"))
        image = arr.transpose(2, 0, 1).copy()
        H, W = info["height"], info["width"]
        masks = []
        for ann in sorted(by_image.get(info["id"], []), key=lambda d: d["id"]):
            seg = ann["segmentation"]
            if isinstance(seg, dict):
                masks.append(RleMask(size=(seg["size"][0], seg["size"][1]),
                                     counts=list(seg["counts"])))
            else:
                masks.append(RleMask.encode(_polygon_to_mask(seg, H, W)))
        samples.append(Sample(image=image, masks=masks, source_id=info.get("source_id", "")))
    return samples
