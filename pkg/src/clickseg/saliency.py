"""Turn a saliency heatmap into synthetic prompt clicks.

Pipeline: global Otsu threshold over 256 uniform bins, 8-connected blob
extraction, pick the blob with the highest heatmap value (frequency of
that max breaks ties), then emit 5 gravity points: the blob centroid
plus the centroids of the four quadrants around it, every point snapped
onto the blob.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

OTSU_BINS = 256


class DegenerateInputError(ValueError):
    """Input carries no usable signal (e.g. a constant heatmap)."""


class NoSalientRegionError(ValueError):
    """Thresholding left no foreground pixels."""


def validate_heatmap(values: np.ndarray) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64)
    if v.ndim != 2:
        raise ValueError(f"heatmap must be 2-d; got shape {v.shape}")
    if not np.all(np.isfinite(v)):
        raise ValueError("heatmap contains non-finite values")
    if v.size and (v.min() < 0.0 or v.max() > 1.0):
        raise ValueError("heatmap values must lie in [0,1]")
    return v


def otsu_threshold(heatmap: np.ndarray, bins: int = OTSU_BINS) -> float:
    """Bin-edge threshold maximizing between-class variance.

    Bins partition [0,1] uniformly; the returned threshold is the upper
    edge of the chosen split bin, and ties go to the lowest threshold.
    """
    v = validate_heatmap(heatmap)
    if v.size == 0 or v.min() == v.max():
        raise DegenerateInputError("constant heatmap has no threshold")
    idx = np.minimum((v * bins).astype(np.int64), bins - 1)
    hist = np.bincount(idx.reshape(-1), minlength=bins).astype(np.float64)
    return _otsu_from_histogram(hist, bins)


def _otsu_from_histogram(hist: np.ndarray, bins: int) -> float:
    centers = (np.arange(bins) + 0.5) / bins
    w0 = np.cumsum(hist)
    total = w0[-1]
    w1 = total - w0
    s0 = np.cumsum(hist * centers)
    m0 = np.divide(s0, w0, out=np.zeros(bins), where=w0 > 0)
    m1 = np.divide(s0[-1] - s0, w1, out=np.zeros(bins), where=w1 > 0)
    between = w0 * w1 * (m0 - m1) ** 2
    between[w0 == 0] = -1.0
    between[w1 == 0] = -1.0
    return float(int(np.argmax(between)) + 1) / bins


def binarize(heatmap: np.ndarray, threshold: float) -> np.ndarray:
    return np.asarray(heatmap, dtype=np.float64) >= threshold


@dataclass(frozen=True)
class Blob:
    pixels: frozenset          # of (x, y)
    max_value: float
    max_count: int
    centroid: tuple            # (cx, cy) floats
    label: int

    def pixel_arrays(self):
        """(xs, ys) int arrays in (y, x) raster order — deterministic."""
        pts = sorted(self.pixels, key=lambda p: (p[1], p[0]))
        arr = np.asarray(pts, dtype=np.int64).reshape(-1, 2)
        return arr[:, 0], arr[:, 1]


def label_components(binary: np.ndarray) -> np.ndarray:
    """8-connected labeling, labels 1..n in raster order of first pixel.

    Works by iterated minimum-label propagation over the 8 neighbor
    shifts until a fixed point; each component ends up holding the
    smallest raster index among its pixels.
    """
    fg = np.asarray(binary, bool)
    H, W = fg.shape
    labels = np.where(fg, np.arange(1, H * W + 1, dtype=np.int64).reshape(H, W), 0)
    shifts = [(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)]
    while True:
        prev = labels.copy()
        for dy, dx in shifts:
            src = labels[max(0, -dy):H - max(0, dy), max(0, -dx):W - max(0, dx)]
            dst = labels[max(0, dy):H - max(0, -dy), max(0, dx):W - max(0, -dx)]
            np.minimum(dst, np.where(src > 0, src, np.int64(np.iinfo(np.int64).max)),
                       out=dst, where=dst > 0)
        if np.array_equal(labels, prev):
            break
    out = np.zeros_like(labels, dtype=np.int32)
    ids = [v for v in dict.fromkeys(labels.reshape(-1).tolist()) if v > 0]
    ids.sort()
    for new, old in enumerate(ids, start=1):
        out[labels == old] = new
    return out


def extract_blobs(binary: np.ndarray, heatmap: np.ndarray) -> list:
    """Blobs of the binary mask annotated with heatmap statistics."""
    v = np.asarray(heatmap, dtype=np.float64)
    if binary.shape != v.shape:
        raise ValueError(f"mask shape {binary.shape} != heatmap shape {v.shape}")
    labels = label_components(binary)
    blobs = []
    for lab in range(1, labels.max() + 1):
        ys, xs = np.nonzero(labels == lab)
        vals = v[ys, xs]
        mx = float(vals.max())
        blobs.append(Blob(
            pixels=frozenset(zip(xs.tolist(), ys.tolist())),
            max_value=mx,
            max_count=int((vals == mx).sum()),
            centroid=(float(xs.mean()), float(ys.mean())),
            label=lab,
        ))
    return blobs


def select_salient_blob(blobs) -> Blob:
    """Highest max value; ties: larger max frequency, larger area, lowest label."""
    blobs = list(blobs)
    if not blobs:
        raise NoSalientRegionError("no blobs to choose from")
    return max(blobs, key=lambda b: (b.max_value, b.max_count, len(b.pixels), -b.label))


def snap_to_blob(blob: Blob, x: float, y: float):
    """Nearest blob pixel by Euclidean distance; ties to smaller y, then x."""
    xs, ys = blob.pixel_arrays()
    d2 = (xs - x) ** 2 + (ys - y) ** 2
    best = np.nonzero(d2 == d2.min())[0]
    # pixel_arrays is already (y, x)-sorted, so the first hit wins ties
    i = best[0]
    return int(xs[i]), int(ys[i])


def quadrant_centroids(blob: Blob):
    """Raw (unsnapped) centroids of the four quadrants around the blob
    centroid, ordered TL, TR, BL, BR. Boundary pixels (x == cx or
    y == cy) belong to the >= side. An empty quadrant yields None.
    """
    xs, ys = blob.pixel_arrays()
    cx, cy = blob.centroid
    out = []
    for qy in (ys < cy, ys >= cy):
        for qx in (xs < cx, xs >= cx):
            sel = qx & qy
            out.append((float(xs[sel].mean()), float(ys[sel].mean())) if sel.any() else None)
    return out


def sample_five_clicks(blob: Blob):
    """Gravity points: whole centroid + 4 quadrant centroids, snapped.

    Every point is snapped to the nearest blob pixel, so all five land
    inside the blob; a quadrant with no pixels reuses the center point.
    """
    if not blob.pixels:
        raise ValueError("empty blob")
    cx, cy = blob.centroid
    center = snap_to_blob(blob, cx, cy)
    points = [center]
    for q in quadrant_centroids(blob):
        points.append(center if q is None else snap_to_blob(blob, q[0], q[1]))
    return points


def grid_clicks(shape, count: int = 5):
    """Fixed image-grid points (center + four quarter points); A/B baseline."""
    H, W = shape
    pts = [(W // 2, H // 2), (W // 4, H // 4), (3 * W // 4, H // 4),
           (W // 4, 3 * H // 4), (3 * W // 4, 3 * H // 4),
           (W // 2, H // 4), (W // 2, 3 * H // 4), (W // 4, H // 2), (3 * W // 4, H // 2)]
    if count > len(pts):
        raise ValueError(f"at most {len(pts)} grid points supported")
    return pts[:count]


def salient_blob_from_heatmap(heatmap: np.ndarray):
    """(chosen blob, binary map) after thresholding and blob selection."""
    v = validate_heatmap(heatmap)
    t = otsu_threshold(v)
    binary = binarize(v, t)
    blobs = extract_blobs(binary, v)
    return select_salient_blob(blobs), binary


def synthesize_clicks(heatmap: np.ndarray, strategy: str = "blob"):
    """5 prompt points from a heatmap. strategy: 'blob' or 'grid'."""
    if strategy == "grid":
        return grid_clicks(np.asarray(heatmap).shape)
    if strategy != "blob":
        raise ValueError(f"unknown strategy {strategy!r}")
    blob, _ = salient_blob_from_heatmap(heatmap)
    return sample_five_clicks(blob)


def baseline_saliency(image: np.ndarray) -> np.ndarray:
    """Cheap stand-in for a saliency model: color contrast times a center prior.

    Contrast is the L2 distance of each pixel's color to the global mean
    color; the prior is a centered Gaussian with sigma = 0.3*min(H,W).
    The product is min-max normalized; a zero-contrast image gives zeros.
    """
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 3 or img.shape[0] != 3:
        raise ValueError(f"image must be [3,H,W]; got {img.shape}")
    _, H, W = img.shape
    mean_color = img.mean(axis=(1, 2))
    contrast = np.sqrt(((img - mean_color[:, None, None]) ** 2).sum(axis=0))
    sigma = 0.3 * min(H, W)
    ys, xs = np.mgrid[0:H, 0:W]
    prior = np.exp(-(((xs - (W - 1) / 2.0) ** 2 + (ys - (H - 1) / 2.0) ** 2)
                     / (2.0 * sigma * sigma)))
    sal = contrast * prior
    lo, hi = sal.min(), sal.max()
    if hi - lo < 1e-12:
        return np.zeros((H, W), dtype=np.float64)
    return (sal - lo) / (hi - lo)


# -- heatmap file ingestion --------------------------------------------------

RAW_MAGIC = b"HMF1"


def heatmap_from_bytes(blob: bytes) -> np.ndarray:
    """Decode a heatmap from serialized bytes: grayscale image or raw f32.

    The raw format is: 4-byte magic 'HMF1', u32 height, u32 width
    (little endian), then height*width float32 values, row major.
    Image payloads (e.g. 8-bit grayscale PNG) are mapped to [0,1] via /255.
    """
    if blob[:4] == RAW_MAGIC:
        if len(blob) < 12:
            raise ValueError("raw heatmap truncated before dimensions")
        H, W = struct.unpack("<II", blob[4:12])
        if len(blob) < 12 + 4 * H * W:
            raise ValueError("raw heatmap truncated before payload end")
        data = np.frombuffer(blob, dtype="<f4", offset=12, count=H * W).reshape(H, W)
        return validate_heatmap(data.astype(np.float64))
    import io

    from PIL import Image, UnidentifiedImageError
    try:
        arr = np.asarray(Image.open(io.BytesIO(blob)).convert("L"), dtype=np.float64) / 255.0
    except UnidentifiedImageError as exc:
        raise ValueError("not a raw heatmap (bad magic) nor a decodable image") from exc
    return validate_heatmap(arr)


def load_heatmap(path: str) -> np.ndarray:
    """Read a heatmap file: 8-bit grayscale PNG (/255) or raw f32 sidecar."""
    with open(str(path), "rb") as f:
        return heatmap_from_bytes(f.read())


def save_heatmap_raw(path: str, values: np.ndarray) -> None:
    v = validate_heatmap(values).astype("<f4")
    with open(path, "wb") as f:
        f.write(RAW_MAGIC)
        f.write(struct.pack("<II", v.shape[0], v.shape[1]))
        f.write(v.tobytes())
