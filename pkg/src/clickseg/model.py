"""Click-to-segment network: UNet encoder/decoder around a transformer.

The prompt enters twice. Early: clicks are painted as signed circles
into a 4th input channel and the box as a filled rectangle into a 5th.
Late: each click also becomes a token that attends with the bottleneck,
mask and IoU-score tokens. The decoder output is combined with the mask
tokens by a per-pixel channel dot product, giving k candidate masks and
k predicted quality scores.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import blocks as B
from . import tensor as T
from .tensor import ShapeError, Tensor

INPUT_CHANNELS = 5  # RGB + click circles + box rectangle
FOURIER_FREQS = 8   # sin/cos pairs per axis -> 4*FOURIER_FREQS features
POLARITIES = ("fg", "bg")


@dataclass(frozen=True)
class ModelConfig:
    input_size: int = 1024
    channel_schedule: tuple = (16, 32, 64, 128, 128, 128, 256, 256, 256, 256)
    transformer_layers: int = 2
    token_dim: int = 256
    head_count: int = 8
    mask_count: int = 4
    click_channel_radius_frac: float = 0.01

    def __post_init__(self):
        object.__setattr__(self, "channel_schedule", tuple(self.channel_schedule))
        n = self.down_stages
        if 2 ** n != self.input_size:
            raise ValueError(
                f"input_size {self.input_size} != 2^{n}; the encoder must reach a 1x1 bottleneck")
        if max(self.channel_schedule) > 256:
            raise ValueError("channel_schedule exceeds the 256-channel cap")
        if self.channel_schedule[-1] != self.token_dim:
            raise ValueError("last encoder stage must emit token_dim channels")
        if self.mask_count != 4:
            raise ValueError("mask_count is fixed at 4")
        if self.token_dim % self.head_count:
            raise ValueError(f"token_dim {self.token_dim} not divisible by {self.head_count} heads")

    @property
    def down_stages(self) -> int:
        return len(self.channel_schedule)

    @property
    def click_radius(self) -> int:
        return max(2, round(self.click_channel_radius_frac * self.input_size))

    def decoder_channels(self) -> list:
        sched = self.channel_schedule
        return list(reversed(sched[:-1])) + [sched[0]]

    def to_dict(self) -> dict:
        return {
            "input_size": self.input_size,
            "channel_schedule": list(self.channel_schedule),
            "transformer_layers": self.transformer_layers,
            "token_dim": self.token_dim,
            "head_count": self.head_count,
            "mask_count": self.mask_count,
            "click_channel_radius_frac": self.click_channel_radius_frac,
        }

    @staticmethod
    def from_dict(d: dict) -> "ModelConfig":
        return ModelConfig(**{k: (tuple(v) if k == "channel_schedule" else v) for k, v in d.items()})


# A toy setup small enough to train on a CPU in minutes.
TOY_CONFIG = ModelConfig(input_size=64, channel_schedule=(16, 24, 32, 48, 64, 96),
                         token_dim=96, head_count=4)


@dataclass(frozen=True)
class Click:
    x: int
    y: int
    polarity: str = "fg"

    def __post_init__(self):
        if self.polarity not in POLARITIES:
            raise ValueError(f"polarity must be one of {POLARITIES}; got {self.polarity!r}")


@dataclass(frozen=True)
class PromptSet:
    """Clicks plus an optional box.

    Exact-duplicate clicks are dropped (keeping first occurrence), so
    repeating a click is a no-op for the whole model — both the painted
    disk and the token sequence come out identical.
    """

    clicks: tuple = ()
    box: tuple | None = None  # (x0, y0, x1, y1) inclusive

    def __post_init__(self):
        coerced = [c if isinstance(c, Click) else Click(*c) for c in self.clicks]
        deduped, seen = [], set()
        for c in coerced:
            key = (c.x, c.y, c.polarity)
            if key not in seen:
                seen.add(key)
                deduped.append(c)
        object.__setattr__(self, "clicks", tuple(deduped))
        if self.box is not None:
            x0, y0, x1, y1 = self.box
            if x0 > x1 or y0 > y1:
                raise ValueError(f"degenerate box {self.box}")

    def validate_bounds(self, size: int) -> None:
        for c in self.clicks:
            if not (0 <= c.x < size and 0 <= c.y < size):
                raise ValueError(f"click ({c.x},{c.y}) outside [0,{size})")
        if self.box is not None:
            x0, y0, x1, y1 = self.box
            if not (0 <= x0 and x1 < size and 0 <= y0 and y1 < size):
                raise ValueError(f"box {self.box} outside [0,{size})")


@dataclass
class EncodedInput:
    tensor: np.ndarray  # [5,S,S] float32
    prompts: PromptSet


@dataclass
class SegmentationOutput:
    mask_logits: np.ndarray  # [k,S,S]
    iou_scores: np.ndarray   # [k]
    best_index: int


def normalize_image(image: np.ndarray) -> np.ndarray:
    """0..255 RGB -> roughly [-1, 1] float32."""
    return ((image.astype(np.float32) / 255.0) - 0.5) / 0.5


def paint_disk(channel: np.ndarray, x: int, y: int, radius: int, value: float) -> None:
    """Set channel pixels with (px-x)^2+(py-y)^2 <= radius^2, clipped to bounds."""
    H, W = channel.shape
    y0, y1 = max(0, y - radius), min(H - 1, y + radius)
    x0, x1 = max(0, x - radius), min(W - 1, x + radius)
    ys, xs = np.mgrid[y0:y1 + 1, x0:x1 + 1]
    inside = (xs - x) ** 2 + (ys - y) ** 2 <= radius * radius
    channel[y0:y1 + 1, x0:x1 + 1][inside] = value


def encode_prompts_early(image: np.ndarray, prompts: PromptSet, config: ModelConfig) -> EncodedInput:
    """Fuse prompts into the input as two extra channels."""
    S = config.input_size
    if image.shape != (3, S, S):
        raise ShapeError(f"image must be [3,{S},{S}]; got {image.shape}")
    prompts.validate_bounds(S)
    enc = np.zeros((INPUT_CHANNELS, S, S), dtype=np.float32)
    enc[:3] = normalize_image(image)
    r = config.click_radius
    for c in prompts.clicks:
        paint_disk(enc[3], c.x, c.y, r, 1.0 if c.polarity == "fg" else -1.0)
    if prompts.box is not None:
        x0, y0, x1, y1 = prompts.box
        enc[4, y0:y1 + 1, x0:x1 + 1] = 1.0
    return EncodedInput(tensor=enc, prompts=prompts)


def fourier_click_features(x: int, y: int, size: int) -> np.ndarray:
    """Sinusoidal position code for a click, 4*FOURIER_FREQS values."""
    feats = []
    for coord in ((x + 0.5) / size, (y + 0.5) / size):
        for i in range(FOURIER_FREQS):
            w = (2.0 ** i) * math.pi * coord
            feats.append(math.sin(w))
            feats.append(math.cos(w))
    return np.asarray(feats, dtype=np.float32)


class ClickSegNet(B.Layer):
    def __init__(self, config: ModelConfig, rng):
        super().__init__()
        self.config = config
        sched = config.channel_schedule
        n = config.down_stages

        prev = INPUT_CHANNELS
        downs = []
        for ch in sched:
            downs.append(B.DoubleConvDown(prev, ch, rng))
            prev = ch
        self.encoder = B.ModuleList(downs)

        self.transformers = B.ModuleList(
            [B.TransformerLayer(config.token_dim, config.head_count, rng)
             for _ in range(config.transformer_layers)])

        D = config.token_dim
        self.mask_tokens = Tensor(rng.standard_normal((config.mask_count, D)) * 0.02,
                                  dtype=np.float32, requires_grad=True)
        self.iou_token = Tensor(rng.standard_normal((1, D)) * 0.02,
                                dtype=np.float32, requires_grad=True)
        self.click_proj = B.Linear(4 * FOURIER_FREQS, D, rng)
        self.polarity_embed = Tensor(rng.standard_normal((2, D)) * 0.02,
                                     dtype=np.float32, requires_grad=True)

        dec_out = config.decoder_channels()
        ups = []
        in_ch = config.token_dim
        for i, out_ch in enumerate(dec_out):
            skip_ch = sched[n - 2 - i] if i < n - 1 else 0
            ups.append(B.DoubleConvUp(in_ch, skip_ch, out_ch, rng))
            in_ch = out_ch
        self.decoder = B.ModuleList(ups)

        self.head = B.MaskMlpHead(config.token_dim, dec_out[-1], config.mask_count, rng)

    # -- differentiable core ------------------------------------------------

    def click_tokens(self, clicks) -> list:
        toks = []
        S = self.config.input_size
        for c in clicks:
            feats = Tensor(fourier_click_features(c.x, c.y, S).reshape(1, -1))
            pos = self.click_proj.forward(feats)
            pol = T.narrow(self.polarity_embed, 0, POLARITIES.index(c.polarity), 1)
            toks.append(T.add(pos, pol))
        return toks

    def forward_tensors(self, encoded: Tensor, clicks_per_item):
        """encoded [M,5,S,S] -> (mask logits [M,k,S,S], iou scores [M,k]).

        Conv stages run batched; the token stage runs per item because
        each item carries its own click tokens, and tokens of different
        items must not attend to each other.
        """
        S = self.config.input_size
        M = encoded.shape[0]
        if tuple(encoded.shape) != (M, INPUT_CHANNELS, S, S) or M == 0:
            raise ShapeError(f"expected [M,{INPUT_CHANNELS},{S},{S}]; got {tuple(encoded.shape)}")
        if len(clicks_per_item) != M:
            raise ShapeError(f"{M} inputs but {len(clicks_per_item)} click lists")
        x = encoded
        skips = []
        for block in self.encoder:
            x = block.forward(x)
            skips.append(x)

        D = self.config.token_dim
        k = self.config.mask_count
        bottleneck = T.reshape(x, (M, D))
        bott_rows, vec_rows, iou_rows = [], [], []
        for m in range(M):
            seq = T.concat([T.narrow(bottleneck, 0, m, 1), self.mask_tokens, self.iou_token]
                           + self.click_tokens(clicks_per_item[m]), axis=0)
            for layer in self.transformers:
                seq = layer.forward(seq)
            bott_rows.append(T.narrow(seq, 0, 0, 1))
            vecs = self.head.mask_vectors(T.narrow(seq, 0, 1, k))
            vec_rows.append(T.reshape(vecs, (1, k, vecs.shape[1])))
            iou_rows.append(self.head.iou_scores(T.narrow(seq, 0, 1 + k, 1)))

        y = T.reshape(T.concat(bott_rows, axis=0), (M, D, 1, 1))
        n = self.config.down_stages
        for i, stage in enumerate(self.decoder):
            skip = skips[n - 2 - i] if i < n - 1 else None
            y = stage.forward(y, skip)

        logits = T.channel_dot(y, T.concat(vec_rows, axis=0))
        iou = T.concat(iou_rows, axis=0)
        return logits, iou

    # -- numpy-facing inference ----------------------------------------------

    def forward(self, encoded: EncodedInput) -> SegmentationOutput:
        """Pure inference: eval mode, no tape, numpy in and out."""
        was_training = self.training
        self.eval()
        try:
            with T.no_grad():
                logits, iou = self.forward_tensors(
                    Tensor(encoded.tensor[None]), [encoded.prompts.clicks])
        finally:
            self.train(was_training)
        scores = iou.numpy()[0].copy()
        if not np.all(np.isfinite(scores)):
            raise T.NumericError("non-finite quality scores")
        return SegmentationOutput(mask_logits=logits.numpy()[0].copy(), iou_scores=scores,
                                  best_index=int(np.argmax(scores)))

    def predict(self, image: np.ndarray, prompts: PromptSet) -> SegmentationOutput:
        return self.forward(encode_prompts_early(image, prompts, self.config))

    def astype(self, dtype):
        """Convert every parameter and buffer in place (tests run in f64)."""
        for _, p in self.named_parameters():
            p.data = p.data.astype(dtype)
        for holder in self._walk():
            for name in list(holder._buffers):
                holder.register_buffer(name, holder._buffers[name].astype(dtype))
        return self

    def _walk(self):
        stack = [self]
        while stack:
            layer = stack.pop()
            yield layer
            stack.extend(layer._children.values())


def select_best_mask(output: SegmentationOutput):
    """Binarize the highest-scoring candidate. Ties pick the lowest index."""
    idx = output.best_index
    probs = 1.0 / (1.0 + np.exp(-output.mask_logits[idx].astype(np.float64)))
    return probs > 0.5, float(output.iou_scores[idx])
