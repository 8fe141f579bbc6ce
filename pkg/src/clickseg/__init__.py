"""Interactive click-to-segment toolkit.

A small UNet with a transformer bottleneck, prompt channels fused into
the input, saliency-seeded automatic clicks, int8 weight quantization
with a stable on-disk format, and an HTTP segmentation service.
"""

__version__ = "0.1.0"
