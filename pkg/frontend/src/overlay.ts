// Canvas rendering for the studio page: base image, tinted mask overlay at
// adjustable opacity, and click markers color-coded by polarity. The pure
// coordinate/pixel helpers live here too so they can be tested headlessly.

import type { ClickPoint, Polarity } from './api.js';

export interface ImagePoint {
  x: number;
  y: number;
}

export const MARKER_COLORS: Record<Polarity, string> = {
  fg: '#22c55e',
  bg: '#ef4444',
};

export const MASK_TINT: [number, number, number] = [56, 132, 255];

/**
 * Map a canvas-space position to integer image coordinates, or null when the
 * position falls outside the image (such clicks are ignored).
 */
export function mapCanvasToImage(
  canvasX: number,
  canvasY: number,
  canvasSize: number,
  imageSize: number,
): ImagePoint | null {
  const x = Math.floor((canvasX / canvasSize) * imageSize);
  const y = Math.floor((canvasY / canvasSize) * imageSize);
  if (x < 0 || y < 0 || x >= imageSize || y >= imageSize) return null;
  return { x, y };
}

/** Canvas-space center of image pixel `point` (for drawing markers). */
export function imageToCanvas(
  point: ImagePoint,
  canvasSize: number,
  imageSize: number,
): { x: number; y: number } {
  return {
    x: ((point.x + 0.5) * canvasSize) / imageSize,
    y: ((point.y + 0.5) * canvasSize) / imageSize,
  };
}

/**
 * Rewrite decoded grayscale mask pixels (RGBA, r=g=b=value) in place into a
 * solid tint whose alpha keys on the mask value: opaque where the mask is on,
 * fully transparent where it is off.
 */
export function tintMaskPixels(
  pixels: Uint8ClampedArray,
  rgb: [number, number, number],
): void {
  for (let i = 0; i < pixels.length; i += 4) {
    const on = (pixels[i] ?? 0) > 127;
    pixels[i] = rgb[0];
    pixels[i + 1] = rgb[1];
    pixels[i + 2] = rgb[2];
    pixels[i + 3] = on ? 255 : 0;
  }
}

export function decodePng(bytes: Uint8Array): Promise<ImageBitmap> {
  return createImageBitmap(new Blob([bytes as unknown as BlobPart], { type: 'image/png' }));
}

/** Render a mask bitmap into a same-sized canvas holding its tinted version. */
export function tintMask(mask: ImageBitmap, rgb: [number, number, number]): HTMLCanvasElement {
  const canvas = document.createElement('canvas');
  canvas.width = mask.width;
  canvas.height = mask.height;
  const ctx = canvas.getContext('2d');
  if (!ctx) throw new Error('2d canvas unavailable');
  ctx.drawImage(mask, 0, 0);
  const data = ctx.getImageData(0, 0, canvas.width, canvas.height);
  tintMaskPixels(data.data, rgb);
  ctx.putImageData(data, 0, 0);
  return canvas;
}

export interface SceneParts {
  image: ImageBitmap | null;
  mask: HTMLCanvasElement | null;
  autoClicks: ClickPoint[];
  clicks: ClickPoint[];
  imageSize: number;
  opacity: number;
}

export function drawScene(ctx: CanvasRenderingContext2D, parts: SceneParts): void {
  const size = ctx.canvas.width;
  ctx.imageSmoothingEnabled = false;
  ctx.clearRect(0, 0, size, size);
  if (parts.image) ctx.drawImage(parts.image, 0, 0, size, size);
  if (parts.mask) {
    ctx.globalAlpha = parts.opacity;
    ctx.drawImage(parts.mask, 0, 0, size, size);
    ctx.globalAlpha = 1;
  }
  // Auto-seeded clicks render hollow, user clicks filled; both polarity-colored.
  for (const click of parts.autoClicks) drawMarker(ctx, click, parts.imageSize, false);
  for (const click of parts.clicks) drawMarker(ctx, click, parts.imageSize, true);
}

function drawMarker(
  ctx: CanvasRenderingContext2D,
  click: ClickPoint,
  imageSize: number,
  filled: boolean,
): void {
  const { x, y } = imageToCanvas(click, ctx.canvas.width, imageSize);
  ctx.beginPath();
  ctx.arc(x, y, 6, 0, 2 * Math.PI);
  if (filled) {
    ctx.fillStyle = MARKER_COLORS[click.polarity];
    ctx.fill();
    ctx.strokeStyle = '#ffffff';
    ctx.lineWidth = 1.5;
    ctx.stroke();
  } else {
    ctx.strokeStyle = MARKER_COLORS[click.polarity];
    ctx.lineWidth = 2;
    ctx.stroke();
  }
}
