// DOM wiring for the studio page. All segmentation state lives in
// StudioSession; this file only translates DOM events into state calls and
// repaints when the state changes.

import { createApi } from './api.js';
import { decodePng, drawScene, mapCanvasToImage, tintMask, MASK_TINT } from './overlay.js';
import { StudioSession, type StudioState, type Tool } from './state.js';

const api = createApi(''); // same origin: the page is served next to /v1
const studio = new StudioSession(api);

function el<T extends HTMLElement>(id: string): T {
  const node = document.getElementById(id);
  if (!node) throw new Error(`missing element #${id}`);
  return node as T;
}

const fileInput = el<HTMLInputElement>('file');
const canvas = el<HTMLCanvasElement>('canvas');
const hint = el<HTMLElement>('hint');
const toolButtons: Record<Tool, HTMLButtonElement> = {
  fg: el<HTMLButtonElement>('tool-fg'),
  bg: el<HTMLButtonElement>('tool-bg'),
  undo: el<HTMLButtonElement>('tool-undo'),
};
const opacitySlider = el<HTMLInputElement>('opacity');
const candidateStrip = el<HTMLElement>('candidates');
const exportButton = el<HTMLButtonElement>('export');
const toast = el<HTMLElement>('toast');
const toastMessage = el<HTMLElement>('toast-message');
const retryButton = el<HTMLButtonElement>('retry');
const statusLine = el<HTMLElement>('status');

const bitmapCache = new WeakMap<Uint8Array, Promise<ImageBitmap>>();

function bitmapFor(bytes: Uint8Array): Promise<ImageBitmap> {
  let cached = bitmapCache.get(bytes);
  if (!cached) {
    cached = decodePng(bytes);
    bitmapCache.set(bytes, cached);
  }
  return cached;
}

fileInput.addEventListener('change', () => {
  const file = fileInput.files?.[0];
  if (!file) return;
  void file.arrayBuffer().then((buffer) => {
    void studio.uploadImage(new Uint8Array(buffer), file.type || 'image/png');
  });
});

canvas.addEventListener('click', (event) => {
  const state = studio.getState();
  if (state.imageSize === null) return;
  const rect = canvas.getBoundingClientRect();
  const point = mapCanvasToImage(
    event.clientX - rect.left,
    event.clientY - rect.top,
    rect.width,
    state.imageSize,
  );
  if (!point) return; // outside the image: ignored
  void studio.clickCanvas(point.x, point.y);
});

for (const [tool, button] of Object.entries(toolButtons) as [Tool, HTMLButtonElement][]) {
  button.addEventListener('click', () => {
    if (tool === 'undo') {
      void studio.undo();
    } else {
      studio.setTool(tool);
    }
  });
}

opacitySlider.addEventListener('input', () => {
  studio.setOpacity(Number(opacitySlider.value) / 100);
});

exportButton.addEventListener('click', () => {
  void studio
    .exportMask()
    .then((bytes) => {
      const url = URL.createObjectURL(new Blob([bytes as unknown as BlobPart], { type: 'image/png' }));
      const link = document.createElement('a');
      link.href = url;
      link.download = 'mask.png';
      link.click();
      URL.revokeObjectURL(url);
    })
    .catch(() => {
      // failure already lands on state.toast
    });
});

retryButton.addEventListener('click', () => {
  void studio.retry();
});

let renderToken = 0;

async function render(state: StudioState): Promise<void> {
  const token = ++renderToken;

  toolButtons.fg.classList.toggle('active', state.tool === 'fg');
  toolButtons.bg.classList.toggle('active', state.tool === 'bg');
  toolButtons.undo.disabled = state.clicks.length === 0;
  exportButton.disabled = !studio.canExport();
  statusLine.textContent = state.busy ? 'working…' : '';
  hint.hidden = !studio.isAwaitingFirstClick();
  toast.hidden = state.toast === null;
  toastMessage.textContent = state.toast ?? '';

  renderCandidates(state);

  const image = state.sourceImage ? await bitmapFor(state.sourceImage) : null;
  const maskBitmap = state.overlay ? await bitmapFor(state.overlay) : null;
  if (token !== renderToken) return; // a newer state arrived while decoding
  const ctx = canvas.getContext('2d');
  if (!ctx) return;
  drawScene(ctx, {
    image,
    mask: maskBitmap ? tintMask(maskBitmap, MASK_TINT) : null,
    autoClicks: state.autoClicks,
    clicks: state.clicks,
    imageSize: state.imageSize ?? canvas.width,
    opacity: state.opacity,
  });
}

function renderCandidates(state: StudioState): void {
  candidateStrip.replaceChildren();
  for (const candidate of state.candidates) {
    const tile = document.createElement('button');
    tile.className = 'candidate';
    tile.classList.toggle('selected', candidate.index === state.overlayIndex);
    const thumb = document.createElement('canvas');
    thumb.width = 96;
    thumb.height = 96;
    const label = document.createElement('span');
    label.textContent = `IoU ${candidate.iou.toFixed(2)}`;
    tile.append(thumb, label);
    tile.addEventListener('click', () => studio.selectCandidate(candidate.index));
    candidateStrip.append(tile);
    void bitmapFor(candidate.png).then((bitmap) => {
      const ctx = thumb.getContext('2d');
      if (!ctx) return;
      ctx.imageSmoothingEnabled = false;
      ctx.drawImage(bitmap, 0, 0, thumb.width, thumb.height);
    });
  }
}

studio.subscribe((state) => {
  void render(state);
});
void render(studio.getState());
