// Session state for the studio page. All mask pixels shown to the user come
// from server responses; this module never edits a mask locally. Requests are
// funneled through a single queue so at most one is in flight per session.

import type { ClickPoint, Polarity, SessionView, StudioApi } from './api.js';

export type Tool = Polarity | 'undo';

export interface Candidate {
  index: number;
  iou: number;
  png: Uint8Array;
}

export interface StudioState {
  sessionId: string | null;
  /** Server-side model input size; clicks use this coordinate system. */
  imageSize: number | null;
  /** Bytes of the most recently uploaded image (redrawn under the overlay). */
  sourceImage: Uint8Array | null;
  /** PNG bytes of the mask currently shown. Always a server-produced mask. */
  overlay: Uint8Array | null;
  /** Which candidate the overlay shows (defaults to the best-scoring one). */
  overlayIndex: number | null;
  bestIndex: number | null;
  iouScores: number[];
  candidates: Candidate[];
  autoClicks: ClickPoint[];
  /** User clicks, mirroring the server session history. */
  clicks: ClickPoint[];
  tool: Tool;
  opacity: number;
  busy: boolean;
  /** Error banner text; null when everything is fine. */
  toast: string | null;
}

export function initialState(): StudioState {
  return {
    sessionId: null,
    imageSize: null,
    sourceImage: null,
    overlay: null,
    overlayIndex: null,
    bestIndex: null,
    iouScores: [],
    candidates: [],
    autoClicks: [],
    clicks: [],
    tool: 'fg',
    opacity: 0.5,
    busy: false,
    toast: null,
  };
}

export function base64ToBytes(b64: string): Uint8Array {
  const raw = atob(b64);
  const out = new Uint8Array(raw.length);
  for (let i = 0; i < raw.length; i++) out[i] = raw.charCodeAt(i);
  return out;
}

export function bytesEqual(a: Uint8Array | null, b: Uint8Array | null): boolean {
  if (a === null || b === null) return a === b;
  if (a.length !== b.length) return false;
  for (let i = 0; i < a.length; i++) {
    if (a[i] !== b[i]) return false;
  }
  return true;
}

type Listener = (state: StudioState) => void;
type Op = () => Promise<void>;

export class StudioSession {
  private state = initialState();
  private readonly listeners = new Set<Listener>();
  private readonly queue: Op[] = [];
  private draining = false;
  private lastFailed: Op | null = null;

  constructor(private readonly api: StudioApi) {}

  getState(): StudioState {
    return this.state;
  }

  subscribe(listener: Listener): () => void {
    this.listeners.add(listener);
    return () => this.listeners.delete(listener);
  }

  setTool(tool: Tool): void {
    this.update({ tool });
  }

  setOpacity(opacity: number): void {
    this.update({ opacity: Math.min(1, Math.max(0, opacity)) });
  }

  dismissToast(): void {
    this.update({ toast: null });
  }

  /** True once a session exists but the model has not produced a mask yet. */
  isAwaitingFirstClick(): boolean {
    return this.state.sessionId !== null && this.state.overlay === null;
  }

  canExport(): boolean {
    return this.state.sessionId !== null && this.state.overlay !== null;
  }

  /**
   * Upload image bytes and adopt the resulting session (auto-click seeded
   * when the image has a salient region). Resolves after the state settles;
   * failures surface on `state.toast` and can be re-attempted via retry().
   */
  uploadImage(image: Uint8Array, contentType = 'image/png'): Promise<void> {
    return this.run(async () => {
      const view = await this.api.createSession(image, contentType);
      await this.adoptView(view, image);
    });
  }

  /**
   * Apply the selected tool at image coordinates (x, y). Out-of-bounds
   * clicks and clicks without an active session are ignored.
   */
  clickCanvas(x: number, y: number): Promise<void> {
    const { sessionId, imageSize, tool } = this.state;
    if (sessionId === null || imageSize === null) return Promise.resolve();
    if (tool === 'undo') return this.undo();
    if (x < 0 || y < 0 || x >= imageSize || y >= imageSize) return Promise.resolve();
    const click: ClickPoint = { x, y, polarity: tool };
    return this.run(async () => {
      const view = await this.api.addClick(sessionId, click);
      await this.adoptView(view, this.state.sourceImage);
    });
  }

  /** Remove the most recent user click; a no-op when there is none. */
  undo(): Promise<void> {
    const { sessionId } = this.state;
    if (sessionId === null || this.state.clicks.length === 0) return Promise.resolve();
    return this.run(async () => {
      const view = await this.api.undoClick(sessionId);
      await this.adoptView(view, this.state.sourceImage);
    });
  }

  /**
   * Show candidate `index` as the overlay. Purely client-side: swaps among
   * masks the server already returned, posts nothing.
   */
  selectCandidate(index: number): void {
    const candidate = this.state.candidates.find((c) => c.index === index);
    if (!candidate) return;
    this.update({ overlay: candidate.png, overlayIndex: candidate.index });
  }

  /**
   * Download the session's mask as served by the mask endpoint. Queued
   * behind pending clicks so the export reflects every click already made.
   * Rejects when no mask exists or the request fails.
   */
  exportMask(): Promise<Uint8Array> {
    if (!this.canExport()) {
      return Promise.reject(new Error('no mask to export'));
    }
    const sessionId = this.state.sessionId as string;
    return new Promise((resolve, reject) => {
      void this.run(async () => {
        try {
          resolve(await this.api.fetchMask(sessionId));
        } catch (error) {
          reject(error);
          throw error;
        }
      });
    });
  }

  /** Re-attempt the last failed operation (wired to the toast's retry). */
  retry(): Promise<void> {
    const op = this.lastFailed;
    if (op === null) return Promise.resolve();
    this.lastFailed = null;
    this.update({ toast: null });
    return this.run(op);
  }

  private update(patch: Partial<StudioState>): void {
    this.state = { ...this.state, ...patch };
    for (const listener of this.listeners) listener(this.state);
  }

  /** Mirror a server session view, refetching overlay and candidate PNGs. */
  private async adoptView(view: SessionView, sourceImage: Uint8Array | null): Promise<void> {
    let overlay: Uint8Array | null = null;
    const candidates: Candidate[] = [];
    if (view.mask_png_ref !== null) {
      overlay = view.mask_b64 !== null
        ? base64ToBytes(view.mask_b64)
        : await this.api.fetchMask(view.session_id);
      const scores = view.iou_scores ?? [];
      for (let i = 0; i < scores.length; i++) {
        candidates.push({
          index: i,
          iou: scores[i] ?? 0,
          png: await this.api.fetchCandidate(view.session_id, i),
        });
      }
    }
    this.update({
      sessionId: view.session_id,
      imageSize: view.size,
      sourceImage,
      overlay,
      overlayIndex: view.best_index,
      bestIndex: view.best_index,
      iouScores: view.iou_scores ?? [],
      candidates,
      autoClicks: view.auto_clicks,
      clicks: view.clicks,
      toast: null,
    });
  }

  /**
   * Enqueue an operation; ops run strictly one at a time. On failure the
   * remaining queue is dropped (those clicks targeted a state that no longer
   * exists), the message lands on `toast`, and retry() re-runs the op.
   */
  private run(op: Op): Promise<void> {
    return new Promise((resolve) => {
      this.queue.push(async () => {
        try {
          await op();
        } catch (error) {
          this.lastFailed = op;
          this.queue.length = 0;
          this.update({ toast: error instanceof Error ? error.message : String(error) });
        } finally {
          resolve();
        }
      });
      void this.drain();
    });
  }

  private async drain(): Promise<void> {
    if (this.draining) return;
    this.draining = true;
    this.update({ busy: true });
    try {
      for (let next = this.queue.shift(); next !== undefined; next = this.queue.shift()) {
        await next();
      }
    } finally {
      this.draining = false;
      this.update({ busy: false });
    }
  }
}
