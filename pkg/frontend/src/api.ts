// Typed client for the click-to-segment HTTP API (all endpoints under /v1).

export type Polarity = 'fg' | 'bg';

export interface ClickPoint {
  x: number;
  y: number;
  polarity: Polarity;
}

export interface SessionView {
  session_id: string;
  size: number;
  auto_clicks: ClickPoint[];
  clicks: ClickPoint[];
  mask_png_ref: string | null;
  iou_scores: number[] | null;
  best_index: number | null;
  mask_b64: string | null;
}

export interface HealthInfo {
  status: string;
  input_size: number;
}

export interface ModelInfo {
  config: Record<string, unknown>;
  mask_count: number;
}

export class ApiError extends Error {
  constructor(message: string, readonly status: number) {
    super(message);
    this.name = 'ApiError';
  }
}

async function errorDetail(response: Response): Promise<string> {
  try {
    const data = (await response.json()) as { detail?: unknown };
    if (typeof data.detail === 'string') return data.detail;
  } catch {
    // non-JSON error body: fall through to the status line
  }
  return response.statusText || `HTTP ${response.status}`;
}

async function asJson<T>(response: Response): Promise<T> {
  if (!response.ok) throw new ApiError(await errorDetail(response), response.status);
  return response.json() as Promise<T>;
}

async function asBytes(response: Response): Promise<Uint8Array> {
  if (!response.ok) throw new ApiError(await errorDetail(response), response.status);
  return new Uint8Array(await response.arrayBuffer());
}

export interface StudioApi {
  health(): Promise<HealthInfo>;
  modelInfo(): Promise<ModelInfo>;
  /** Upload raw image bytes; the server replies with the initial session view. */
  createSession(image: Uint8Array, contentType?: string): Promise<SessionView>;
  getSession(sessionId: string): Promise<SessionView>;
  addClick(sessionId: string, click: ClickPoint): Promise<SessionView>;
  undoClick(sessionId: string): Promise<SessionView>;
  /** Binary PNG of the currently selected (best-scoring) mask. */
  fetchMask(sessionId: string): Promise<Uint8Array>;
  /** Binary PNG of mask candidate `index`. */
  fetchCandidate(sessionId: string, index: number): Promise<Uint8Array>;
}

/**
 * Build a client bound to `baseUrl` (empty string = same origin, which is how
 * the page served from /studio reaches the API next to it).
 */
export function createApi(baseUrl: string): StudioApi {
  const root = baseUrl.replace(/\/+$/, '');

  return {
    async health() {
      return asJson<HealthInfo>(await fetch(`${root}/v1/healthz`));
    },

    async modelInfo() {
      return asJson<ModelInfo>(await fetch(`${root}/v1/model`));
    },

    async createSession(image, contentType = 'image/png') {
      const response = await fetch(`${root}/v1/session`, {
        method: 'POST',
        headers: { 'Content-Type': contentType },
        body: image as unknown as BodyInit,
      });
      return asJson<SessionView>(response);
    },

    async getSession(sessionId) {
      return asJson<SessionView>(await fetch(`${root}/v1/session/${sessionId}`));
    },

    async addClick(sessionId, click) {
      const response = await fetch(`${root}/v1/session/${sessionId}/clicks`, {
        method: 'POST',
        headers: { 'Content-Type': 'application/json' },
        body: JSON.stringify(click),
      });
      return asJson<SessionView>(response);
    },

    async undoClick(sessionId) {
      const response = await fetch(`${root}/v1/session/${sessionId}/clicks`, {
        method: 'DELETE',
      });
      return asJson<SessionView>(response);
    },

    async fetchMask(sessionId) {
      return asBytes(await fetch(`${root}/v1/session/${sessionId}/mask.png`));
    },

    async fetchCandidate(sessionId, index) {
      return asBytes(await fetch(`${root}/v1/session/${sessionId}/candidate/${index}.png`));
    },
  };
}
