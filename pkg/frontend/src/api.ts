/**
 * Typed client for the annotation service HTTP API.
 *
 * The fetch implementation is injectable so tests can substitute a mock
 * transport; everything else goes through the same code paths the app uses.
 */

export type Polarity = "positive" | "negative";

export interface MaskRle {
  width: number;
  height: number;
  counts: number[];
}

export interface SessionInfo {
  id: string;
  width: number;
  height: number;
}

export interface SessionState {
  mask_rle: MaskRle;
  polygon: number[][];
  probs_available: boolean;
  dirty: boolean;
  click_count: number;
  threshold: number;
  largest_cc_only: boolean;
  inference_ms?: number;
}

export interface PolygonEdit {
  op: "move" | "insert" | "delete";
  index: number;
  x?: number;
  y?: number;
}

export interface PolygonResponse {
  polygon: number[][];
  dirty: boolean;
}

export type ExportFormat =
  | "mask_png"
  | "pseudo_color_png"
  | "voc_xml_like"
  | "coco_json_like";

export class ApiError extends Error {
  constructor(public readonly status: number, detail: string) {
    super(detail);
    this.name = "ApiError";
  }
}

async function raiseForStatus(response: Response): Promise<void> {
  if (response.ok) return;
  let detail = response.statusText || `HTTP ${response.status}`;
  try {
    const body = await response.json();
    if (typeof body.detail === "string") detail = body.detail;
  } catch {
    // non-JSON error body; keep the status text
  }
  throw new ApiError(response.status, detail);
}

export class ApiClient {
  constructor(
    private readonly baseUrl: string,
    private readonly fetchImpl: typeof fetch = fetch,
  ) {}

  private url(path: string): string {
    return this.baseUrl.replace(/\/$/, "") + path;
  }

  private async json<T>(path: string, init?: RequestInit): Promise<T> {
    const response = await this.fetchImpl(this.url(path), init);
    await raiseForStatus(response);
    return (await response.json()) as T;
  }

  async createSession(image: Blob, filename = "upload.png"): Promise<SessionInfo> {
    const form = new FormData();
    form.append("image", image, filename);
    return this.json<SessionInfo>("/sessions", { method: "POST", body: form });
  }

  async getState(sessionId: string): Promise<SessionState> {
    return this.json<SessionState>(`/sessions/${sessionId}`);
  }

  async addClick(
    sessionId: string,
    x: number,
    y: number,
    polarity: Polarity,
  ): Promise<SessionState> {
    return this.json<SessionState>(`/sessions/${sessionId}/clicks`, {
      method: "POST",
      headers: { "content-type": "application/json" },
      body: JSON.stringify({ x, y, polarity }),
    });
  }

  async undo(sessionId: string): Promise<SessionState> {
    return this.json<SessionState>(`/sessions/${sessionId}/undo`, {
      method: "POST",
    });
  }

  async configure(
    sessionId: string,
    options: { threshold?: number; largest_cc_only?: boolean },
  ): Promise<SessionState> {
    return this.json<SessionState>(`/sessions/${sessionId}/config`, {
      method: "PATCH",
      headers: { "content-type": "application/json" },
      body: JSON.stringify(options),
    });
  }

  async editPolygon(sessionId: string, edit: PolygonEdit): Promise<PolygonResponse> {
    return this.json<PolygonResponse>(`/sessions/${sessionId}/polygon`, {
      method: "PATCH",
      headers: { "content-type": "application/json" },
      body: JSON.stringify(edit),
    });
  }

  async exportMask(sessionId: string, format: ExportFormat): Promise<Uint8Array> {
    const response = await this.fetchImpl(
      this.url(`/sessions/${sessionId}/export?format=${format}`),
    );
    await raiseForStatus(response);
    return new Uint8Array(await response.arrayBuffer());
  }
}
