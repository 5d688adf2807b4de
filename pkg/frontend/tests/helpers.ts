/** Test transport: a fetch-compatible function with scriptable responses. */

export interface Recorded {
  method: string;
  path: string;
  body: unknown;
}

export type Responder = (method: string, path: string, body: unknown) =>
  Response | Promise<Response>;

export function jsonResponse(status: number, body: unknown): Response {
  return new Response(JSON.stringify(body), {
    status,
    headers: { "content-type": "application/json" },
  });
}

export function bytesResponse(status: number, bytes: Uint8Array, contentType: string): Response {
  return new Response(new Uint8Array(bytes).buffer as ArrayBuffer, {
    status,
    headers: { "content-type": contentType },
  });
}

export interface Deferred<T> {
  promise: Promise<T>;
  resolve: (value: T) => void;
  reject: (err: unknown) => void;
}

export function deferred<T>(): Deferred<T> {
  let resolve!: (value: T) => void;
  let reject!: (err: unknown) => void;
  const promise = new Promise<T>((res, rej) => {
    resolve = res;
    reject = rej;
  });
  return { promise, resolve, reject };
}

export class MockTransport {
  readonly requests: Recorded[] = [];

  constructor(private readonly responder: Responder) {}

  /** The function handed to ApiClient in place of fetch. */
  fetch = async (input: RequestInfo | URL, init?: RequestInit): Promise<Response> => {
    const url = new URL(String(input));
    const method = init?.method ?? "GET";
    let body: unknown = null;
    if (typeof init?.body === "string") body = JSON.parse(init.body);
    this.requests.push({ method, path: url.pathname + url.search, body });
    return this.responder(method, url.pathname + url.search, body);
  };
}

export function emptyState(overrides: Record<string, unknown> = {}) {
  return {
    mask_rle: { width: 4, height: 4, counts: [16] },
    polygon: [],
    probs_available: false,
    dirty: false,
    click_count: 0,
    threshold: 0.5,
    largest_cc_only: false,
    ...overrides,
  };
}
