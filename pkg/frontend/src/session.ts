/**
 * Client-side session state machine.
 *
 * Invariants enforced here rather than in the DOM layer:
 *  - at most one mask-changing request (click/undo) is in flight; further
 *    clicks queue in arrival order,
 *  - every request carries a monotonically increasing interaction id, and a
 *    response is applied only if it is newer than the last applied one, so a
 *    delayed response can never overwrite fresher state,
 *  - a 409 (server busy) is retried exactly once before surfacing,
 *  - polygon edits apply locally first and roll back if the PATCH fails.
 */

import {
  ApiClient,
  ApiError,
  Polarity,
  PolygonEdit,
  SessionState,
  ExportFormat,
} from "./api.js";

export interface ClickMarker {
  x: number;
  y: number;
  polarity: Polarity;
  acknowledged: boolean;
}

export interface SessionView {
  state: SessionState | null;
  polygon: number[][];
  markers: ClickMarker[];
  busy: boolean;
  error: string | null;
}

export type ViewListener = (view: SessionView) => void;

interface QueuedClick {
  x: number;
  y: number;
  polarity: Polarity;
  marker: ClickMarker;
  resolve: () => void;
  reject: (err: unknown) => void;
}

export class SessionController {
  private state: SessionState | null = null;
  private polygon: number[][] = [];
  private markers: ClickMarker[] = [];
  private queue: QueuedClick[] = [];
  private inFlight = false;
  private nextInteractionId = 1;
  private lastAppliedId = 0;
  private error: string | null = null;
  private listeners: ViewListener[] = [];

  constructor(
    private readonly api: ApiClient,
    readonly sessionId: string,
    readonly width: number,
    readonly height: number,
  ) {}

  onChange(listener: ViewListener): void {
    this.listeners.push(listener);
  }

  view(): SessionView {
    return {
      state: this.state,
      polygon: this.polygon.map((v) => [...v]),
      markers: [...this.markers],
      busy: this.inFlight || this.queue.length > 0,
      error: this.error,
    };
  }

  private emit(): void {
    const snapshot = this.view();
    for (const listener of this.listeners) listener(snapshot);
  }

  /** Apply a server response unless a newer one has already landed. */
  private applyState(interactionId: number, state: SessionState): boolean {
    if (interactionId <= this.lastAppliedId) return false;
    this.lastAppliedId = interactionId;
    this.state = state;
    this.polygon = state.polygon.map((v) => [...v]);
    return true;
  }

  async refresh(): Promise<void> {
    const id = this.nextInteractionId++;
    const state = await this.api.getState(this.sessionId);
    this.applyState(id, state);
    this.emit();
  }

  /**
   * Queue a click. The optimistic marker appears immediately; the promise
   * resolves once the server has acknowledged this click.
   */
  click(x: number, y: number, polarity: Polarity): Promise<void> {
    const marker: ClickMarker = { x, y, polarity, acknowledged: false };
    this.markers.push(marker);
    const done = new Promise<void>((resolve, reject) => {
      this.queue.push({ x, y, polarity, marker, resolve, reject });
    });
    this.emit();
    void this.pump();
    return done;
  }

  private async pump(): Promise<void> {
    if (this.inFlight) return;
    const next = this.queue.shift();
    if (!next) return;
    this.inFlight = true;
    const interactionId = this.nextInteractionId++;
    try {
      const state = await this.sendClickOnceRetried(next);
      next.marker.acknowledged = true;
      this.applyState(interactionId, state);
      this.error = null;
      next.resolve();
    } catch (err) {
      this.markers = this.markers.filter((m) => m !== next.marker);
      this.error = err instanceof Error ? err.message : String(err);
      next.reject(err);
    } finally {
      this.inFlight = false;
      this.emit();
      if (this.queue.length > 0) void this.pump();
    }
  }

  private async sendClickOnceRetried(click: QueuedClick): Promise<SessionState> {
    try {
      return await this.api.addClick(this.sessionId, click.x, click.y, click.polarity);
    } catch (err) {
      if (err instanceof ApiError && err.status === 409) {
        return await this.api.addClick(this.sessionId, click.x, click.y, click.polarity);
      }
      throw err;
    }
  }

  async undo(): Promise<void> {
    const interactionId = this.nextInteractionId++;
    this.inFlight = true;
    this.emit();
    try {
      const state = await this.api.undo(this.sessionId);
      if (this.applyState(interactionId, state)) {
        this.markers = this.markers.slice(0, state.click_count);
      }
      this.error = null;
    } catch (err) {
      this.error = err instanceof Error ? err.message : String(err);
    } finally {
      this.inFlight = false;
      this.emit();
      if (this.queue.length > 0) void this.pump();
    }
  }

  /** Threshold / largest-CC changes: plain configuration, never queued
   * behind clicks because the server does no inference for them. */
  async configure(options: { threshold?: number; largest_cc_only?: boolean }): Promise<void> {
    const interactionId = this.nextInteractionId++;
    try {
      const state = await this.api.configure(this.sessionId, options);
      this.applyState(interactionId, state);
      this.error = null;
    } catch (err) {
      this.error = err instanceof Error ? err.message : String(err);
    }
    this.emit();
  }

  /** Move a vertex locally (used during a drag, before the PATCH). */
  previewVertex(index: number, x: number, y: number): void {
    if (index < 0 || index >= this.polygon.length) return;
    this.polygon[index] = [x, y];
    this.emit();
  }

  /** Commit a polygon edit; local state rolls back if the server rejects. */
  async editPolygon(edit: PolygonEdit): Promise<boolean> {
    const before = this.polygon.map((v) => [...v]);
    if (edit.op === "move" && edit.x !== undefined && edit.y !== undefined) {
      this.previewVertex(edit.index, edit.x, edit.y);
    }
    try {
      const response = await this.api.editPolygon(this.sessionId, edit);
      this.polygon = response.polygon.map((v) => [...v]);
      if (this.state) this.state = { ...this.state, dirty: response.dirty };
      this.error = null;
      this.emit();
      return true;
    } catch (err) {
      this.polygon = before;
      this.error = err instanceof Error ? err.message : String(err);
      this.emit();
      return false;
    }
  }

  async exportMask(format: ExportFormat): Promise<Uint8Array> {
    return this.api.exportMask(this.sessionId, format);
  }
}
