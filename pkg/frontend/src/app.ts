/**
 * Single-page annotation app: canvas rendering, input wiring, controls.
 *
 * All protocol logic lives in SessionController/ApiClient; this file only
 * translates DOM events into controller calls and paints controller state.
 */

import { ApiClient, ExportFormat } from "./api.js";
import { decodeRle, maskToRgba, POSITIVE_COLOR, NEGATIVE_COLOR } from "./overlay.js";
import { SessionController, SessionView } from "./session.js";
import { ShortcutMap, ShortcutAction } from "./shortcuts.js";

const HANDLE_RADIUS = 5;

interface DragState {
  vertexIndex: number;
  moved: boolean;
}

class App {
  private api = new ApiClient("");
  private controller: SessionController | null = null;
  private shortcuts = new ShortcutMap(window.localStorage);
  private image: HTMLImageElement | null = null;
  private view: SessionView | null = null;
  private drag: DragState | null = null;
  private zoom = 1;
  private panX = 0;
  private panY = 0;
  private panning: { startX: number; startY: number } | null = null;

  private canvas = document.getElementById("canvas") as HTMLCanvasElement;
  private fileInput = document.getElementById("file") as HTMLInputElement;
  private thresholdSlider = document.getElementById("threshold") as HTMLInputElement;
  private thresholdLabel = document.getElementById("threshold-value") as HTMLSpanElement;
  private largestCcToggle = document.getElementById("largest-cc") as HTMLInputElement;
  private brightnessSlider = document.getElementById("brightness") as HTMLInputElement;
  private contrastSlider = document.getElementById("contrast") as HTMLInputElement;
  private undoButton = document.getElementById("undo") as HTMLButtonElement;
  private exportButton = document.getElementById("export") as HTMLButtonElement;
  private exportFormat = document.getElementById("export-format") as HTMLSelectElement;
  private busyIndicator = document.getElementById("busy") as HTMLSpanElement;
  private statusLine = document.getElementById("status") as HTMLSpanElement;
  private shortcutsTable = document.getElementById("shortcuts-table") as HTMLTableElement;

  constructor() {
    this.fileInput.addEventListener("change", () => void this.openFile());
    this.canvas.addEventListener("contextmenu", (e) => e.preventDefault());
    this.canvas.addEventListener("pointerdown", (e) => this.onPointerDown(e));
    this.canvas.addEventListener("pointermove", (e) => this.onPointerMove(e));
    this.canvas.addEventListener("pointerup", (e) => void this.onPointerUp(e));
    this.canvas.addEventListener("wheel", (e) => this.onWheel(e), { passive: false });
    this.thresholdSlider.addEventListener("input", () => {
      this.thresholdLabel.textContent = this.thresholdSlider.value;
    });
    this.thresholdSlider.addEventListener("change", () => void this.commitThreshold());
    this.largestCcToggle.addEventListener("change", () => {
      void this.controller?.configure({ largest_cc_only: this.largestCcToggle.checked });
    });
    for (const slider of [this.brightnessSlider, this.contrastSlider]) {
      slider.addEventListener("input", () => this.render());
    }
    this.undoButton.addEventListener("click", () => void this.controller?.undo());
    this.exportButton.addEventListener("click", () => void this.exportCurrent());
    window.addEventListener("keydown", (e) => this.onKeyDown(e));
    this.renderShortcutsTable();
  }

  private async openFile(): Promise<void> {
    const file = this.fileInput.files?.[0];
    if (!file) return;
    const info = await this.api.createSession(file, file.name);
    const image = new Image();
    image.src = URL.createObjectURL(file);
    await image.decode();
    this.image = image;
    this.zoom = 1;
    this.panX = 0;
    this.panY = 0;
    this.controller = new SessionController(this.api, info.id, info.width, info.height);
    this.controller.onChange((view) => {
      this.view = view;
      this.render();
    });
    await this.controller.refresh();
  }

  private canvasToImage(e: PointerEvent): { x: number; y: number } {
    const rect = this.canvas.getBoundingClientRect();
    const x = (e.clientX - rect.left - this.panX) / this.zoom;
    const y = (e.clientY - rect.top - this.panY) / this.zoom;
    return { x, y };
  }

  private hitVertex(x: number, y: number): number {
    const polygon = this.view?.polygon ?? [];
    const tolerance = HANDLE_RADIUS / this.zoom + 2;
    for (let i = 0; i < polygon.length; i++) {
      const [vx, vy] = polygon[i];
      if (Math.hypot(vx - x, vy - y) <= tolerance) return i;
    }
    return -1;
  }

  private onPointerDown(e: PointerEvent): void {
    if (!this.controller) return;
    if (e.button === 1 || e.shiftKey) {
      this.panning = { startX: e.clientX - this.panX, startY: e.clientY - this.panY };
      return;
    }
    const { x, y } = this.canvasToImage(e);
    const vertex = this.hitVertex(x, y);
    if (vertex >= 0 && e.button === 0) {
      this.drag = { vertexIndex: vertex, moved: false };
      this.canvas.setPointerCapture(e.pointerId);
    }
  }

  private onPointerMove(e: PointerEvent): void {
    if (this.panning) {
      this.panX = e.clientX - this.panning.startX;
      this.panY = e.clientY - this.panning.startY;
      this.render();
      return;
    }
    if (!this.drag || !this.controller) return;
    const { x, y } = this.canvasToImage(e);
    this.drag.moved = true;
    this.controller.previewVertex(this.drag.vertexIndex, x, y);
  }

  private async onPointerUp(e: PointerEvent): Promise<void> {
    if (this.panning) {
      this.panning = null;
      return;
    }
    if (!this.controller) return;
    const { x, y } = this.canvasToImage(e);
    if (this.drag) {
      const drag = this.drag;
      this.drag = null;
      if (drag.moved) {
        await this.controller.editPolygon({ op: "move", index: drag.vertexIndex, x, y });
      } else if (e.altKey) {
        await this.controller.editPolygon({ op: "delete", index: drag.vertexIndex });
      }
      return;
    }
    if (e.altKey) {
      const insertAt = this.nearestEdgeIndex(x, y);
      if (insertAt >= 0) {
        await this.controller.editPolygon({ op: "insert", index: insertAt, x, y });
        return;
      }
    }
    const xi = Math.floor(x);
    const yi = Math.floor(y);
    if (xi < 0 || yi < 0 || xi >= this.controller.width || yi >= this.controller.height) {
      return;
    }
    const polarity = e.button === 2 ? "negative" : "positive";
    void this.controller.click(xi, yi, polarity);
  }

  /** Index to insert a new vertex so it lands on the nearest edge. */
  private nearestEdgeIndex(x: number, y: number): number {
    const polygon = this.view?.polygon ?? [];
    if (polygon.length < 2) return -1;
    let best = -1;
    let bestDist = 8 / this.zoom;
    for (let i = 0; i < polygon.length; i++) {
      const [x1, y1] = polygon[i];
      const [x2, y2] = polygon[(i + 1) % polygon.length];
      const lengthSq = (x2 - x1) ** 2 + (y2 - y1) ** 2;
      const t = lengthSq === 0 ? 0 :
        Math.max(0, Math.min(1, ((x - x1) * (x2 - x1) + (y - y1) * (y2 - y1)) / lengthSq));
      const dist = Math.hypot(x - (x1 + t * (x2 - x1)), y - (y1 + t * (y2 - y1)));
      if (dist < bestDist) {
        bestDist = dist;
        best = i + 1;
      }
    }
    return best;
  }

  private onWheel(e: WheelEvent): void {
    e.preventDefault();
    const factor = e.deltaY < 0 ? 1.15 : 1 / 1.15;
    this.zoom = Math.min(16, Math.max(0.25, this.zoom * factor));
    this.render();
  }

  private onKeyDown(e: KeyboardEvent): void {
    if (e.target instanceof HTMLInputElement || e.target instanceof HTMLSelectElement) return;
    const action = this.shortcuts.resolve(e.key);
    if (!action || !this.controller) return;
    e.preventDefault();
    void this.runAction(action);
  }

  private async runAction(action: ShortcutAction): Promise<void> {
    if (!this.controller) return;
    switch (action) {
      case "undo":
        await this.controller.undo();
        break;
      case "export":
        await this.exportCurrent();
        break;
      case "toggle-largest-cc":
        this.largestCcToggle.checked = !this.largestCcToggle.checked;
        await this.controller.configure({ largest_cc_only: this.largestCcToggle.checked });
        break;
      case "threshold-up":
      case "threshold-down": {
        const delta = action === "threshold-up" ? 0.05 : -0.05;
        const next = Math.min(0.95, Math.max(0.05,
          parseFloat(this.thresholdSlider.value) + delta));
        this.thresholdSlider.value = next.toFixed(2);
        this.thresholdLabel.textContent = this.thresholdSlider.value;
        await this.commitThreshold();
        break;
      }
      case "toggle-polarity":
        // left/right click already select polarity; kept as a no-op hook
        break;
    }
  }

  private async commitThreshold(): Promise<void> {
    await this.controller?.configure({ threshold: parseFloat(this.thresholdSlider.value) });
  }

  private async exportCurrent(): Promise<void> {
    if (!this.controller) return;
    const format = this.exportFormat.value as ExportFormat;
    const bytes = await this.controller.exportMask(format);
    const suffix = format.endsWith("png") ? "png" : format.endsWith("xml_like") ? "xml" : "json";
    const blob = new Blob([bytes.buffer as ArrayBuffer]);
    const link = document.createElement("a");
    link.href = URL.createObjectURL(blob);
    link.download = `${this.controller.sessionId}_${format}.${suffix}`;
    link.click();
    URL.revokeObjectURL(link.href);
  }

  private renderShortcutsTable(): void {
    const rows = Object.entries(this.shortcuts.snapshot())
      .map(([action, key]) =>
        `<tr><td>${action}</td><td><button data-action="${action}">${key}</button></td></tr>`)
      .join("");
    this.shortcutsTable.innerHTML = rows;
    for (const button of this.shortcutsTable.querySelectorAll("button")) {
      button.addEventListener("click", () => {
        const action = button.dataset.action as ShortcutAction;
        button.textContent = "press a key";
        const onKey = (e: KeyboardEvent) => {
          e.preventDefault();
          window.removeEventListener("keydown", onKey, true);
          try {
            this.shortcuts.rebind(action, e.key);
          } catch (err) {
            this.statusLine.textContent = err instanceof Error ? err.message : String(err);
          }
          this.renderShortcutsTable();
        };
        window.addEventListener("keydown", onKey, true);
      });
    }
  }

  private render(): void {
    const ctx = this.canvas.getContext("2d");
    if (!ctx || !this.image || !this.controller) return;
    const view = this.view;
    this.canvas.width = this.canvas.clientWidth;
    this.canvas.height = this.canvas.clientHeight;
    ctx.save();
    ctx.imageSmoothingEnabled = false;
    ctx.translate(this.panX, this.panY);
    ctx.scale(this.zoom, this.zoom);
    const brightness = parseInt(this.brightnessSlider.value, 10);
    const contrast = parseInt(this.contrastSlider.value, 10);
    ctx.filter = `brightness(${100 + brightness}%) contrast(${100 + contrast}%)`;
    ctx.drawImage(this.image, 0, 0);
    ctx.filter = "none";

    if (view?.state) {
      const mask = decodeRle(view.state.mask_rle);
      const rgba = maskToRgba(mask);
      const overlay = new OffscreenCanvas(view.state.mask_rle.width, view.state.mask_rle.height);
      const octx = overlay.getContext("2d")!;
      octx.putImageData(
        new ImageData(new Uint8ClampedArray(rgba), view.state.mask_rle.width,
          view.state.mask_rle.height), 0, 0);
      ctx.drawImage(overlay, 0, 0);
    }

    for (const marker of view?.markers ?? []) {
      ctx.beginPath();
      ctx.arc(marker.x + 0.5, marker.y + 0.5, 3 / this.zoom + 1, 0, 2 * Math.PI);
      ctx.fillStyle = marker.polarity === "positive" ? POSITIVE_COLOR : NEGATIVE_COLOR;
      ctx.globalAlpha = marker.acknowledged ? 1 : 0.5;
      ctx.fill();
      ctx.globalAlpha = 1;
    }

    const polygon = view?.polygon ?? [];
    if (polygon.length >= 2) {
      ctx.beginPath();
      ctx.moveTo(polygon[0][0], polygon[0][1]);
      for (const [x, y] of polygon.slice(1)) ctx.lineTo(x, y);
      ctx.closePath();
      ctx.strokeStyle = "#f1c40f";
      ctx.lineWidth = 1 / this.zoom;
      ctx.stroke();
      for (const [x, y] of polygon) {
        ctx.beginPath();
        ctx.arc(x, y, HANDLE_RADIUS / this.zoom / 2 + 1, 0, 2 * Math.PI);
        ctx.fillStyle = "#f39c12";
        ctx.fill();
      }
    }
    ctx.restore();

    this.busyIndicator.style.visibility = view?.busy ? "visible" : "hidden";
    this.statusLine.textContent = view?.error ?? (view?.state
      ? `clicks: ${view.state.click_count}  threshold: ${view.state.threshold.toFixed(2)}`
      : "");
  }
}

new App();
