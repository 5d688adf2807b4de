import { describe, expect, it } from "vitest";

import { ApiClient } from "../src/api.js";
import { SessionController } from "../src/session.js";
import {
  MockTransport,
  deferred,
  emptyState,
  jsonResponse,
} from "./helpers.js";

function controllerWith(transport: MockTransport): SessionController {
  const api = new ApiClient("http://svc", transport.fetch);
  return new SessionController(api, "sid", 4, 4);
}

describe("click queueing", () => {
  it("keeps a single request in flight and preserves click order", async () => {
    const gates = [deferred<void>(), deferred<void>(), deferred<void>()];
    let served = 0;
    const transport = new MockTransport(async (_method, _path, body) => {
      const index = served++;
      await gates[index].promise;
      return jsonResponse(200, emptyState({
        click_count: index + 1,
        probs_available: true,
        echo: body,
      }));
    });
    const controller = controllerWith(transport);

    const clicks = [
      controller.click(1, 1, "positive"),
      controller.click(2, 2, "positive"),
      controller.click(3, 3, "negative"),
    ];
    // only the first request goes out while it is unanswered
    expect(transport.requests.length).toBe(1);
    expect(controller.view().busy).toBe(true);
    expect(controller.view().markers.length).toBe(3);

    gates[0].resolve();
    await clicks[0];
    expect(transport.requests.length).toBe(2);
    gates[1].resolve();
    await clicks[1];
    gates[2].resolve();
    await clicks[2];

    expect(transport.requests.map((r) => r.body)).toEqual([
      { x: 1, y: 1, polarity: "positive" },
      { x: 2, y: 2, polarity: "positive" },
      { x: 3, y: 3, polarity: "negative" },
    ]);
    const view = controller.view();
    expect(view.busy).toBe(false);
    expect(view.state?.click_count).toBe(3);
    expect(view.markers.every((m) => m.acknowledged)).toBe(true);
  });

  it("retries a busy response exactly once", async () => {
    let calls = 0;
    const transport = new MockTransport(() => {
      calls++;
      if (calls === 1) return jsonResponse(409, { detail: "busy" });
      return jsonResponse(200, emptyState({ click_count: 1 }));
    });
    const controller = controllerWith(transport);
    await controller.click(1, 1, "positive");
    expect(calls).toBe(2);
    const view = controller.view();
    expect(view.error).toBeNull();
    expect(view.markers).toHaveLength(1);
    expect(view.markers[0].acknowledged).toBe(true);
  });

  it("surfaces a second busy response and drops the marker", async () => {
    const transport = new MockTransport(() =>
      jsonResponse(409, { detail: "busy" }));
    const controller = controllerWith(transport);
    await expect(controller.click(1, 1, "positive")).rejects.toThrow("busy");
    expect(transport.requests.length).toBe(2);
    const view = controller.view();
    expect(view.markers).toHaveLength(0);
    expect(view.error).toBe("busy");
  });
});

describe("stale response handling", () => {
  it("discards a delayed click response that an update has superseded", async () => {
    const slow = deferred<Response>();
    const transport = new MockTransport((method, path) => {
      if (path.endsWith("/clicks")) return slow.promise;
      return jsonResponse(200, emptyState({
        threshold: 0.7,
        mask_rle: { width: 4, height: 4, counts: [0, 16] },
      }));
    });
    const controller = controllerWith(transport);

    const clickDone = controller.click(1, 1, "positive");
    await controller.configure({ threshold: 0.7 });
    expect(controller.view().state?.threshold).toBe(0.7);

    // the click was sent before the configure, so its payload is older
    slow.resolve(jsonResponse(200, emptyState({
      click_count: 1,
      threshold: 0.5,
      mask_rle: { width: 4, height: 4, counts: [16] },
    })));
    await clickDone;

    const view = controller.view();
    expect(view.state?.threshold).toBe(0.7);
    expect(view.state?.mask_rle.counts).toEqual([0, 16]);
    expect(view.markers[0].acknowledged).toBe(true);
  });
});

describe("undo", () => {
  it("trims optimistic markers to the server click count", async () => {
    let count = 0;
    const transport = new MockTransport((method, path) => {
      if (path.endsWith("/clicks")) {
        count++;
        return jsonResponse(200, emptyState({ click_count: count }));
      }
      count--;
      return jsonResponse(200, emptyState({ click_count: count }));
    });
    const controller = controllerWith(transport);
    await controller.click(1, 1, "positive");
    await controller.click(2, 2, "negative");
    await controller.undo();
    const view = controller.view();
    expect(view.state?.click_count).toBe(1);
    expect(view.markers).toHaveLength(1);
    expect(view.markers[0]).toMatchObject({ x: 1, y: 1, polarity: "positive" });
  });
});

describe("polygon editing", () => {
  it("applies the server polygon on success", async () => {
    const transport = new MockTransport((method, path) => {
      if (path.endsWith("/polygon")) {
        return jsonResponse(200, { polygon: [[9, 9], [1, 0], [0, 1]], dirty: true });
      }
      return jsonResponse(200, emptyState({
        polygon: [[0, 0], [1, 0], [0, 1]],
        click_count: 1,
      }));
    });
    const controller = controllerWith(transport);
    await controller.click(1, 1, "positive");
    const ok = await controller.editPolygon({ op: "move", index: 0, x: 9, y: 9 });
    expect(ok).toBe(true);
    const view = controller.view();
    expect(view.polygon[0]).toEqual([9, 9]);
    expect(view.state?.dirty).toBe(true);
  });

  it("rolls the local polygon back when the server rejects the edit", async () => {
    const transport = new MockTransport((method, path) => {
      if (path.endsWith("/polygon")) {
        return jsonResponse(400, { detail: "cannot delete below 3 vertices" });
      }
      return jsonResponse(200, emptyState({
        polygon: [[0, 0], [1, 0], [0, 1]],
        click_count: 1,
      }));
    });
    const controller = controllerWith(transport);
    await controller.click(1, 1, "positive");
    const before = controller.view().polygon;
    const ok = await controller.editPolygon({ op: "delete", index: 0 });
    expect(ok).toBe(false);
    const view = controller.view();
    expect(view.polygon).toEqual(before);
    expect(view.error).toMatch(/3 vertices/);
  });

  it("shows the preview position during a drag before the PATCH lands", async () => {
    const transport = new MockTransport(() =>
      jsonResponse(200, emptyState({ polygon: [[0, 0], [1, 0], [0, 1]], click_count: 1 })));
    const controller = controllerWith(transport);
    await controller.click(1, 1, "positive");
    controller.previewVertex(0, 5, 5);
    expect(controller.view().polygon[0]).toEqual([5, 5]);
  });
});
