import assert from "node:assert/strict";
import { test } from "node:test";
import { readFileSync } from "node:fs";
import { join } from "node:path";

import { JSDOM } from "jsdom";

import { ApiClient } from "../src/api.js";
import { DomView } from "../src/viewer.js";
import { initialState } from "../src/state.js";

function withDom<T>(fn: () => T): T {
  const html = readFileSync(join(process.cwd(), "index.html"), "utf-8");
  const dom = new JSDOM(html);
  const g = globalThis as Record<string, unknown>;
  const prevDocument = g.document;
  const prevWindow = g.window;
  g.document = dom.window.document;
  g.window = dom.window;
  try {
    return fn();
  } finally {
    g.document = prevDocument;
    g.window = prevWindow;
  }
}

test("volume list renders one selectable entry per served volume", () => {
  withDom(() => {
    const view = new DomView(new ApiClient(""));
    const state = initialState();
    state.volumes = [
      { id: "a", shape: [8, 8, 8], spacing_mm: [1, 1, 1] },
      { id: "b", shape: [8, 8, 8], spacing_mm: [1, 1, 1] },
    ];
    view.renderVolumeList(state);
    const options = document.querySelectorAll("#source-select option");
    assert.equal(options.length, 2);
    const checkboxes = document.querySelectorAll("#target-list input");
    assert.equal(checkboxes.length, 2);
  });
});

test("empty volume directory shows the empty-state message", () => {
  withDom(() => {
    const view = new DomView(new ApiClient(""));
    view.renderVolumeList(initialState());
    assert.match(
      document.getElementById("target-list")!.textContent ?? "",
      /no volumes/,
    );
  });
});

test("banner toggles visibility", () => {
  withDom(() => {
    const view = new DomView(new ApiClient(""));
    view.showBanner("service 500");
    const banner = document.getElementById("banner") as HTMLDivElement;
    assert.equal(banner.style.display, "block");
    assert.equal(banner.textContent, "service 500");
    view.clearBanner();
    assert.equal(banner.style.display, "none");
  });
});

test("opacity zero leaves the overlay invisible over the grayscale slice", () => {
  withDom(() => {
    const view = new DomView(new ApiClient(""));
    const state = initialState();
    state.volumes = [{ id: "a", shape: [8, 8, 8], spacing_mm: [1, 1, 1] }];
    state.viewedTargetId = "a";
    state.overlayOpacity = 0;
    view.renderOverlay(state, "job1");
    const overlay = document.getElementById("target-overlay") as HTMLImageElement;
    assert.equal(overlay.style.opacity, "0");
  });
});
