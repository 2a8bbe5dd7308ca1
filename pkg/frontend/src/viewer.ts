import { ApiClient } from "./api.js";
import { sliceDims, voxelToPixel } from "./mapping.js";
import { sliceOf } from "./mapping.js";
import { ViewerState, volumeById } from "./state.js";
import type { SearchResult } from "./types.js";
import type { View } from "./workflow.js";

function el<T extends HTMLElement>(id: string): T {
  const node = document.getElementById(id);
  if (!node) throw new Error(`missing element #${id}`);
  return node as T;
}

/** DOM renderer: grayscale slice + marker + heatmap overlay + result list. */
export class DomView implements View {
  scale = 4;
  private onSelectSource: (id: string) => void = () => {};
  private onToggleTarget: (id: string) => void = () => {};
  private onJump: (id: string) => void = () => {};

  constructor(private readonly api: ApiClient) {}

  bind(handlers: {
    selectSource: (id: string) => void;
    toggleTarget: (id: string) => void;
    jump: (id: string) => void;
  }): void {
    this.onSelectSource = handlers.selectSource;
    this.onToggleTarget = handlers.toggleTarget;
    this.onJump = handlers.jump;
  }

  renderVolumeList(state: ViewerState): void {
    const sourceSel = el<HTMLSelectElement>("source-select");
    sourceSel.innerHTML = "";
    for (const vol of state.volumes) {
      const opt = document.createElement("option");
      opt.value = vol.id;
      opt.textContent =
        `${vol.id} (${vol.shape.join("x")} @ ${vol.spacing_mm.join("/")}mm)`;
      sourceSel.appendChild(opt);
    }
    sourceSel.onchange = () => this.onSelectSource(sourceSel.value);

    const targets = el<HTMLDivElement>("target-list");
    targets.innerHTML = "";
    for (const vol of state.volumes) {
      const label = document.createElement("label");
      const box = document.createElement("input");
      box.type = "checkbox";
      box.value = vol.id;
      box.onchange = () => this.onToggleTarget(vol.id);
      label.appendChild(box);
      label.appendChild(document.createTextNode(" " + vol.id));
      targets.appendChild(label);
    }
    if (state.volumes.length === 0) {
      targets.textContent = "no volumes served";
    }
  }

  renderSlice(state: ViewerState): void {
    const vol = volumeById(state, state.sourceId);
    if (!vol) return;
    const img = el<HTMLImageElement>("source-slice");
    img.src = this.api.sliceUrl(
      vol.id,
      state.axis,
      state.sliceIndex,
      state.preset,
    );
    const dims = sliceDims(vol.shape, state.axis);
    img.width = dims.cols * this.scale;
    img.height = dims.rows * this.scale;
    el<HTMLSpanElement>("slice-label").textContent =
      `${state.axis} = ${state.sliceIndex}`;
    this.renderMarker(state);
  }

  renderMarker(state: ViewerState): void {
    const marker = el<HTMLDivElement>("marker");
    const box = el<HTMLDivElement>("box-outline");
    if (
      state.selectedPoint === null ||
      sliceOf(state.selectedPoint, state.axis) !== state.sliceIndex
    ) {
      marker.style.display = "none";
      box.style.display = "none";
      return;
    }
    const { px, py } = voxelToPixel(state.selectedPoint, state.axis, this.scale);
    marker.style.display = "block";
    marker.style.left = `${px - 3}px`;
    marker.style.top = `${py - 3}px`;
    const half = (state.boxSize[2] / 2) * this.scale;
    box.style.display = "block";
    box.style.left = `${px - half}px`;
    box.style.top = `${py - half}px`;
    box.style.width = `${2 * half}px`;
    box.style.height = `${2 * half}px`;
  }

  renderResults(state: ViewerState, results: SearchResult[]): void {
    const list = el<HTMLTableSectionElement>("result-rows");
    list.innerHTML = "";
    for (const result of results) {
      const row = document.createElement("tr");
      const sim = result.best_similarity.toFixed(2);
      row.innerHTML =
        `<td>${result.target_id}</td><td>${sim}</td>` +
        `<td>(${result.best_position.join(", ")})</td>`;
      const cell = document.createElement("td");
      const btn = document.createElement("button");
      btn.textContent = "jump to best";
      btn.onclick = () => this.onJump(result.target_id);
      cell.appendChild(btn);
      row.appendChild(cell);
      list.appendChild(row);
    }
  }

  renderOverlay(state: ViewerState, jobId: string): void {
    const target = el<HTMLImageElement>("target-slice");
    const overlay = el<HTMLImageElement>("target-overlay");
    if (!state.viewedTargetId || !jobId) {
      return;
    }
    const vol = volumeById(state, state.viewedTargetId);
    if (!vol) return;
    target.src = this.api.sliceUrl(
      state.viewedTargetId,
      state.axis,
      state.targetSliceIndex,
      state.preset,
    );
    const dims = sliceDims(vol.shape, state.axis);
    target.width = dims.cols * this.scale;
    target.height = dims.rows * this.scale;
    overlay.src = this.api.heatmapUrl(
      jobId,
      state.viewedTargetId,
      state.axis,
      state.targetSliceIndex,
    );
    overlay.width = target.width;
    overlay.height = target.height;
    overlay.style.opacity = String(state.overlayOpacity);
    el<HTMLSpanElement>("target-label").textContent =
      `${state.viewedTargetId} @ ${state.axis} = ${state.targetSliceIndex}`;
  }

  setSearchEnabled(enabled: boolean): void {
    el<HTMLButtonElement>("run-search").disabled = !enabled;
  }

  showBanner(message: string): void {
    const banner = el<HTMLDivElement>("banner");
    banner.textContent = message;
    banner.style.display = "block";
  }

  clearBanner(): void {
    el<HTMLDivElement>("banner").style.display = "none";
  }
}
