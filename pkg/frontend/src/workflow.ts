import { ApiClient } from "./api.js";
import { pollJob, PollOptions } from "./polling.js";
import { pickPoint } from "./mapping.js";
import {
  canRunSearch,
  initialState,
  jumpToPosition,
  selectSource,
  setSliceIndex,
  toggleTarget,
  ViewerState,
  volumeById,
} from "./state.js";
import type { SearchResult } from "./types.js";

/** Everything the controller tells the presentation layer to show. */
export interface View {
  renderVolumeList(state: ViewerState): void;
  renderSlice(state: ViewerState): void;
  renderMarker(state: ViewerState): void;
  renderResults(state: ViewerState, results: SearchResult[]): void;
  renderOverlay(state: ViewerState, jobId: string): void;
  setSearchEnabled(enabled: boolean): void;
  showBanner(message: string): void;
  clearBanner(): void;
}

/**
 * Five-step explorer workflow: pick the source scan, pick the slice, pick
 * targets, pick a region-of-interest point, run the search; then browse
 * heatmap overlays and jump to best matches.
 */
export class WorkflowController {
  readonly state: ViewerState = initialState();
  results: SearchResult[] = [];
  private jobCounter = 0;

  constructor(
    private readonly api: ApiClient,
    private readonly view: View,
    private readonly pollOptions: PollOptions = {},
  ) {}

  private refreshGate(): void {
    this.view.setSearchEnabled(canRunSearch(this.state));
  }

  /** Step 1: list volumes (error banner when the service is down). */
  async loadVolumeList(): Promise<void> {
    try {
      this.state.volumes = await this.api.listVolumes();
      this.view.clearBanner();
    } catch (err) {
      this.view.showBanner(`service unreachable: ${String(err)}`);
      return;
    }
    this.view.renderVolumeList(this.state);
    this.refreshGate();
  }

  selectSource(id: string): void {
    selectSource(this.state, id);
    this.view.renderSlice(this.state);
    this.refreshGate();
  }

  /** Step 2: choose the slice of interest (wheel/arrows call this too). */
  setSlice(index: number): void {
    setSliceIndex(this.state, index);
    this.view.renderSlice(this.state);
  }

  /** Step 3: choose target scans. */
  toggleTarget(id: string): void {
    toggleTarget(this.state, id);
    this.refreshGate();
  }

  /**
   * Step 4: click a region of interest; display pixels map back to a voxel
   * and out-of-image clicks leave the state unchanged.
   */
  pickPointAt(px: number, py: number, scale: number): void {
    const vol = volumeById(this.state, this.state.sourceId);
    if (!vol) return;
    const voxel = pickPoint(
      px,
      py,
      vol.shape,
      this.state.axis,
      this.state.sliceIndex,
      scale,
    );
    if (voxel === null) return;
    this.state.selectedPoint = voxel;
    this.view.renderMarker(this.state);
    this.refreshGate();
  }

  /** Step 5: run the search, poll to completion, show ranked results. */
  async runSearch(): Promise<SearchResult[]> {
    if (!canRunSearch(this.state)) {
      throw new Error("search needs a selected point and at least one target");
    }
    const jobId = await this.api.startSearch({
      source_id: this.state.sourceId as string,
      center: this.state.selectedPoint as [number, number, number],
      box: this.state.boxSize,
      target_ids: [...this.state.targetIds],
      stride: this.state.boxSize,
    });
    this.state.activeJobId = jobId;
    this.jobCounter += 1;
    try {
      const status = await pollJob(this.api, jobId, {
        ...this.pollOptions,
        isCurrent: (id) => this.state.activeJobId === id,
      });
      if (status.status === "failed") {
        this.view.showBanner(`search failed: ${status.error ?? "unknown"}`);
        return [];
      }
      this.results = [...status.results].sort(
        (a, b) => b.best_similarity - a.best_similarity,
      );
      this.view.renderResults(this.state, this.results);
      this.view.renderOverlay(this.state, jobId);
      return this.results;
    } catch (err) {
      this.view.showBanner(`search failed: ${String(err)}`);
      return [];
    }
  }

  /** Jump the target viewer to the slice containing a result's box center. */
  jumpToBest(targetId: string): number {
    const hit = this.results.find((r) => r.target_id === targetId);
    if (!hit) throw new Error(`no result for target ${targetId}`);
    jumpToPosition(this.state, targetId, hit.best_position);
    this.view.renderOverlay(this.state, this.state.activeJobId ?? "");
    return this.state.targetSliceIndex;
  }
}
