import { pollJob } from "./polling.js";
import { pickPoint } from "./mapping.js";
import { canRunSearch, initialState, jumpToPosition, selectSource, setSliceIndex, toggleTarget, volumeById, } from "./state.js";
/**
 * Five-step explorer workflow: pick the source scan, pick the slice, pick
 * targets, pick a region-of-interest point, run the search; then browse
 * heatmap overlays and jump to best matches.
 */
export class WorkflowController {
    api;
    view;
    pollOptions;
    state = initialState();
    results = [];
    jobCounter = 0;
    constructor(api, view, pollOptions = {}) {
        this.api = api;
        this.view = view;
        this.pollOptions = pollOptions;
    }
    refreshGate() {
        this.view.setSearchEnabled(canRunSearch(this.state));
    }
    /** Step 1: list volumes (error banner when the service is down). */
    async loadVolumeList() {
        try {
            this.state.volumes = await this.api.listVolumes();
            this.view.clearBanner();
        }
        catch (err) {
            this.view.showBanner(`service unreachable: ${String(err)}`);
            return;
        }
        this.view.renderVolumeList(this.state);
        this.refreshGate();
    }
    selectSource(id) {
        selectSource(this.state, id);
        this.view.renderSlice(this.state);
        this.refreshGate();
    }
    /** Step 2: choose the slice of interest (wheel/arrows call this too). */
    setSlice(index) {
        setSliceIndex(this.state, index);
        this.view.renderSlice(this.state);
    }
    /** Step 3: choose target scans. */
    toggleTarget(id) {
        toggleTarget(this.state, id);
        this.refreshGate();
    }
    /**
     * Step 4: click a region of interest; display pixels map back to a voxel
     * and out-of-image clicks leave the state unchanged.
     */
    pickPointAt(px, py, scale) {
        const vol = volumeById(this.state, this.state.sourceId);
        if (!vol)
            return;
        const voxel = pickPoint(px, py, vol.shape, this.state.axis, this.state.sliceIndex, scale);
        if (voxel === null)
            return;
        this.state.selectedPoint = voxel;
        this.view.renderMarker(this.state);
        this.refreshGate();
    }
    /** Step 5: run the search, poll to completion, show ranked results. */
    async runSearch() {
        if (!canRunSearch(this.state)) {
            throw new Error("search needs a selected point and at least one target");
        }
        const jobId = await this.api.startSearch({
            source_id: this.state.sourceId,
            center: this.state.selectedPoint,
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
            this.results = [...status.results].sort((a, b) => b.best_similarity - a.best_similarity);
            this.view.renderResults(this.state, this.results);
            this.view.renderOverlay(this.state, jobId);
            return this.results;
        }
        catch (err) {
            this.view.showBanner(`search failed: ${String(err)}`);
            return [];
        }
    }
    /** Jump the target viewer to the slice containing a result's box center. */
    jumpToBest(targetId) {
        const hit = this.results.find((r) => r.target_id === targetId);
        if (!hit)
            throw new Error(`no result for target ${targetId}`);
        jumpToPosition(this.state, targetId, hit.best_position);
        this.view.renderOverlay(this.state, this.state.activeJobId ?? "");
        return this.state.targetSliceIndex;
    }
}
