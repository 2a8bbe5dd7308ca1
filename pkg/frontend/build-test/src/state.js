import { sliceOf } from "./mapping.js";
export function initialState() {
    return {
        volumes: [],
        sourceId: null,
        axis: "z",
        sliceIndex: 0,
        preset: "blood",
        selectedPoint: null,
        boxSize: [16, 16, 16],
        targetIds: [],
        activeJobId: null,
        overlayOpacity: 0.5,
        targetSliceIndex: 0,
        viewedTargetId: null,
    };
}
export function volumeById(state, id) {
    return state.volumes.find((v) => v.id === id);
}
function axisExtent(shape, axis) {
    if (axis === "z")
        return shape[0];
    if (axis === "y")
        return shape[1];
    return shape[2];
}
/** Clamp a slice index into the source volume's bounds along the axis. */
export function clampSlice(state, index) {
    const vol = volumeById(state, state.sourceId);
    if (!vol)
        return 0;
    const n = axisExtent(vol.shape, state.axis);
    return Math.min(n - 1, Math.max(0, Math.round(index)));
}
export function selectSource(state, id) {
    state.sourceId = id;
    state.selectedPoint = null;
    state.activeJobId = null;
    state.sliceIndex = clampSlice(state, state.sliceIndex);
}
export function setSliceIndex(state, index) {
    state.sliceIndex = clampSlice(state, index);
}
export function toggleTarget(state, id) {
    const at = state.targetIds.indexOf(id);
    if (at >= 0) {
        state.targetIds.splice(at, 1);
    }
    else {
        state.targetIds.push(id);
    }
}
export function setOverlayOpacity(state, value) {
    state.overlayOpacity = Math.min(1, Math.max(0, value));
}
/** The UI never issues a search without a point and at least one target. */
export function canRunSearch(state) {
    return state.sourceId !== null && state.selectedPoint !== null &&
        state.targetIds.length > 0;
}
/** Move the target view to the slice holding a best-match box center. */
export function jumpToPosition(state, targetId, bestPosition) {
    const center = [
        bestPosition[0] + Math.floor(state.boxSize[0] / 2),
        bestPosition[1] + Math.floor(state.boxSize[1] / 2),
        bestPosition[2] + Math.floor(state.boxSize[2] / 2),
    ];
    state.viewedTargetId = targetId;
    const vol = volumeById(state, targetId);
    const n = vol ? axisExtent(vol.shape, state.axis) : 1;
    state.targetSliceIndex = Math.min(n - 1, Math.max(0, sliceOf(center, state.axis)));
}
