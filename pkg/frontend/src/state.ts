import type { Axis, VolumeInfo, WindowPreset } from "./types.js";
import { sliceOf } from "./mapping.js";

export interface ViewerState {
  volumes: VolumeInfo[];
  sourceId: string | null;
  axis: Axis;
  sliceIndex: number;
  preset: WindowPreset;
  selectedPoint: [number, number, number] | null;
  boxSize: [number, number, number];
  targetIds: string[];
  activeJobId: string | null;
  overlayOpacity: number;
  targetSliceIndex: number;
  viewedTargetId: string | null;
}

export function initialState(): ViewerState {
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

export function volumeById(
  state: ViewerState,
  id: string | null,
): VolumeInfo | undefined {
  return state.volumes.find((v) => v.id === id);
}

function axisExtent(shape: [number, number, number], axis: Axis): number {
  if (axis === "z") return shape[0];
  if (axis === "y") return shape[1];
  return shape[2];
}

/** Clamp a slice index into the source volume's bounds along the axis. */
export function clampSlice(state: ViewerState, index: number): number {
  const vol = volumeById(state, state.sourceId);
  if (!vol) return 0;
  const n = axisExtent(vol.shape, state.axis);
  return Math.min(n - 1, Math.max(0, Math.round(index)));
}

export function selectSource(state: ViewerState, id: string): void {
  state.sourceId = id;
  state.selectedPoint = null;
  state.activeJobId = null;
  state.sliceIndex = clampSlice(state, state.sliceIndex);
}

export function setSliceIndex(state: ViewerState, index: number): void {
  state.sliceIndex = clampSlice(state, index);
}

export function toggleTarget(state: ViewerState, id: string): void {
  const at = state.targetIds.indexOf(id);
  if (at >= 0) {
    state.targetIds.splice(at, 1);
  } else {
    state.targetIds.push(id);
  }
}

export function setOverlayOpacity(state: ViewerState, value: number): void {
  state.overlayOpacity = Math.min(1, Math.max(0, value));
}

/** The UI never issues a search without a point and at least one target. */
export function canRunSearch(state: ViewerState): boolean {
  return state.sourceId !== null && state.selectedPoint !== null &&
    state.targetIds.length > 0;
}

/** Move the target view to the slice holding a best-match box center. */
export function jumpToPosition(
  state: ViewerState,
  targetId: string,
  bestPosition: [number, number, number],
): void {
  const center: [number, number, number] = [
    bestPosition[0] + Math.floor(state.boxSize[0] / 2),
    bestPosition[1] + Math.floor(state.boxSize[1] / 2),
    bestPosition[2] + Math.floor(state.boxSize[2] / 2),
  ];
  state.viewedTargetId = targetId;
  const vol = volumeById(state, targetId);
  const n = vol ? axisExtent(vol.shape, state.axis) : 1;
  state.targetSliceIndex = Math.min(
    n - 1,
    Math.max(0, sliceOf(center, state.axis)),
  );
}
