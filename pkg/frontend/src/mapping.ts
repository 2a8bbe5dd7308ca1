import type { Axis } from "./types.js";

/** Rows/columns of the displayed plane for a slicing axis over (I, J, K). */
export function sliceDims(
  shape: [number, number, number],
  axis: Axis,
): { rows: number; cols: number } {
  const [i, j, k] = shape;
  if (axis === "z") return { rows: j, cols: k };
  if (axis === "y") return { rows: i, cols: k };
  return { rows: i, cols: j };
}

/**
 * Map a click inside the rendered slice to a voxel (i, j, k).
 *
 * px/py are display pixels relative to the image's top-left corner; scale
 * is displayed pixels per voxel. Returns null for clicks outside the image.
 */
export function pickPoint(
  px: number,
  py: number,
  shape: [number, number, number],
  axis: Axis,
  sliceIndex: number,
  scale: number,
): [number, number, number] | null {
  const { rows, cols } = sliceDims(shape, axis);
  if (px < 0 || py < 0 || px >= cols * scale || py >= rows * scale) {
    return null;
  }
  const col = Math.floor(px / scale);
  const row = Math.floor(py / scale);
  if (axis === "z") return [sliceIndex, row, col];
  if (axis === "y") return [row, sliceIndex, col];
  return [row, col, sliceIndex];
}

/** Display-pixel center of a voxel on the current slice (inverse of pickPoint). */
export function voxelToPixel(
  voxel: [number, number, number],
  axis: Axis,
  scale: number,
): { px: number; py: number } {
  const [i, j, k] = voxel;
  let row: number;
  let col: number;
  if (axis === "z") {
    row = j;
    col = k;
  } else if (axis === "y") {
    row = i;
    col = k;
  } else {
    row = i;
    col = j;
  }
  return { px: (col + 0.5) * scale, py: (row + 0.5) * scale };
}

/** Slice coordinate of a voxel along the viewing axis. */
export function sliceOf(voxel: [number, number, number], axis: Axis): number {
  if (axis === "z") return voxel[0];
  if (axis === "y") return voxel[1];
  return voxel[2];
}
