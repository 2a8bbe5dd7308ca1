import assert from "node:assert/strict";
import { test } from "node:test";

import { pickPoint, sliceDims, sliceOf, voxelToPixel } from "../src/mapping.js";

const SHAPE: [number, number, number] = [40, 48, 56];

test("corner click at 1x maps to voxel (slice, 0, 0) on axis z", () => {
  assert.deepEqual(pickPoint(0, 0, SHAPE, "z", 5, 1), [5, 0, 0]);
});

test("2x zoom click (10, 10) maps to in-plane voxel (5, 5)", () => {
  assert.deepEqual(pickPoint(10, 10, SHAPE, "z", 7, 2), [7, 5, 5]);
});

test("clicks outside the image are ignored", () => {
  assert.equal(pickPoint(-1, 0, SHAPE, "z", 0, 1), null);
  assert.equal(pickPoint(0, 48, SHAPE, "z", 0, 1), null); // rows = J = 48
  assert.equal(pickPoint(56 * 2, 0, SHAPE, "z", 0, 2), null);
});

test("axis orientations", () => {
  assert.deepEqual(sliceDims(SHAPE, "z"), { rows: 48, cols: 56 });
  assert.deepEqual(sliceDims(SHAPE, "y"), { rows: 40, cols: 56 });
  assert.deepEqual(sliceDims(SHAPE, "x"), { rows: 40, cols: 48 });
  assert.deepEqual(pickPoint(3, 2, SHAPE, "y", 9, 1), [2, 9, 3]);
  assert.deepEqual(pickPoint(3, 2, SHAPE, "x", 11, 1), [2, 3, 11]);
});

test("voxel -> pixel -> voxel round trip within one pixel at 1x and 2x", () => {
  for (const scale of [1, 2]) {
    for (const axis of ["z", "y", "x"] as const) {
      for (const voxel of [[0, 0, 0], [5, 7, 9], [39, 47, 55]] as Array<
        [number, number, number]
      >) {
        const sliceIndex = sliceOf(voxel, axis);
        const { px, py } = voxelToPixel(voxel, axis, scale);
        const back = pickPoint(px, py, SHAPE, axis, sliceIndex, scale);
        assert.ok(back !== null);
        for (let d = 0; d < 3; d++) {
          assert.ok(
            Math.abs((back as number[])[d] - voxel[d]) <= 1,
            `axis ${axis} scale ${scale}: ${voxel} -> ${back}`,
          );
        }
      }
    }
  }
});
