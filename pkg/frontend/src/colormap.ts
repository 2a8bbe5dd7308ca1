/**
 * Fixed sequential colormap for similarity overlays: similarity in [-1, 1]
 * is clamped to [0, 1] display range and mapped through viridis control
 * points (perceptually uniform, monotone lightness).
 */

const VIRIDIS: Array<[number, number, number]> = [
  [68, 1, 84],
  [71, 44, 122],
  [59, 81, 139],
  [44, 113, 142],
  [33, 144, 141],
  [39, 173, 129],
  [92, 200, 99],
  [170, 220, 50],
  [253, 231, 37],
];

export function similarityColor(
  similarity: number,
): [number, number, number] {
  const t = Math.min(1, Math.max(0, similarity));
  const pos = t * (VIRIDIS.length - 1);
  const lo = Math.floor(pos);
  const hi = Math.min(VIRIDIS.length - 1, lo + 1);
  const frac = pos - lo;
  const a = VIRIDIS[lo];
  const b = VIRIDIS[hi];
  return [
    Math.round(a[0] + (b[0] - a[0]) * frac),
    Math.round(a[1] + (b[1] - a[1]) * frac),
    Math.round(a[2] + (b[2] - a[2]) * frac),
  ];
}

/** Approximate relative luminance, used to check monotonicity in tests. */
export function luminance(rgb: [number, number, number]): number {
  return 0.2126 * rgb[0] + 0.7152 * rgb[1] + 0.0722 * rgb[2];
}
