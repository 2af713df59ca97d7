/** Vector-field interpolation, streamline tracing, and color mapping.
 * Pure functions over the grid returned by the service. */

import { FieldGrid } from "./api.js";
import { Point } from "./geometry.js";

export interface FieldSampler {
  (p: Point): Point;
  readonly maxSpeed: number;
}

/** Bilinear interpolation over the row-major service grid. */
export function fieldSampler(grid: FieldGrid): FieldSampler {
  const [r0, r1] = grid.resolution;
  const [[lo0, hi0], [lo1, hi1]] = grid.bounds;
  const vx = grid.velocities.map((v) => v[0]);
  const vy = grid.velocities.map((v) => v[1]);
  const at = (i: number, j: number) => i * r1 + j;

  let maxSpeed = 0;
  for (let k = 0; k < grid.velocities.length; k++) {
    maxSpeed = Math.max(maxSpeed, Math.hypot(vx[k], vy[k]));
  }

  const sample = (p: Point): Point => {
    const fx = ((p.x - lo0) / (hi0 - lo0)) * (r0 - 1);
    const fy = ((p.y - lo1) / (hi1 - lo1)) * (r1 - 1);
    const i = Math.max(0, Math.min(r0 - 2, Math.floor(fx)));
    const j = Math.max(0, Math.min(r1 - 2, Math.floor(fy)));
    const u = Math.max(0, Math.min(1, fx - i));
    const v = Math.max(0, Math.min(1, fy - j));
    const blend = (f: number[]) =>
      f[at(i, j)] * (1 - u) * (1 - v) +
      f[at(i + 1, j)] * u * (1 - v) +
      f[at(i, j + 1)] * (1 - u) * v +
      f[at(i + 1, j + 1)] * u * v;
    return { x: blend(vx), y: blend(vy) };
  };
  return Object.assign(sample, { maxSpeed });
}

/**
 * Trace one streamline with midpoint steps, stopping when the flow stalls
 * (near the attractor) or the point leaves the grid bounds.
 */
export function traceStreamline(
  sampler: FieldSampler,
  start: Point,
  grid: FieldGrid,
  opts: { stepScale?: number; maxSteps?: number } = {},
): Point[] {
  const [[lo0, hi0], [lo1, hi1]] = grid.bounds;
  const span = Math.hypot(hi0 - lo0, hi1 - lo1);
  const h = (opts.stepScale ?? 0.004) * span;
  const maxSteps = opts.maxSteps ?? 400;
  const pts: Point[] = [{ ...start }];
  let p = { ...start };
  for (let k = 0; k < maxSteps; k++) {
    const v1 = sampler(p);
    const s1 = Math.hypot(v1.x, v1.y);
    if (s1 < 1e-6 * Math.max(1, sampler.maxSpeed)) break;
    const mid = { x: p.x + (h / (2 * s1)) * v1.x, y: p.y + (h / (2 * s1)) * v1.y };
    const v2 = sampler(mid);
    const s2 = Math.hypot(v2.x, v2.y);
    if (s2 < 1e-12) break;
    p = { x: p.x + (h / s2) * v2.x, y: p.y + (h / s2) * v2.y };
    if (p.x < lo0 || p.x > hi0 || p.y < lo1 || p.y > hi1) break;
    pts.push({ ...p });
  }
  return pts;
}

/** Seed points on a sparse sub-grid for streamline rendering. */
export function streamlineSeeds(grid: FieldGrid, every = 4): Point[] {
  const [[lo0, hi0], [lo1, hi1]] = grid.bounds;
  const [r0, r1] = grid.resolution;
  const seeds: Point[] = [];
  for (let i = 0; i < r0; i += every) {
    for (let j = 0; j < r1; j += every) {
      seeds.push({
        x: lo0 + (i / (r0 - 1)) * (hi0 - lo0),
        y: lo1 + (j / (r1 - 1)) * (hi1 - lo1),
      });
    }
  }
  return seeds;
}

/** Speed in [0, vmax] -> CSS color (dark blue, slow, to warm yellow, fast). */
export function speedColor(speed: number, vmax: number): string {
  const t = Math.max(0, Math.min(1, vmax > 0 ? speed / vmax : 0));
  const r = Math.round(20 + 235 * t);
  const g = Math.round(24 + 180 * t);
  const b = Math.round(96 + 40 * (1 - t));
  return `rgb(${r},${g},${b})`;
}
