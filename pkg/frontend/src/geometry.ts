/** Stroke resampling and canvas/world coordinate mapping. */

export interface Point {
  x: number;
  y: number;
}

export interface StrokeSample extends Point {
  /** wall-clock milliseconds when the sample was captured */
  t: number;
}

export interface Bounds {
  lo: Point;
  hi: Point;
}

export const MIN_STROKE_SAMPLES = 3;

export function dist(a: Point, b: Point): number {
  return Math.hypot(a.x - b.x, a.y - b.y);
}

export function arcLength(points: Point[]): number {
  let total = 0;
  for (let i = 1; i < points.length; i++) total += dist(points[i - 1], points[i]);
  return total;
}

/**
 * Resample a stroke to `n` points spaced uniformly along its arc length.
 * Endpoints are preserved exactly. Throws if the stroke is degenerate
 * (fewer than two distinct samples or zero length).
 */
export function resampleUniform(samples: Point[], n: number): Point[] {
  if (n < MIN_STROKE_SAMPLES) throw new Error(`need at least ${MIN_STROKE_SAMPLES} output points`);
  const pts = dedupe(samples);
  if (pts.length < 2) throw new Error("stroke too short: needs at least two distinct points");
  const total = arcLength(pts);
  if (total <= 0) throw new Error("stroke has zero length");

  const out: Point[] = [pts[0]];
  const step = total / (n - 1);
  let segIdx = 0;
  let segStart = 0; // arc length at the start of the current segment
  for (let k = 1; k < n - 1; k++) {
    const target = k * step;
    while (segIdx < pts.length - 2 &&
           segStart + dist(pts[segIdx], pts[segIdx + 1]) < target) {
      segStart += dist(pts[segIdx], pts[segIdx + 1]);
      segIdx++;
    }
    const segLen = dist(pts[segIdx], pts[segIdx + 1]);
    const u = segLen > 0 ? (target - segStart) / segLen : 0;
    out.push({
      x: pts[segIdx].x + u * (pts[segIdx + 1].x - pts[segIdx].x),
      y: pts[segIdx].y + u * (pts[segIdx + 1].y - pts[segIdx].y),
    });
  }
  out.push(pts[pts.length - 1]);
  return out;
}

function dedupe(points: Point[]): Point[] {
  const out: Point[] = [];
  for (const p of points) {
    const last = out[out.length - 1];
    if (!last || dist(last, p) > 1e-12) out.push({ x: p.x, y: p.y });
  }
  return out;
}

/**
 * Maps between canvas pixels (y grows downward) and world task space
 * (y grows upward). Drag deltas map through the linear part only.
 */
export class ViewTransform {
  constructor(
    readonly width: number,
    readonly height: number,
    readonly bounds: Bounds,
  ) {
    if (width <= 0 || height <= 0) throw new Error("canvas size must be positive");
    if (bounds.hi.x <= bounds.lo.x || bounds.hi.y <= bounds.lo.y) {
      throw new Error("bounds must satisfy hi > lo");
    }
  }

  toWorld(px: Point): Point {
    const { lo, hi } = this.bounds;
    return {
      x: lo.x + (px.x / this.width) * (hi.x - lo.x),
      y: hi.y - (px.y / this.height) * (hi.y - lo.y),
    };
  }

  toCanvas(w: Point): Point {
    const { lo, hi } = this.bounds;
    return {
      x: ((w.x - lo.x) / (hi.x - lo.x)) * this.width,
      y: ((hi.y - w.y) / (hi.y - lo.y)) * this.height,
    };
  }

  /** Screen-space drag vector -> world-space delta (no translation). */
  deltaToWorld(dpx: Point): Point {
    const { lo, hi } = this.bounds;
    return {
      x: (dpx.x / this.width) * (hi.x - lo.x),
      y: (-dpx.y / this.height) * (hi.y - lo.y),
    };
  }
}
