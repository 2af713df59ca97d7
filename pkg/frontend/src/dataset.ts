/** Build demonstration-dataset documents from drawn strokes. */

import { Point, StrokeSample, MIN_STROKE_SAMPLES, resampleUniform } from "./geometry.js";

export type TaskKind = "sine" | "line" | "curve";
export const TASK_KINDS: TaskKind[] = ["sine", "line", "curve"];

export interface DemoStroke {
  /** canvas-normalized samples in [0,1]^2, with capture timestamps */
  samples: StrokeSample[];
  task: TaskKind;
  /** resample target step, seconds of demonstrated motion per sample */
  dt: number;
  /** number of resampled states */
  m: number;
}

export interface ResampledStroke {
  task: TaskKind;
  dt: number;
  points: Point[]; // world coordinates
}

export function resampleStroke(
  stroke: DemoStroke,
  toWorld: (p: Point) => Point,
): ResampledStroke {
  if (stroke.samples.length < 2) throw new Error("stroke too short to resample");
  if (stroke.m < MIN_STROKE_SAMPLES) throw new Error("resample target too small");
  const uniform = resampleUniform(stroke.samples, stroke.m);
  return { task: stroke.task, dt: stroke.dt, points: uniform.map(toWorld) };
}

/** Base64 of little-endian float64 bytes; works in browsers and node. */
export function base64FromFloat64(values: number[]): string {
  const buf = new ArrayBuffer(values.length * 8);
  const view = new DataView(buf);
  values.forEach((v, i) => view.setFloat64(i * 8, v, true));
  const bytes = new Uint8Array(buf);
  const alphabet = "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";
  let out = "";
  for (let i = 0; i < bytes.length; i += 3) {
    const b0 = bytes[i];
    const b1 = i + 1 < bytes.length ? bytes[i + 1] : 0;
    const b2 = i + 2 < bytes.length ? bytes[i + 2] : 0;
    out += alphabet[b0 >> 2] + alphabet[((b0 & 3) << 4) | (b1 >> 4)];
    out += i + 1 < bytes.length ? alphabet[((b1 & 15) << 2) | (b2 >> 6)] : "=";
    out += i + 2 < bytes.length ? alphabet[b2 & 63] : "=";
  }
  return out;
}

/**
 * Rasterize a task icon as an anti-aliased polyline glyph, pixels in [0,1].
 * Used by the image-observation mode in place of one-hot labels.
 */
export function rasterizeGlyph(kind: TaskKind, h: number, w: number): number[] {
  const margin = 0.15;
  const n = 6 * Math.max(h, w);
  const rows: number[] = [];
  const cols: number[] = [];
  const r0 = margin * (h - 1), r1 = (1 - margin) * (h - 1);
  const c0 = margin * (w - 1), c1 = (1 - margin) * (w - 1);
  for (let i = 0; i < n; i++) {
    const u = i / (n - 1);
    if (kind === "line") {
      rows.push(r1 + (r0 - r1) * u);
      cols.push(c0 + (c1 - c0) * u);
    } else if (kind === "sine") {
      cols.push(c0 + (c1 - c0) * u);
      rows.push(0.5 * (r0 + r1) + 0.45 * (r1 - r0) * Math.sin(2 * Math.PI * u));
    } else {
      const theta = Math.PI * (1 - u);
      cols.push(0.5 * (c0 + c1) + 0.5 * (c1 - c0) * Math.cos(theta));
      rows.push(r1 - (r1 - 0.5 * (r0 + r1)) * Math.sin(theta));
    }
  }
  const width = 1.3;
  const img: number[] = new Array(h * w);
  for (let r = 0; r < h; r++) {
    for (let c = 0; c < w; c++) {
      let best = Infinity;
      for (let i = 0; i < n; i++) {
        const d = Math.hypot(r - rows[i], c - cols[i]);
        if (d < best) best = d;
      }
      img[r * w + c] = Math.min(1, Math.max(0, 1 - best / width));
    }
  }
  return img;
}

export interface DatasetOptions {
  obsMode: "onehot" | "image";
  imageShape?: [number, number];
}

/**
 * Assemble the upload document from resampled strokes. Task labels become
 * one-hot payloads, or rasterized icons when image mode is on. All strokes
 * should end near a common point (the trained attractor is their mean
 * endpoint).
 */
export function buildDatasetDoc(strokes: ResampledStroke[], opts: DatasetOptions): object {
  if (!strokes.length) throw new Error("no strokes to upload");
  const dt = strokes[0].dt;
  if (strokes.some((s) => s.dt !== dt)) throw new Error("strokes must share dt");

  const head: Record<string, unknown> = {
    version: 1,
    dt,
    d_c: 2,
    obs_kind: opts.obsMode === "image" ? "image" : "vector",
  };
  const glyphs = new Map<TaskKind, string>();
  if (opts.obsMode === "image") {
    const [h, w] = opts.imageShape ?? [32, 32];
    head.image_shape = [h, w];
    for (const kind of TASK_KINDS) {
      glyphs.set(kind, base64FromFloat64(rasterizeGlyph(kind, h, w)));
    }
  } else {
    head.d_nc = TASK_KINDS.length;
  }

  head.trajectories = strokes.map((s) => ({
    states: s.points.map((p) => {
      const state: Record<string, unknown> = { xc: [p.x, p.y] };
      if (opts.obsMode === "image") {
        state.xnc_image = glyphs.get(s.task);
      } else {
        const onehot = TASK_KINDS.map((k) => (k === s.task ? 1.0 : 0.0));
        state.xnc = onehot;
      }
      return state;
    }),
  }));
  return head;
}

/** Observation spec string for a task under the current mode. */
export function obsSpecFor(task: TaskKind, obsMode: "onehot" | "image"): string {
  if (obsMode === "image") return `glyph:${task}`;
  return `onehot:${TASK_KINDS.indexOf(task)}`;
}
