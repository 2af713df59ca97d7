import { describe, expect, it } from "vitest";

import {
  base64FromFloat64, buildDatasetDoc, obsSpecFor, rasterizeGlyph,
  resampleStroke,
} from "../src/dataset.js";
import { ViewTransform } from "../src/geometry.js";

const view = new ViewTransform(100, 100, {
  lo: { x: -1, y: -1 }, hi: { x: 1, y: 1 },
});

function decodeF64(b64: string): number[] {
  const buf = Buffer.from(b64, "base64");
  // Buffers share a pool; respect the view's offset and length.
  return [...new Float64Array(buf.buffer, buf.byteOffset, buf.length / 8)];
}

function diagStroke(n = 50) {
  return Array.from({ length: n }, (_, i) => ({
    x: (i / (n - 1)) * 100, y: 100 - (i / (n - 1)) * 100, t: i * 10,
  }));
}

describe("base64FromFloat64", () => {
  it("matches node Buffer encoding of little-endian doubles", () => {
    const values = [0.0, 1.0, -2.5, 3.141592653589793, 1e-12];
    const buf = Buffer.alloc(values.length * 8);
    values.forEach((v, i) => buf.writeDoubleLE(v, i * 8));
    expect(base64FromFloat64(values)).toBe(buf.toString("base64"));
  });

  it("round-trips through a decoder", () => {
    const values = Array.from({ length: 33 }, (_, i) => Math.sin(i * 1.7));
    const b64 = base64FromFloat64(values);
    expect(decodeF64(b64)).toEqual(values);
  });
});

describe("rasterizeGlyph", () => {
  it("produces pixels in [0,1] with a visible stroke", () => {
    for (const kind of ["sine", "line", "curve"] as const) {
      const img = rasterizeGlyph(kind, 32, 32);
      expect(img).toHaveLength(1024);
      expect(Math.min(...img)).toBeGreaterThanOrEqual(0);
      expect(Math.max(...img)).toBeLessThanOrEqual(1);
      expect(Math.max(...img)).toBeGreaterThan(0.9);
    }
  });

  it("draws distinct glyphs per task", () => {
    const a = rasterizeGlyph("sine", 32, 32);
    const b = rasterizeGlyph("line", 32, 32);
    const maxDiff = Math.max(...a.map((v, i) => Math.abs(v - b[i])));
    expect(maxDiff).toBeGreaterThan(0.5);
  });
});

describe("buildDatasetDoc", () => {
  function strokes() {
    const s1 = resampleStroke(
      { samples: diagStroke(), task: "line", dt: 0.02, m: 20 },
      (p) => view.toWorld(p));
    const s2 = resampleStroke(
      { samples: diagStroke(80), task: "sine", dt: 0.02, m: 20 },
      (p) => view.toWorld(p));
    return [s1, s2];
  }

  it("builds the one-hot document shape", () => {
    const doc = buildDatasetDoc(strokes(), { obsMode: "onehot" }) as any;
    expect(doc.version).toBe(1);
    expect(doc.obs_kind).toBe("vector");
    expect(doc.d_nc).toBe(3);
    expect(doc.trajectories).toHaveLength(2);
    const st = doc.trajectories[0].states[0];
    expect(st.xc).toHaveLength(2);
    expect(st.xnc).toEqual([0, 1, 0]); // line is task index 1
    expect(doc.trajectories[1].states[0].xnc).toEqual([1, 0, 0]);
  });

  it("builds image documents with base64 payloads", () => {
    const doc = buildDatasetDoc(strokes(), {
      obsMode: "image", imageShape: [16, 16],
    }) as any;
    expect(doc.obs_kind).toBe("image");
    expect(doc.image_shape).toEqual([16, 16]);
    const blob = doc.trajectories[0].states[0].xnc_image;
    expect(typeof blob).toBe("string");
    expect(decodeF64(blob)).toHaveLength(256);
  });

  it("maps tasks to observation specs", () => {
    expect(obsSpecFor("sine", "onehot")).toBe("onehot:0");
    expect(obsSpecFor("curve", "onehot")).toBe("onehot:2");
    expect(obsSpecFor("line", "image")).toBe("glyph:line");
  });

  it("rejects mixed dt", () => {
    const [a, b] = strokes();
    (b as { dt: number }).dt = 0.05;
    expect(() => buildDatasetDoc([a, b], { obsMode: "onehot" })).toThrow(/dt/);
  });
});
