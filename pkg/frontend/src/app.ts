/** Studio wiring: draw demonstrations, train, inspect the field, steer rollouts.
 *
 * All policy math happens server-side; this file only captures input,
 * renders server data, and posts commands.
 */

import { FieldGrid, ModelInfo, StableflowClient, StepEvent } from "./api.js";
import {
  DemoStroke, ResampledStroke, TASK_KINDS, TaskKind, buildDatasetDoc,
  obsSpecFor, resampleStroke,
} from "./dataset.js";
import { fieldSampler, speedColor, streamlineSeeds, traceStreamline } from "./field.js";
import { Point, StrokeSample, ViewTransform } from "./geometry.js";

const WORLD = { lo: { x: -1, y: -1 }, hi: { x: 1, y: 1 } };
const SESSION_DT = 0.02;
const RESAMPLE_M = 120;
const FIELD_RES = 29;

interface Session {
  datasetId?: string;
  jobId?: string;
  modelId?: string;
  rolloutId?: string;
  model?: ModelInfo;
  grid?: FieldGrid;
}

const state = {
  strokes: [] as ResampledStroke[],
  task: "sine" as TaskKind,
  obsMode: "onehot" as "onehot" | "image",
  session: {} as Session,
  live: {
    trail: [] as Point[],
    vHistory: [] as number[],
    lastStep: undefined as StepEvent | undefined,
    closed: true,
  },
};

function el<T extends HTMLElement>(id: string): T {
  const node = document.getElementById(id);
  if (!node) throw new Error(`missing element #${id}`);
  return node as T;
}

function status(text: string) {
  el<HTMLDivElement>("status").textContent = text;
}

function main() {
  const canvas = el<HTMLCanvasElement>("board");
  const ctx = canvas.getContext("2d")!;
  const view = new ViewTransform(canvas.width, canvas.height, WORLD);
  const client = new StableflowClient(
    (window as unknown as { STABLEFLOW_URL?: string }).STABLEFLOW_URL ?? "");

  // ------------------------------------------------------------- drawing
  let capture: StrokeSample[] | null = null;
  let dragging = false;
  let dragStart: Point | null = null;

  canvas.addEventListener("pointerdown", (ev) => {
    const p = canvasPoint(canvas, ev);
    if (!state.live.closed && state.live.lastStep) {
      const marker = view.toCanvas(worldOf(state.live.lastStep));
      if (Math.hypot(marker.x - p.x, marker.y - p.y) < 18) {
        dragging = true;
        dragStart = p;
        return;
      }
    }
    capture = [{ ...p, t: performance.now() }];
  });

  canvas.addEventListener("pointermove", (ev) => {
    const p = canvasPoint(canvas, ev);
    if (dragging) return; // delta applied on release
    if (capture) {
      capture.push({ ...p, t: performance.now() });
      redraw(ctx, view, canvasPreview(capture));
    }
  });

  canvas.addEventListener("pointerup", async (ev) => {
    const p = canvasPoint(canvas, ev);
    if (dragging && dragStart && state.session.rolloutId) {
      dragging = false;
      const deltaPx = { x: p.x - dragStart.x, y: p.y - dragStart.y };
      const d = view.deltaToWorld(deltaPx);
      dragStart = null;
      try {
        await client.perturb(state.session.rolloutId, [d.x, d.y]);
        status(`perturbation queued: (${d.x.toFixed(2)}, ${d.y.toFixed(2)})`);
      } catch (err) {
        status(String(err));
      }
      return;
    }
    if (!capture) return;
    const samples = capture;
    capture = null;
    try {
      const stroke: DemoStroke = {
        samples, task: state.task, dt: SESSION_DT, m: RESAMPLE_M,
      };
      const resampled = resampleStroke(stroke, (q) => view.toWorld(q));
      state.strokes.push(resampled);
      status(`captured ${state.task} stroke (${samples.length} raw samples)`);
      updateStrokeList();
    } catch (err) {
      status(`stroke rejected: ${err}`);
    }
    redraw(ctx, view);
  });

  // -------------------------------------------------------------- controls
  for (const kind of TASK_KINDS) {
    el<HTMLButtonElement>(`task-${kind}`).addEventListener("click", async () => {
      state.task = kind;
      document.querySelectorAll(".task-btn").forEach((b) =>
        b.classList.toggle("active", b.id === `task-${kind}`));
      if (state.session.rolloutId && !state.live.closed) {
        try {
          await client.switchObs(state.session.rolloutId,
                                 obsSpecFor(kind, state.obsMode));
          status(`observation switched to ${kind}`);
        } catch (err) {
          status(String(err));
        }
      }
    });
  }

  el<HTMLInputElement>("image-mode").addEventListener("change", (ev) => {
    state.obsMode = (ev.target as HTMLInputElement).checked ? "image" : "onehot";
  });

  el<HTMLButtonElement>("clear").addEventListener("click", () => {
    state.strokes = [];
    state.session = {};
    updateStrokeList();
    redraw(ctx, view);
    status("cleared");
  });

  el<HTMLButtonElement>("train").addEventListener("click", async () => {
    if (!state.strokes.length) {
      status("draw at least one stroke first");
      return;
    }
    try {
      status("uploading dataset...");
      const doc = buildDatasetDoc(state.strokes, {
        obsMode: state.obsMode, imageShape: [32, 32],
      });
      state.session.datasetId = await client.uploadDataset(doc);
      status("training...");
      const net = state.obsMode === "image" ? "conv" : "mlp:32,32";
      state.session.jobId = await client.startTraining(state.session.datasetId, {
        n_systems: 5, epochs: 400, net,
      });
      const job = await client.waitForJob(state.session.jobId, 400, (j) => {
        if (j.progress.epoch >= 0) {
          status(`training: epoch ${j.progress.epoch}, loss ${j.progress.loss?.toExponential(3)}`);
          drawLoss(j.progress.epoch, j.progress.loss);
        }
      });
      if (job.state === "failed" || !job.model_id) {
        status(`training failed: ${job.error}`);
        return;
      }
      state.session.modelId = job.model_id;
      state.session.model = await client.getModel(job.model_id);
      drawLossHistory(state.session.model.loss_history);
      await refreshField(client, view);
      redraw(ctx, view);
      status(`model ${job.model_id} ready; certificate ` +
             (state.session.model.certificate.verdict ? "valid" : "INVALID"));
    } catch (err) {
      status(String(err));
    }
  });

  el<HTMLButtonElement>("rollout").addEventListener("click", async () => {
    const model = state.session.modelId;
    if (!model) {
      status("train a model first");
      return;
    }
    const start = state.strokes.length
      ? state.strokes[state.strokes.length - 1].points[0]
      : { x: WORLD.lo.x * 0.8, y: WORLD.lo.y * 0.8 };
    try {
      state.live = { trail: [], vHistory: [], lastStep: undefined, closed: false };
      state.session.rolloutId = await client.startRollout(model, {
        x0: [start.x, start.y],
        obs: obsSpecFor(state.task, state.obsMode),
        dt: SESSION_DT,
        tick_hz: 60,
      });
      status("rollout live: drag the point to perturb, task buttons switch the sign");
      for await (const ev of client.streamRollout(state.session.rolloutId)) {
        if (ev.event === "step") {
          const step = ev.data as StepEvent;
          state.live.lastStep = step;
          state.live.trail.push(worldOf(step));
          state.live.vHistory.push(step.V);
          redraw(ctx, view);
          drawSparkline(state.live.vHistory);
        } else if (ev.event === "perturb") {
          status("perturbation applied");
        } else if (ev.event === "obs") {
          status("observation switched");
        } else if (ev.event === "converged") {
          const data = ev.data as { convergence_time: number };
          status(`converged (entered tolerance at t=${data.convergence_time?.toFixed(2)}s)`);
          state.live.closed = true;
        }
      }
      state.live.closed = true;
    } catch (err) {
      state.live.closed = true;
      status(String(err));
    }
  });

  async function refreshField(c: StableflowClient, v: ViewTransform) {
    if (!state.session.modelId) return;
    state.session.grid = await c.getField(state.session.modelId, {
      obs: obsSpecFor(state.task, state.obsMode),
      lo: WORLD.lo, hi: WORLD.hi, res: FIELD_RES,
    });
  }

  redraw(ctx, view);
  status("draw a demonstration, pick its task icon, then train");
}

function worldOf(step: StepEvent): Point {
  return { x: step.xc[0], y: step.xc[1] };
}

function canvasPoint(canvas: HTMLCanvasElement, ev: PointerEvent): Point {
  const rect = canvas.getBoundingClientRect();
  return {
    x: ((ev.clientX - rect.left) / rect.width) * canvas.width,
    y: ((ev.clientY - rect.top) / rect.height) * canvas.height,
  };
}

function canvasPreview(samples: StrokeSample[]): Point[] {
  return samples.map((s) => ({ x: s.x, y: s.y }));
}

function updateStrokeList() {
  const ul = el<HTMLUListElement>("strokes");
  ul.innerHTML = "";
  state.strokes.forEach((s, i) => {
    const li = document.createElement("li");
    li.textContent = `#${i + 1} ${s.task} (${s.points.length} pts)`;
    ul.appendChild(li);
  });
}

function redraw(ctx: CanvasRenderingContext2D, view: ViewTransform,
                preview?: Point[]) {
  const { width, height } = ctx.canvas;
  ctx.fillStyle = "#10141c";
  ctx.fillRect(0, 0, width, height);

  const grid = state.session.grid;
  if (grid) {
    const sampler = fieldSampler(grid);
    // heatmap of speed on the raw grid cells
    const [r0, r1] = grid.resolution;
    const cw = width / (r0 - 1);
    const chh = height / (r1 - 1);
    grid.points.forEach((p, k) => {
      const v = grid.velocities[k];
      const c = view.toCanvas({ x: p[0], y: p[1] });
      ctx.fillStyle = speedColor(Math.hypot(v[0], v[1]), sampler.maxSpeed);
      ctx.globalAlpha = 0.35;
      ctx.fillRect(c.x - cw / 2, c.y - chh / 2, cw, chh);
    });
    ctx.globalAlpha = 1.0;
    // streamlines
    ctx.strokeStyle = "rgba(190, 205, 235, 0.55)";
    ctx.lineWidth = 1;
    for (const seed of streamlineSeeds(grid, 4)) {
      const line = traceStreamline(sampler, seed, grid);
      if (line.length < 2) continue;
      ctx.beginPath();
      line.forEach((p, i) => {
        const c = view.toCanvas(p);
        if (i === 0) ctx.moveTo(c.x, c.y);
        else ctx.lineTo(c.x, c.y);
      });
      ctx.stroke();
    }
    // attractor
    const a = view.toCanvas({ x: grid.attractor[0], y: grid.attractor[1] });
    ctx.fillStyle = "#ffd75e";
    ctx.beginPath();
    ctx.arc(a.x, a.y, 6, 0, 2 * Math.PI);
    ctx.fill();
  }

  // strokes
  const colors: Record<TaskKind, string> = {
    sine: "#7fd3ff", line: "#9dff9d", curve: "#ff9dbb",
  };
  for (const s of state.strokes) {
    ctx.strokeStyle = colors[s.task];
    ctx.lineWidth = 2;
    ctx.beginPath();
    s.points.forEach((p, i) => {
      const c = view.toCanvas(p);
      if (i === 0) ctx.moveTo(c.x, c.y);
      else ctx.lineTo(c.x, c.y);
    });
    ctx.stroke();
  }

  if (preview) {
    ctx.strokeStyle = "#eeeeee";
    ctx.lineWidth = 1.5;
    ctx.beginPath();
    preview.forEach((p, i) => {
      if (i === 0) ctx.moveTo(p.x, p.y);
      else ctx.lineTo(p.x, p.y);
    });
    ctx.stroke();
  }

  // live rollout trail + marker
  if (state.live.trail.length) {
    ctx.strokeStyle = "#ffffff";
    ctx.lineWidth = 2;
    ctx.beginPath();
    state.live.trail.forEach((p, i) => {
      const c = view.toCanvas(p);
      if (i === 0) ctx.moveTo(c.x, c.y);
      else ctx.lineTo(c.x, c.y);
    });
    ctx.stroke();
    const last = view.toCanvas(state.live.trail[state.live.trail.length - 1]);
    ctx.fillStyle = state.live.closed ? "#9dff9d" : "#ff5d5d";
    ctx.beginPath();
    ctx.arc(last.x, last.y, 8, 0, 2 * Math.PI);
    ctx.fill();
  }
}

function drawLoss(epoch: number, loss: number | null) {
  if (loss == null) return;
  const canvas = el<HTMLCanvasElement>("loss");
  const ctx = canvas.getContext("2d")!;
  if (epoch === 0) ctx.clearRect(0, 0, canvas.width, canvas.height);
  const x = Math.min(canvas.width - 1, epoch / 2);
  const y = canvas.height - Math.min(
    canvas.height - 2,
    (Math.log10(Math.max(loss, 1e-8)) + 8) * (canvas.height / 9));
  ctx.fillStyle = "#7fd3ff";
  ctx.fillRect(x, y, 2, 2);
}

function drawLossHistory(history: number[]) {
  const canvas = el<HTMLCanvasElement>("loss");
  const ctx = canvas.getContext("2d")!;
  ctx.clearRect(0, 0, canvas.width, canvas.height);
  history.forEach((loss, epoch) => drawLoss(epoch, loss));
}

function drawSparkline(values: number[]) {
  const canvas = el<HTMLCanvasElement>("lyapunov");
  const ctx = canvas.getContext("2d")!;
  ctx.clearRect(0, 0, canvas.width, canvas.height);
  const recent = values.slice(-canvas.width);
  const vmax = Math.max(...recent, 1e-12);
  ctx.strokeStyle = "#ffd75e";
  ctx.beginPath();
  recent.forEach((v, i) => {
    const y = canvas.height - 2 - (v / vmax) * (canvas.height - 4);
    if (i === 0) ctx.moveTo(i, y);
    else ctx.lineTo(i, y);
  });
  ctx.stroke();
}

window.addEventListener("DOMContentLoaded", main);
