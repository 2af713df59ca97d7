/** Typed client for the training/rollout service; the UI computes no policy
 * math itself — every number on screen comes from these endpoints. */

import { Point } from "./geometry.js";
import { SSEEvent, sseStream } from "./sse.js";

export interface TrainConfig {
  n_systems?: number;
  epochs?: number;
  learning_rate?: number;
  batch_size?: number;
  seed?: number;
  net?: string;
  eps?: number;
}

export interface JobRecord {
  id: string;
  state: "queued" | "running" | "done" | "failed";
  progress: { epoch: number; loss: number | null };
  model_id: string | null;
  error: string | null;
}

export interface ModelInfo {
  model_id: string;
  d_c: number;
  n_systems: number;
  obs_kind: "vector" | "image";
  d_nc: number;
  image_shape: [number, number] | null;
  attractor: number[];
  final_loss: number;
  loss_history: number[];
  certificate: { verdict: boolean; per_system_min_eig: number[] };
}

export interface FieldGrid {
  bounds: [number, number][];
  resolution: [number, number];
  points: number[][];
  velocities: number[][];
  attractor: number[];
}

export interface StepEvent {
  t: number;
  xc: number[];
  v: number[];
  V: number;
}

async function expect<T>(resp: Response, what: string): Promise<T> {
  if (!resp.ok) {
    let detail = "";
    try {
      detail = JSON.stringify(await resp.json());
    } catch {
      /* body may be empty */
    }
    throw new Error(`${what} failed (${resp.status}) ${detail}`);
  }
  return (await resp.json()) as T;
}

export class StableflowClient {
  constructor(
    readonly baseUrl: string,
    private readonly fetchImpl: typeof fetch = fetch,
  ) {}

  private url(path: string): string {
    return `${this.baseUrl}${path}`;
  }

  async uploadDataset(doc: unknown): Promise<string> {
    const resp = await this.fetchImpl(this.url("/api/datasets"), {
      method: "POST",
      headers: { "content-type": "application/json" },
      body: JSON.stringify(doc),
    });
    const out = await expect<{ dataset_id: string }>(resp, "dataset upload");
    return out.dataset_id;
  }

  async startTraining(datasetId: string, config: TrainConfig): Promise<string> {
    const resp = await this.fetchImpl(this.url("/api/train"), {
      method: "POST",
      headers: { "content-type": "application/json" },
      body: JSON.stringify({ dataset_id: datasetId, config }),
    });
    const out = await expect<{ job_id: string }>(resp, "train request");
    return out.job_id;
  }

  async getJob(jobId: string): Promise<JobRecord> {
    return expect(await this.fetchImpl(this.url(`/api/jobs/${jobId}`)), "job poll");
  }

  async waitForJob(jobId: string, pollMs = 250, onProgress?: (j: JobRecord) => void): Promise<JobRecord> {
    for (;;) {
      const job = await this.getJob(jobId);
      onProgress?.(job);
      if (job.state === "done" || job.state === "failed") return job;
      await new Promise((r) => setTimeout(r, pollMs));
    }
  }

  async getModel(modelId: string): Promise<ModelInfo> {
    return expect(await this.fetchImpl(this.url(`/api/models/${modelId}`)), "model fetch");
  }

  async getField(
    modelId: string,
    opts: { obs?: string; lo: Point; hi: Point; res: number },
  ): Promise<FieldGrid> {
    const params = new URLSearchParams({
      lo: `${opts.lo.x},${opts.lo.y}`,
      hi: `${opts.hi.x},${opts.hi.y}`,
      res: String(opts.res),
    });
    if (opts.obs) params.set("obs", opts.obs);
    const resp = await this.fetchImpl(
      this.url(`/api/models/${modelId}/field?${params}`));
    return expect(resp, "field fetch");
  }

  async startRollout(
    modelId: string,
    opts: { x0: number[]; obs?: string | number[]; dt?: number; tick_hz?: number },
  ): Promise<string> {
    const resp = await this.fetchImpl(this.url("/api/rollouts"), {
      method: "POST",
      headers: { "content-type": "application/json" },
      body: JSON.stringify({ model_id: modelId, ...opts }),
    });
    const out = await expect<{ rollout_id: string }>(resp, "rollout start");
    return out.rollout_id;
  }

  streamRollout(rolloutId: string): AsyncGenerator<SSEEvent> {
    return sseStream(this.url(`/api/rollouts/${rolloutId}/stream`), this.fetchImpl);
  }

  async perturb(rolloutId: string, delta: number[]): Promise<void> {
    await expect(
      await this.fetchImpl(this.url(`/api/rollouts/${rolloutId}/perturb`), {
        method: "POST",
        headers: { "content-type": "application/json" },
        body: JSON.stringify({ delta }),
      }),
      "perturb",
    );
  }

  async switchObs(rolloutId: string, spec: string | number[]): Promise<void> {
    const body = typeof spec === "string" ? { spec } : { payload: spec };
    await expect(
      await this.fetchImpl(this.url(`/api/rollouts/${rolloutId}/obs`), {
        method: "POST",
        headers: { "content-type": "application/json" },
        body: JSON.stringify(body),
      }),
      "observation switch",
    );
  }
}
