"""HTTP facade: dataset upload, training jobs, field queries, live rollouts.

Datasets and trained models persist as JSON files in a flat directory
store; jobs and live rollouts are in-memory and lost on restart. Training
runs on a small worker pool so request handling never blocks on it. Live
rollouts are each owned by one asyncio ticker task; perturbation and
observation commands go through a per-rollout queue and take effect on the
next tick, echoed back on the event stream.
"""

from __future__ import annotations

import asyncio
import hashlib
import json
import secrets
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from fastapi import FastAPI, Request
from fastapi.middleware.cors import CORSMiddleware
from fastapi.responses import JSONResponse, StreamingResponse

from .core import MaterializedPolicy, verify_certificate
from .data import Dataset, trajectories_from_json
from .errors import ParseError, StableflowError, ValidationError
from .obsspec import build_provider, parse_payload_spec
from .rollout import (CONVERGENCE_TOL, CONVERGENCE_WINDOW, ObservationProvider,
                      vector_field_grid)
from .state import validate_payload
from .training import (Checkpoint, TrainConfig, checkpoint_from_json,
                       checkpoint_to_json, train)

MAX_UPLOAD_BYTES = 32 * 1024 * 1024
MAX_LIVE_TICKS = 200_000


class DirectoryStore:
    """Flat directory of JSON objects addressed by salted content hash.

    Every upload gets a fresh id (no deduplication); the unsalted content
    hash is kept in the sidecar metadata for provenance.
    """

    def __init__(self, root: Path, kind: str):
        self.root = Path(root) / kind
        self.root.mkdir(parents=True, exist_ok=True)
        self.kind = kind

    def put(self, content: bytes, meta: dict | None = None) -> str:
        salt = secrets.token_hex(8)
        digest = hashlib.sha256(content + salt.encode()).hexdigest()[:16]
        obj_id = f"{self.kind[:2]}-{digest}"
        (self.root / f"{obj_id}.json").write_bytes(content)
        sidecar = {"content_sha256": hashlib.sha256(content).hexdigest()}
        if meta:
            sidecar.update(meta)
        (self.root / f"{obj_id}.meta.json").write_text(json.dumps(sidecar))
        return obj_id

    def path(self, obj_id: str) -> Path:
        return self.root / f"{obj_id}.json"

    def get(self, obj_id: str) -> bytes | None:
        p = self.path(obj_id)
        return p.read_bytes() if p.exists() else None

    def ids(self) -> list[str]:
        return sorted(p.stem for p in self.root.glob("*.json")
                      if not p.name.endswith(".meta.json"))


@dataclass
class JobRecord:
    id: str
    state: str = "queued"          # queued -> running -> done | failed
    epoch: int = -1
    loss: float | None = None
    model_id: str | None = None
    error: str | None = None

    def to_dict(self) -> dict:
        return {"id": self.id, "state": self.state,
                "progress": {"epoch": self.epoch, "loss": self.loss},
                "model_id": self.model_id, "error": self.error}


@dataclass
class LiveRollout:
    id: str
    policy: MaterializedPolicy
    provider: ObservationProvider
    x: np.ndarray
    dt: float
    tick_hz: float
    t: float = 0.0
    ticks: int = 0
    closed: bool = False
    in_tol_run: int = 0
    run_start: float | None = None
    commands: list = field(default_factory=list)
    events: list = field(default_factory=list)
    wakeup: asyncio.Event = field(default_factory=asyncio.Event)

    def emit(self, name: str, data: dict):
        self.events.append((name, data))
        self.wakeup.set()
        self.wakeup = asyncio.Event()


def _json_error(status: int, message: str, **extra) -> JSONResponse:
    return JSONResponse({"error": message, **extra}, status_code=status)


def create_app(store_dir, max_concurrent_jobs: int = 2) -> FastAPI:
    app = FastAPI(title="stableflow service")
    app.add_middleware(
        CORSMiddleware, allow_origins=["*"], allow_methods=["*"],
        allow_headers=["*"])

    datasets = DirectoryStore(Path(store_dir), "datasets")
    models = DirectoryStore(Path(store_dir), "models")
    jobs: dict[str, JobRecord] = {}
    rollouts: dict[str, LiveRollout] = {}
    jobs_lock = threading.Lock()
    executor = ThreadPoolExecutor(max_workers=max_concurrent_jobs)
    app.state.datasets = datasets
    app.state.models = models

    def _load_model(model_id: str) -> Checkpoint | None:
        raw = models.get(model_id)
        if raw is None:
            return None
        return checkpoint_from_json(json.loads(raw))

    # ------------------------------------------------------------------ data

    @app.post("/api/datasets", status_code=201)
    async def upload_dataset(request: Request):
        declared = request.headers.get("content-length")
        if declared and int(declared) > MAX_UPLOAD_BYTES:
            return _json_error(413, "payload exceeds the 32 MiB upload limit")
        body = await request.body()
        if len(body) > MAX_UPLOAD_BYTES:
            return _json_error(413, "payload exceeds the 32 MiB upload limit")
        try:
            doc = json.loads(body)
            trajs = trajectories_from_json(doc)
            Dataset.from_trajectories(trajs)
        except json.JSONDecodeError as exc:
            return _json_error(400, f"invalid JSON: {exc.msg}")
        except ParseError as exc:
            return _json_error(400, str(exc), field=exc.field)
        except ValidationError as exc:
            return _json_error(400, str(exc))
        dataset_id = datasets.put(body, {"trajectories": len(trajs)})
        return {"dataset_id": dataset_id}

    # ----------------------------------------------------------------- train

    def _run_job(job_id: str, dataset: Dataset, config: TrainConfig):
        with jobs_lock:
            jobs[job_id].state = "running"

        def progress(epoch, loss, _params):
            with jobs_lock:
                jobs[job_id].epoch = epoch
                jobs[job_id].loss = loss

        try:
            ckpt = train(dataset, config, progress=progress)
            blob = json.dumps(checkpoint_to_json(ckpt)).encode()
            model_id = models.put(blob, {"final_loss": ckpt.final_loss})
            with jobs_lock:
                jobs[job_id].state = "done"
                jobs[job_id].model_id = model_id
                jobs[job_id].loss = ckpt.final_loss
        except Exception as exc:  # job must record any failure
            with jobs_lock:
                jobs[job_id].state = "failed"
                jobs[job_id].error = str(exc)

    @app.post("/api/train")
    async def start_train(request: Request):
        body = await request.json()
        dataset_id = body.get("dataset_id")
        raw = datasets.get(dataset_id) if dataset_id else None
        if raw is None:
            return _json_error(404, f"unknown dataset {dataset_id!r}")
        try:
            config = TrainConfig(**{**TrainConfig().to_dict(), **body.get("config", {})})
            dataset = Dataset.from_trajectories(trajectories_from_json(json.loads(raw)))
        except (TypeError, StableflowError) as exc:
            return _json_error(422, f"invalid config: {exc}")
        job_id = f"job-{secrets.token_hex(8)}"
        with jobs_lock:
            jobs[job_id] = JobRecord(job_id)
        executor.submit(_run_job, job_id, dataset, config)
        return {"job_id": job_id}

    @app.get("/api/jobs/{job_id}")
    async def get_job(job_id: str):
        with jobs_lock:
            job = jobs.get(job_id)
            if job is None:
                return _json_error(404, f"unknown job {job_id!r}")
            return job.to_dict()

    # ----------------------------------------------------------------- field

    @app.get("/api/models/{model_id}")
    async def get_model(model_id: str):
        ckpt = _load_model(model_id)
        if ckpt is None:
            return _json_error(404, f"unknown model {model_id!r}")
        net = ckpt.params.weight_net
        return {
            "model_id": model_id,
            "d_c": ckpt.params.d_c,
            "n_systems": ckpt.params.n_systems,
            "obs_kind": ckpt.params.obs_kind,
            "d_nc": net.d_nc,
            "image_shape": (list(net.front_end.image_shape)
                            if net.front_end else None),
            "attractor": ckpt.params.attractor.tolist(),
            "final_loss": ckpt.final_loss,
            "loss_history": list(ckpt.loss_history),
            "certificate": verify_certificate(ckpt.params).to_dict(),
        }

    @app.get("/api/models/{model_id}/field")
    async def get_field(model_id: str, obs: str = "", lo: str = "-1,-1",
                        hi: str = "1,1", res: int = 25):
        ckpt = _load_model(model_id)
        if ckpt is None:
            return _json_error(404, f"unknown model {model_id!r}")
        try:
            net = ckpt.params.weight_net
            payload = (parse_payload_spec(obs, net) if obs
                       else build_provider([], net).payload_at(0.0))
            lo_v = [float(v) for v in lo.split(",")]
            hi_v = [float(v) for v in hi.split(",")]
            grid = vector_field_grid(ckpt.params, payload,
                                     ((lo_v[0], hi_v[0]), (lo_v[1], hi_v[1])), res)
        except (StableflowError, ValueError, IndexError) as exc:
            return _json_error(422, str(exc))
        return grid.to_dict()

    # --------------------------------------------------------------- rollout

    async def _tick_loop(lr: LiveRollout):
        period = 1.0 / lr.tick_hz
        pol = lr.policy
        attractor = pol.attractor
        while not lr.closed:
            await asyncio.sleep(period)
            for kind, value in lr.commands:
                if kind == "perturb":
                    lr.x = lr.x + value
                    lr.emit("perturb", {"t": lr.t, "delta": value.tolist()})
                else:
                    lr.provider = ObservationProvider.static(value)
                    lr.emit("obs", {"t": lr.t})
            lr.commands.clear()

            payload = lr.provider.payload_at(lr.t)

            def f(y):
                return pol.velocity(y, payload)

            k1 = f(lr.x)
            k2 = f(lr.x + 0.5 * lr.dt * k1)
            k3 = f(lr.x + 0.5 * lr.dt * k2)
            k4 = f(lr.x + lr.dt * k3)
            lr.x = lr.x + (lr.dt / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
            lr.t += lr.dt
            lr.ticks += 1
            err = float(np.linalg.norm(attractor - lr.x))
            v = f(lr.x)
            lr.emit("step", {"t": lr.t, "xc": lr.x.tolist(), "v": v.tolist(),
                             "V": err * err})
            if err < CONVERGENCE_TOL:
                if lr.in_tol_run == 0:
                    lr.run_start = lr.t
                lr.in_tol_run += 1
            else:
                lr.in_tol_run = 0
                lr.run_start = None
            if lr.in_tol_run >= CONVERGENCE_WINDOW:
                lr.closed = True
                lr.emit("converged", {"t": lr.t, "convergence_time": lr.run_start})
            elif lr.ticks >= MAX_LIVE_TICKS or not np.all(np.isfinite(lr.x)):
                lr.closed = True
                lr.emit("closed", {"t": lr.t, "reason": "tick limit or divergence"})

    @app.post("/api/rollouts")
    async def start_rollout(request: Request):
        body = await request.json()
        ckpt = _load_model(body.get("model_id", ""))
        if ckpt is None:
            return _json_error(404, f"unknown model {body.get('model_id')!r}")
        try:
            net = ckpt.params.weight_net
            x0 = np.asarray(body["x0"], dtype=float)
            if x0.shape != (ckpt.params.d_c,):
                raise ValidationError(f"x0 must have length {ckpt.params.d_c}")
            obs = body.get("obs")
            if isinstance(obs, str):
                if obs.startswith(("static:", "switch:")):
                    provider = build_provider([obs], net)
                else:
                    provider = ObservationProvider.static(parse_payload_spec(obs, net))
            elif isinstance(obs, list) and obs and isinstance(obs[0], str):
                provider = build_provider(obs, net)
            elif obs is not None:
                payload = validate_payload(
                    np.asarray(obs, dtype=float), obs_kind=net.obs_kind,
                    d_nc=net.d_nc if net.front_end is None else None,
                    image_shape=net.front_end.image_shape if net.front_end else None)
                provider = ObservationProvider.static(payload)
            else:
                provider = build_provider([], net)
            dt = float(body.get("dt", 0.01))
            tick_hz = float(body.get("tick_hz", 60.0))
            if not (dt > 0) or not (0 < tick_hz <= 1000):
                raise ValidationError("dt must be > 0 and tick_hz in (0, 1000]")
        except (StableflowError, KeyError, TypeError, ValueError) as exc:
            return _json_error(422, str(exc))
        rollout_id = f"ro-{secrets.token_hex(8)}"
        lr = LiveRollout(rollout_id, MaterializedPolicy(ckpt.params), provider,
                         np.array(x0, dtype=float), dt, tick_hz)
        lr.emit("step", {"t": 0.0, "xc": lr.x.tolist(),
                         "v": lr.policy.velocity(lr.x, provider.payload_at(0.0)).tolist(),
                         "V": float(np.linalg.norm(lr.policy.attractor - lr.x)) ** 2})
        rollouts[rollout_id] = lr
        asyncio.create_task(_tick_loop(lr))
        return {"rollout_id": rollout_id}

    @app.get("/api/rollouts/{rollout_id}/stream")
    async def stream_rollout(rollout_id: str):
        lr = rollouts.get(rollout_id)
        if lr is None:
            return _json_error(404, f"unknown rollout {rollout_id!r}")

        async def gen():
            sent = 0
            while True:
                while sent < len(lr.events):
                    name, data = lr.events[sent]
                    sent += 1
                    yield f"event: {name}\ndata: {json.dumps(data)}\n\n"
                if lr.closed and sent >= len(lr.events):
                    return
                waiter = lr.wakeup
                try:
                    await asyncio.wait_for(waiter.wait(), timeout=1.0)
                except asyncio.TimeoutError:
                    pass

        return StreamingResponse(gen(), media_type="text/event-stream")

    @app.post("/api/rollouts/{rollout_id}/perturb", status_code=202)
    async def perturb_rollout(rollout_id: str, request: Request):
        lr = rollouts.get(rollout_id)
        if lr is None:
            return _json_error(404, f"unknown rollout {rollout_id!r}")
        if lr.closed:
            return _json_error(409, "rollout already converged and closed")
        body = await request.json()
        try:
            delta = np.asarray(body["delta"], dtype=float)
            if delta.shape != lr.x.shape or not np.all(np.isfinite(delta)):
                raise ValidationError("delta must be a finite vector of length d_c")
        except (KeyError, TypeError, ValueError, ValidationError) as exc:
            return _json_error(422, str(exc))
        lr.commands.append(("perturb", delta))
        return {"queued": True}

    @app.post("/api/rollouts/{rollout_id}/obs", status_code=202)
    async def switch_obs(rollout_id: str, request: Request):
        lr = rollouts.get(rollout_id)
        if lr is None:
            return _json_error(404, f"unknown rollout {rollout_id!r}")
        if lr.closed:
            return _json_error(409, "rollout already converged and closed")
        body = await request.json()
        net = lr.policy.net
        try:
            if "spec" in body:
                payload = parse_payload_spec(body["spec"], net)
            else:
                payload = np.asarray(body["payload"], dtype=float)
            payload = validate_payload(
                payload, obs_kind=net.obs_kind,
                d_nc=net.d_nc if net.front_end is None else None,
                image_shape=net.front_end.image_shape if net.front_end else None)
        except (StableflowError, KeyError, TypeError, ValueError) as exc:
            return _json_error(422, str(exc))
        lr.commands.append(("obs", payload))
        return {"queued": True}

    @app.get("/api/health")
    async def health():
        return {"ok": True, "datasets": len(datasets.ids()), "models": len(models.ids())}

    return app


def run_server(bind: str, store_dir, max_concurrent_jobs: int = 2):
    """Blocking entry point used by the CLI ``serve`` subcommand.

    Binds the socket first and announces the resolved address on stdout as
    one JSON line (important with port 0), then hands it to uvicorn.
    """
    import socket

    import uvicorn

    host, _, port = bind.partition(":")
    sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
    sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
    sock.bind((host or "127.0.0.1", int(port or 8080)))
    # listen before announcing so early clients queue instead of
    # being refused while uvicorn finishes starting up
    sock.listen(128)
    addr = sock.getsockname()
    print(json.dumps({"serving": f"{addr[0]}:{addr[1]}"}), flush=True)

    app = create_app(store_dir, max_concurrent_jobs=max_concurrent_jobs)
    config = uvicorn.Config(app, log_level="warning")
    uvicorn.Server(config).run(sockets=[sock])
