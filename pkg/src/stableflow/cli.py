"""Command-line interface.

Machine-readable JSON goes to stdout (one object per invocation); human
logs and progress go to stderr so the commands compose in pipelines.

Exit codes:
    0  success
    2  validation / usage error (bad flags, malformed files, bad shapes)
    3  training diverged (non-finite loss)
    4  rollout diverged (non-finite state)
    5  stability certificate verdict is false

Observation specs: ``static:onehot:K``, ``static:zeros``,
``static:vec:V1,V2,...``, ``static:image:PATH`` (.npy or grayscale image),
``static:glyph:sine|line|curve``, and ``switch:T:<payload>`` for timed
switches (the rollout starts from the single ``static:`` entry).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from . import __version__
from .core import verify_certificate
from .data import load_dataset
from .errors import (ParseError, RolloutDivergedError, StableflowError,
                     TrainingDivergedError, ValidationError)
from .evaluation import eval_table, multitask_eval
from .obsspec import build_provider, parse_float_list
from .rollout import (PerturbationEvent, convergence_stats, integrate,
                      vector_field_grid)
from .state import StateVector
from .training import (TrainConfig, load_checkpoint, save_checkpoint, train)

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_TRAIN_DIVERGED = 3
EXIT_ROLLOUT_DIVERGED = 4
EXIT_CERTIFICATE_FALSE = 5

logger = logging.getLogger("stableflow")

_LOG_LEVELS = {"debug": logging.DEBUG, "info": logging.INFO, "warn": logging.WARNING}


def _setup_logging():
    level = _LOG_LEVELS.get(os.environ.get("STABLEFLOW_LOG", "info").lower(),
                            logging.INFO)
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter("%(levelname)s %(message)s"))
    logger.handlers[:] = [handler]
    logger.setLevel(level)


def _emit(obj: dict):
    print(json.dumps(obj))


def cmd_train(args) -> int:
    config = TrainConfig(
        n_systems=args.systems, epochs=args.epochs, learning_rate=args.lr,
        batch_size=args.batch, seed=args.seed, net=args.net, eps=args.eps)
    dataset = load_dataset(args.data)
    logger.info("training on %d samples (d_c=%d, obs=%s)",
                len(dataset.samples), dataset.d_c, dataset.obs_kind)

    def progress(epoch, loss, _params):
        logger.info("epoch %d loss %.6g", epoch, loss)

    ckpt = train(dataset, config, progress=progress)
    save_checkpoint(ckpt, args.out)
    cert = verify_certificate(ckpt.params)
    _emit({
        "checkpoint": str(args.out),
        "final_loss": ckpt.final_loss,
        "epochs": ckpt.epochs_run,
        "certificate_verdict": cert.verdict,
        "dataset_fingerprint": ckpt.dataset_fingerprint,
    })
    return EXIT_OK


def cmd_rollout(args) -> int:
    ckpt = load_checkpoint(args.ckpt)
    params = ckpt.params
    x0 = parse_float_list(args.x0, "--x0")
    provider = build_provider(args.obs, params.weight_net)
    perturbations = []
    for spec in args.perturb:
        try:
            t_str, delta_str = spec.split(":", 1)
        except ValueError as exc:
            raise ValidationError(f"--perturb expects T:DX,DY,... got {spec!r}") from exc
        perturbations.append(PerturbationEvent(float(t_str),
                                               parse_float_list(delta_str, "--perturb")))
    state0 = StateVector(x0, provider.payload_at(0.0))
    record = integrate(
        params, state0, provider=provider, perturbations=perturbations,
        dt=args.dt, horizon=args.horizon, method=args.method, clamp=args.clamp,
        stop_on_convergence=not args.no_early_stop)
    Path(args.out).write_text(record.to_csv(), encoding="utf-8")
    if args.json_out:
        Path(args.json_out).write_text(record.to_json(), encoding="utf-8")
    stats = convergence_stats(record)
    logger.info("rollout: %d steps, %d events", record.steps, len(record.events))
    _emit({
        "out": str(args.out),
        "steps": record.steps,
        "events": [e.to_dict() for e in record.events],
        **stats,
    })
    return EXIT_OK


def cmd_verify(args) -> int:
    ckpt = load_checkpoint(args.ckpt)
    cert = verify_certificate(ckpt.params)
    _emit(cert.to_dict())
    return EXIT_OK if cert.verdict else EXIT_CERTIFICATE_FALSE


def cmd_eval(args) -> int:
    ckpt = load_checkpoint(args.ckpt)
    dataset = load_dataset(args.data)
    reports = multitask_eval(ckpt.params, dataset, horizon_factor=args.horizon_factor)
    print(eval_table(reports), file=sys.stderr)
    _emit({"reports": [r.to_dict() for r in reports]})
    return EXIT_OK


def cmd_field(args) -> int:
    ckpt = load_checkpoint(args.ckpt)
    params = ckpt.params
    provider = build_provider(args.obs, params.weight_net)
    lo = parse_float_list(args.lo, "--lo")
    hi = parse_float_list(args.hi, "--hi")
    if lo.shape != (2,) or hi.shape != (2,):
        raise ValidationError("--lo/--hi must each have two components")
    grid = vector_field_grid(params, provider.payload_at(0.0),
                             ((lo[0], hi[0]), (lo[1], hi[1])), args.res)
    Path(args.out).write_text(grid.to_csv(), encoding="utf-8")
    _emit({"out": str(args.out), "resolution": list(grid.resolution),
           "attractor": grid.attractor.tolist()})
    return EXIT_OK


def cmd_serve(args) -> int:
    from .service import run_server
    run_server(args.bind, args.store, max_concurrent_jobs=args.max_jobs)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="stableflow",
        description="Train, verify, and roll out provably convergent mixture policies.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="fit a policy to demonstrations")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--systems", type=int, default=5)
    p.add_argument("--epochs", type=int, default=1000)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--batch", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--net", default="mlp:32,32")
    p.add_argument("--eps", type=float, default=1e-6)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("rollout", help="integrate the closed loop from a start state")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--x0", required=True)
    p.add_argument("--obs", action="append", default=[])
    p.add_argument("--perturb", action="append", default=[])
    p.add_argument("--dt", type=float, default=0.01)
    p.add_argument("--horizon", type=float, default=10.0)
    p.add_argument("--method", choices=("euler", "rk4"), default="rk4")
    p.add_argument("--clamp", type=float, default=None)
    p.add_argument("--no-early-stop", action="store_true")
    p.add_argument("--out", required=True)
    p.add_argument("--json-out", default=None)
    p.set_defaults(func=cmd_rollout)

    p = sub.add_parser("verify", help="print the stability certificate")
    p.add_argument("--ckpt", required=True)
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("eval", help="reproduction error against a dataset")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--horizon-factor", type=float, default=3.0)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("field", help="export the velocity field on a grid (d_c=2)")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--obs", action="append", default=[])
    p.add_argument("--lo", required=True)
    p.add_argument("--hi", required=True)
    p.add_argument("--res", type=int, default=25)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_field)

    p = sub.add_parser("serve", help="run the HTTP service")
    p.add_argument("--bind", default="127.0.0.1:8080")
    p.add_argument("--store", default="./stableflow-store")
    p.add_argument("--max-jobs", type=int, default=2)
    p.set_defaults(func=cmd_serve)
    return parser


def main(argv=None) -> int:
    _setup_logging()
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except TrainingDivergedError as exc:
        logger.error("training diverged: %s", exc)
        return EXIT_TRAIN_DIVERGED
    except RolloutDivergedError as exc:
        logger.error("rollout diverged: %s", exc)
        return EXIT_ROLLOUT_DIVERGED
    except (ValidationError, ParseError) as exc:
        logger.error("%s", exc)
        return EXIT_VALIDATION
    except StableflowError as exc:
        logger.error("%s", exc)
        return EXIT_VALIDATION
    except (ValueError, OSError) as exc:
        logger.error("%s", exc)
        return EXIT_VALIDATION


def entry():
    sys.exit(main())


if __name__ == "__main__":
    entry()
