"""Command-line pipeline: profile -> carve -> eval, plus a load-balancing simulation."""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np
from pydantic import ValidationError

from . import artifacts
from .carve import carve
from .config import RunConfig, load_run_config
from .moe_runtime import (
    EvalCounter,
    LoadStats,
    dense_forward,
    flop_report,
    load_ratio,
    moe_forward,
    route_batch,
    routing_fidelity,
    simulate_balance,
)
from .profiler import build_profile, rate_histogram
from .tensorfile import TensorFileError, atomic_write

log = logging.getLogger("moecarve")

PROFILE_KEYS = {"command", "q", "k_a", "d_h", "normalize", "out", "histogram"}
CARVE_KEYS = {"command", "weights_out", "manifest", "n_shared_neurons", "expert_size", "kmeans_iterations",
              "kmeans_converged", "objective"}
EVAL_KEYS = {"command", "mode", "tokens", "n_active", "n_routed", "relative_l2_error", "max_relative_l2_error",
             "fidelity", "load", "flops"}
BALANCE_KEYS = {"command", "mode", "steps", "gamma", "ratios", "counts", "initial_ratio", "final_ratio", "final_bias"}


def _finite(v: float):
    return v if math.isfinite(v) else None


def _profile(cfg: RunConfig, ffn):
    if cfg.profile and not cfg.calib:
        return artifacts.load_profile(cfg.profile)
    cfg.require("calib")
    return build_profile(artifacts.load_tokens(cfg.calib), ffn, cfg.k_a, cfg.normalize)


def cmd_profile(cfg: RunConfig) -> dict:
    cfg.require("weights", "calib")
    ffn = artifacts.load_dense_ffn(cfg.weights)
    prof = build_profile(artifacts.load_tokens(cfg.calib), ffn, cfg.k_a, cfg.normalize)
    if cfg.out:
        artifacts.save_profile(prof, cfg.out)
    return {
        "command": "profile",
        "q": prof.q,
        "k_a": prof.k_a,
        "d_h": prof.d_h,
        "normalize": cfg.normalize,
        "out": cfg.out,
        "histogram": rate_histogram(prof.rates, cfg.histogram_bins),
    }


def cmd_carve(cfg: RunConfig) -> dict:
    cfg.require("weights", "out")
    ffn = artifacts.load_dense_ffn(cfg.weights)
    result = carve(ffn, _profile(cfg, ffn), cfg.moe_config())
    manifest = artifacts.save_moe(result, cfg.out)
    if not result.kmeans.converged:
        log.warning("balanced k-means hit the iteration cap (%d)", result.kmeans.iterations)
    return {
        "command": "carve",
        "weights_out": cfg.out,
        "manifest": str(manifest),
        "n_shared_neurons": int(result.partition.shared.size),
        "expert_size": result.config.expert_size,
        "kmeans_iterations": result.kmeans.iterations,
        "kmeans_converged": result.kmeans.converged,
        "objective": result.kmeans.objective_log,
    }


def _load_or_carve(cfg: RunConfig, ffn):
    if cfg.moe:
        moe, _ = artifacts.load_moe(cfg.moe)
        return moe
    return carve(ffn, _profile(cfg, ffn), cfg.moe_config()).moe


def cmd_eval(cfg: RunConfig) -> dict:
    cfg.require("weights", "moe", "calib")
    ffn = artifacts.load_dense_ffn(cfg.weights)
    moe, _ = artifacts.load_moe(cfg.moe)
    x = artifacts.load_tokens(cfg.calib)
    q = x.shape[0]

    routing = route_batch(moe, x, cfg.mode)
    counter = EvalCounter()
    y_moe = moe_forward(moe, x, cfg.mode, counter=counter, routing=routing).astype(np.float64)
    y = dense_forward(ffn, x).astype(np.float64)
    ref = np.linalg.norm(y, axis=1)
    err = np.linalg.norm(y_moe - y, axis=1)
    keep = ref > 0
    rel = err[keep] / ref[keep]

    stats = LoadStats.from_active(routing.active, moe.n_active)
    fid = routing_fidelity(moe, ffn, x, cfg.mode, seed=cfg.seed)
    return {
        "command": "eval",
        "mode": cfg.mode,
        "tokens": int(q),
        "n_active": moe.n_active,
        "n_routed": moe.n_routed,
        "relative_l2_error": float(rel.mean()) if rel.size else 0.0,
        "max_relative_l2_error": float(rel.max()) if rel.size else 0.0,
        "fidelity": fid.as_dict(),
        "load": {"counts": stats.counts.tolist(), "ratio": _finite(load_ratio(stats.counts))},
        "flops": flop_report(moe, counter, q),
    }


def cmd_balance_sim(cfg: RunConfig) -> dict:
    cfg.require("weights", "calib")
    ffn = artifacts.load_dense_ffn(cfg.weights)
    moe = _load_or_carve(cfg, ffn)
    x = artifacts.load_tokens(cfg.calib)
    trace = simulate_balance(moe, x, cfg.steps, cfg.gamma, cfg.mode)
    return {
        "command": "balance-sim",
        "mode": cfg.mode,
        "steps": cfg.steps,
        "gamma": cfg.gamma,
        "ratios": [_finite(r) for r in trace.ratios],
        "counts": trace.counts,
        "initial_ratio": _finite(trace.ratios[0]),
        "final_ratio": _finite(trace.ratios[-1]),
        "final_bias": [float(v) for v in trace.bias],
    }


COMMANDS = {"profile": cmd_profile, "carve": cmd_carve, "eval": cmd_eval, "balance-sim": cmd_balance_sim}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration")
    common.add_argument("--weights", help="dense FFN tensor file (w_up, w_gate, w_down)")
    common.add_argument("--calib", help="token tensor file (tensor 'x', q x d or b x s x d)")
    common.add_argument("--profile", help="profile artifact to reuse instead of --calib (carve)")
    common.add_argument("--moe", help="carved MoE tensor file; manifest is found next to it")
    common.add_argument("--out", help="output path")
    common.add_argument("--mode", choices=["binary", "scaled", "generic"])
    common.add_argument("--seed", type=int)
    common.add_argument("--steps", type=int)
    common.add_argument("--n-experts", type=int, dest="n_experts")
    common.add_argument("--n-shared", type=int, dest="n_shared")
    common.add_argument("--n-routed", type=int, dest="n_routed")
    common.add_argument("--n-active", type=int, dest="n_active")
    common.add_argument("--k-a", type=int, dest="k_a")
    common.add_argument("--gamma", type=float)
    common.add_argument("--max-kmeans-iters", type=int, dest="max_kmeans_iters")
    common.add_argument("--normalize", action=argparse.BooleanOptionalAction, default=None)

    parser = argparse.ArgumentParser(prog="moecarve", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("profile", parents=[common], help="profile neuron activations")
    sub.add_parser("carve", parents=[common], help="carve the dense FFN into experts")
    sub.add_parser("eval", parents=[common], help="compare a carved MoE against the dense FFN")
    sub.add_parser("balance-sim", parents=[common], help="simulate bias-based load balancing")
    return parser


def _fail(kind: str, message: str, code: int) -> int:
    sys.stderr.write(json.dumps({"error": kind, "message": message}) + "\n")
    return code


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    flags = {k: v for k, v in vars(args).items() if k not in ("command", "config")}
    try:
        cfg = load_run_config(args.config, flags)
        report = COMMANDS[args.command](cfg)
    except ValidationError as exc:
        return _fail("invalid_config", str(exc), 2)
    except TensorFileError as exc:
        return _fail(type(exc).__name__, str(exc), 3)
    except (OSError, json.JSONDecodeError) as exc:
        return _fail("file_error", str(exc), 3)
    except (ValueError, KeyError) as exc:
        return _fail("invalid_config", str(exc), 2)

    text = json.dumps(report, indent=2)
    if args.command in ("eval", "balance-sim") and cfg.out:
        atomic_write(Path(cfg.out), text + "\n")
    print(text)
    return 0


if __name__ == "__main__":
    sys.exit(main())
