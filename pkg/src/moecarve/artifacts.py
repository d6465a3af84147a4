"""Reading and writing dense FFNs, calibration batches, profiles and carved MoEs."""

from __future__ import annotations

import json
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .carve import CarveResult, ExpertWeights, MoeFfn, RouterWeights
from .profiler import ActivationProfile, DenseFfn, activation_rates
from .tensorfile import MalformedHeaderError, TensorFile, atomic_write, load_tensors, save_tensors

DENSE_KEYS = ("w_up", "w_gate", "w_down")
MANIFEST_VERSION = 1


def manifest_path_for(weights_path) -> Path:
    p = Path(weights_path)
    return p.with_name(p.name.removesuffix(".safetensors") + ".manifest.json")


def _require(tf: TensorFile, names, path) -> None:
    missing = [n for n in names if n not in tf.tensors]
    if missing:
        raise MalformedHeaderError(f"{path}: missing tensors {missing}")


def load_dense_ffn(path) -> DenseFfn:
    tf = load_tensors(path)
    _require(tf, DENSE_KEYS, path)
    return DenseFfn(w_up=tf["w_up"], w_gate=tf["w_gate"], w_down=tf["w_down"])


def save_dense_ffn(ffn: DenseFfn, path) -> None:
    save_tensors({"w_up": ffn.w_up, "w_gate": ffn.w_gate, "w_down": ffn.w_down}, path)


def load_tokens(path) -> np.ndarray:
    """Token embeddings from tensor ``x``; a b x s x d batch is flattened to (b*s) x d."""
    tf = load_tensors(path)
    _require(tf, ("x",), path)
    x = tf["x"]
    if x.ndim == 3:
        x = x.reshape(-1, x.shape[-1])
    if x.ndim != 2:
        raise MalformedHeaderError(f"{path}: tensor 'x' must be 2-D or 3-D, got shape {x.shape}")
    return x


def save_tokens(x: np.ndarray, path) -> None:
    save_tensors({"x": np.asarray(x, dtype=np.float32)}, path)


def save_profile(profile: ActivationProfile, path) -> None:
    save_tensors(
        {"markers": profile.markers.astype(np.float32), "rates": profile.rates.astype(np.float32)},
        path,
        metadata={"k_a": str(profile.k_a), "q": str(profile.q)},
    )


def load_profile(path) -> ActivationProfile:
    tf = load_tensors(path)
    _require(tf, ("markers",), path)
    markers = tf["markers"].astype(np.uint8)
    # rates are recomputed from the markers so they stay exact
    return ActivationProfile(markers=markers, rates=activation_rates(markers),
                             k_a=int(tf.metadata.get("k_a", 0)), q=markers.shape[0])


def moe_tensors(moe: MoeFfn) -> dict[str, np.ndarray]:
    out = {
        "shared.up": moe.shared.w_up,
        "shared.gate": moe.shared.w_gate,
        "shared.down": moe.shared.w_down,
        "router.up": moe.router.w_up,
        "router.gate": moe.router.w_gate,
        "u": moe.u.astype(np.float32),
        "b": moe.b.astype(np.float32),
    }
    for p, e in enumerate(moe.routed):
        out[f"expert{p}.up"] = e.w_up
        out[f"expert{p}.gate"] = e.w_gate
        out[f"expert{p}.down"] = e.w_down
    return out


def build_manifest(result: CarveResult) -> dict:
    part, km = result.partition, result.kmeans
    return {
        "version": MANIFEST_VERSION,
        "config": asdict(result.config),
        "n_active": int(result.moe.n_active),
        "shared": [int(i) for i in part.shared],
        "clusters": [[int(i) for i in c] for c in part.clusters],
        "representatives": [int(i) for i in part.representatives],
        "kmeans": {
            "iterations": int(km.iterations),
            "converged": bool(km.converged),
            "objective": [float(v) for v in km.objective_log],
        },
    }


def save_moe(result: CarveResult, weights_path, manifest_path=None) -> Path:
    manifest_path = Path(manifest_path) if manifest_path else manifest_path_for(weights_path)
    save_tensors(moe_tensors(result.moe), weights_path)
    atomic_write(manifest_path, json.dumps(build_manifest(result), indent=2, sort_keys=True) + "\n")
    return manifest_path


def load_moe(weights_path, manifest_path=None) -> tuple[MoeFfn, dict]:
    manifest_path = Path(manifest_path) if manifest_path else manifest_path_for(weights_path)
    manifest = json.loads(Path(manifest_path).read_text())
    tf = load_tensors(weights_path)
    n_routed = len(manifest["clusters"])
    names = ["shared.up", "shared.gate", "shared.down", "router.up", "router.gate", "u", "b"]
    names += [f"expert{p}.{k}" for p in range(n_routed) for k in ("up", "gate", "down")]
    _require(tf, names, weights_path)

    def idx(v):
        return np.asarray(v, dtype=np.int64)

    moe = MoeFfn(
        shared=ExpertWeights(tf["shared.up"], tf["shared.gate"], tf["shared.down"], idx(manifest["shared"])),
        routed=[
            ExpertWeights(tf[f"expert{p}.up"], tf[f"expert{p}.gate"], tf[f"expert{p}.down"],
                          idx(manifest["clusters"][p]))
            for p in range(n_routed)
        ],
        router=RouterWeights(tf["router.gate"], tf["router.up"], idx(manifest["representatives"])),
        u=tf["u"].reshape(-1),
        b=tf["b"].reshape(-1),
        n_active=int(manifest["n_active"]),
    )
    return moe, manifest
