"""Synthetic FFNs and token streams for tests and the bundled fixture.

``clustered_ffn`` builds an FFN with planted structure: a block of neurons
tuned to a direction every token shares, and ``n_groups`` blocks each tuned
to one topic direction. Tokens from ``clustered_tokens`` mix the shared
direction with one topic, so each token strongly drives the shared block
and exactly one group.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .profiler import DenseFfn


def random_ffn(rng: np.random.Generator, d: int, d_h: int, scale: float = 1.0) -> DenseFfn:
    return DenseFfn(
        w_up=(rng.standard_normal((d, d_h)) * scale / np.sqrt(d)).astype(np.float32),
        w_gate=(rng.standard_normal((d, d_h)) * scale / np.sqrt(d)).astype(np.float32),
        w_down=(rng.standard_normal((d_h, d)) * scale / np.sqrt(d_h)).astype(np.float32),
    )


def random_tokens(rng: np.random.Generator, q: int, d: int) -> np.ndarray:
    return rng.standard_normal((q, d)).astype(np.float32)


@dataclass(frozen=True)
class PlantedFfn:
    ffn: DenseFfn
    common: np.ndarray      # d
    topics: np.ndarray      # n_groups x d
    groups: list[np.ndarray]
    shared: np.ndarray


def clustered_ffn(rng: np.random.Generator, d: int, n_shared_neurons: int, n_groups: int,
                  group_size: int, noise: float = 0.15) -> PlantedFfn:
    if d < n_groups + 1:
        raise ValueError("need d > n_groups for orthogonal topic directions")
    d_h = n_shared_neurons + n_groups * group_size
    basis, _ = np.linalg.qr(rng.standard_normal((d, n_groups + 1)))
    common, topics = basis[:, 0], basis[:, 1:].T

    perm = rng.permutation(d_h)  # scatter the planted blocks over neuron indices
    shared = np.sort(perm[:n_shared_neurons])
    groups = [np.sort(perm[n_shared_neurons + g * group_size: n_shared_neurons + (g + 1) * group_size])
              for g in range(n_groups)]

    w_gate = noise * rng.standard_normal((d, d_h)) / np.sqrt(d)
    w_up = noise * rng.standard_normal((d, d_h)) / np.sqrt(d)
    for cols, direction in [(shared, common)] + list(zip(groups, topics)):
        gain = rng.uniform(0.8, 1.2, size=cols.size)
        w_gate[:, cols] += np.outer(direction, gain)
        w_up[:, cols] += np.outer(direction, gain)
    w_down = rng.standard_normal((d_h, d)) / np.sqrt(d_h)
    ffn = DenseFfn(w_up=w_up.astype(np.float32), w_gate=w_gate.astype(np.float32),
                   w_down=w_down.astype(np.float32))
    return PlantedFfn(ffn=ffn, common=common, topics=topics, groups=groups, shared=shared)


def clustered_tokens(rng: np.random.Generator, planted: PlantedFfn, q: int, strength: float = 3.0,
                     noise: float = 0.3) -> tuple[np.ndarray, np.ndarray]:
    """Tokens and their topic labels."""
    n_groups, d = planted.topics.shape
    labels = rng.integers(0, n_groups, size=q)
    x = (strength * planted.common[None, :]
         + strength * planted.topics[labels]
         + noise * rng.standard_normal((q, d)))
    return x.astype(np.float32), labels


FIXTURE = {"d": 64, "n_shared_neurons": 32, "n_groups": 7, "group_size": 32, "batch": 8, "seq": 128}


def write_fixture(directory, seed: int = 0) -> dict[str, Path]:
    """Write the bundled fixture: dense weights, an 8 x 128 calibration
    batch and a held-out token set."""
    from .artifacts import save_dense_ffn
    from .tensorfile import save_tensors

    directory = Path(directory)
    rng = np.random.default_rng(seed)
    f = FIXTURE
    planted = clustered_ffn(rng, f["d"], f["n_shared_neurons"], f["n_groups"], f["group_size"])
    calib, _ = clustered_tokens(rng, planted, f["batch"] * f["seq"])
    heldout, _ = clustered_tokens(rng, planted, 512)
    paths = {
        "weights": directory / "dense_ffn.safetensors",
        "calib": directory / "calib.safetensors",
        "heldout": directory / "heldout.safetensors",
    }
    save_dense_ffn(planted.ffn, paths["weights"])
    save_tensors({"x": calib.reshape(f["batch"], f["seq"], f["d"])}, paths["calib"])
    save_tensors({"x": heldout}, paths["heldout"])
    return paths


if __name__ == "__main__":
    import sys

    for k, v in write_fixture(sys.argv[1] if len(sys.argv) > 1 else "fixtures").items():
        print(f"{k}: {v}")
