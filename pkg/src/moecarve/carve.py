"""Carve a dense FFN into shared/routed expert blocks plus an analytical router."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .grouping import KMeansResult, MoeConfig, Partition, group_neurons
from .profiler import ActivationProfile, DenseFfn
from .tensor_core import column_select, matmul, row_select, swiglu


@dataclass(frozen=True)
class ExpertWeights:
    w_up: np.ndarray     # d x k
    w_gate: np.ndarray   # d x k
    w_down: np.ndarray   # k x d
    source_indices: np.ndarray

    @property
    def width(self) -> int:
        return self.w_up.shape[1]

    def hidden(self, x: np.ndarray) -> np.ndarray:
        return swiglu(x, self.w_gate, self.w_up)

    def __call__(self, x: np.ndarray) -> np.ndarray:
        """Expert output for a q x d batch."""
        return matmul(self.hidden(x), self.w_down)


@dataclass(frozen=True)
class RouterWeights:
    w_gate: np.ndarray  # d x n_routed
    w_up: np.ndarray    # d x n_routed
    source_indices: np.ndarray

    def affinity(self, x: np.ndarray) -> np.ndarray:
        return swiglu(x, self.w_gate, self.w_up)


@dataclass
class MoeFfn:
    shared: ExpertWeights
    routed: list[ExpertWeights]
    router: RouterWeights
    u: np.ndarray
    b: np.ndarray
    n_active: int

    @property
    def n_routed(self) -> int:
        return len(self.routed)

    @property
    def d(self) -> int:
        return self.router.w_gate.shape[0]


@dataclass
class CarveResult:
    moe: MoeFfn
    partition: Partition
    kmeans: KMeansResult
    config: MoeConfig = field(repr=False)


def slice_expert(ffn: DenseFfn, indices) -> ExpertWeights:
    idx = np.asarray(indices, dtype=np.int64).reshape(-1)
    return ExpertWeights(
        w_up=column_select(ffn.w_up, idx),
        w_gate=column_select(ffn.w_gate, idx),
        w_down=row_select(ffn.w_down, idx),
        source_indices=idx.copy(),
    )


def build_router(ffn: DenseFfn, representatives) -> RouterWeights:
    """Router made of the representative neurons' gate/up columns.

    Its affinity for expert j is exactly the dense hidden value of neuron
    ``representatives[j]``; the neurons stay inside their experts as well.
    """
    idx = np.asarray(representatives, dtype=np.int64).reshape(-1)
    return RouterWeights(
        w_gate=column_select(ffn.w_gate, idx),
        w_up=column_select(ffn.w_up, idx),
        source_indices=idx.copy(),
    )


def assemble_moe(ffn: DenseFfn, partition: Partition, n_active: int) -> MoeFfn:
    n_routed = len(partition.clusters)
    return MoeFfn(
        shared=slice_expert(ffn, np.sort(partition.shared)),
        routed=[slice_expert(ffn, np.sort(c)) for c in partition.clusters],
        router=build_router(ffn, partition.representatives),
        u=np.zeros(n_routed, dtype=np.float32),
        b=np.zeros(n_routed, dtype=np.float32),
        n_active=n_active,
    )


def carve(ffn: DenseFfn, profile: ActivationProfile, config: MoeConfig) -> CarveResult:
    if profile.d_h != ffn.d_h:
        raise ValueError(f"profile covers {profile.d_h} neurons but the FFN has {ffn.d_h}")
    config = config.with_hidden_size(ffn.d_h)
    partition, km = group_neurons(profile, config)
    partition.check(ffn.d_h, config.expert_size)
    return CarveResult(moe=assemble_moe(ffn, partition, config.n_active), partition=partition, kmeans=km, config=config)


def carve_moe(ffn: DenseFfn, profile: ActivationProfile, config: MoeConfig) -> MoeFfn:
    return carve(ffn, profile, config).moe
