"""Neuron grouping: shared-expert selection and balanced k-means over
activation feature vectors."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .assignment import solve_lap
from .profiler import ActivationProfile

CENTROID_TOL = 1e-9


@dataclass(frozen=True)
class MoeConfig:
    n_experts: int = 8
    n_shared: int = 1
    n_routed: int = 7
    n_active: int = 1
    expert_size: int = 0  # 0: derive d_h // n_experts via with_hidden_size
    k_a: int = 10
    gamma: float = 0.001
    max_kmeans_iters: int = 100
    normalize: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.n_shared < 0 or self.n_routed < 1:
            raise ValueError(f"need n_shared >= 0 and n_routed >= 1, got {self.n_shared}/{self.n_routed}")
        if self.n_shared + self.n_routed != self.n_experts:
            raise ValueError(
                f"n_shared + n_routed must equal n_experts: {self.n_shared} + {self.n_routed} != {self.n_experts}"
            )
        if not 1 <= self.n_active <= self.n_routed:
            raise ValueError(f"n_active must lie in [1, {self.n_routed}], got {self.n_active}")
        if self.gamma <= 0:
            raise ValueError(f"gamma must be positive, got {self.gamma}")
        if self.k_a < 1:
            raise ValueError(f"k_a must be >= 1, got {self.k_a}")
        if self.max_kmeans_iters < 1:
            raise ValueError("max_kmeans_iters must be >= 1")

    def with_hidden_size(self, d_h: int) -> "MoeConfig":
        """Fill in (or check) ``expert_size`` against the FFN hidden width."""
        if d_h % self.n_experts:
            raise ValueError(f"hidden size {d_h} is not a multiple of n_experts={self.n_experts}")
        m = d_h // self.n_experts
        if self.expert_size and self.expert_size != m:
            raise ValueError(f"expert_size {self.expert_size} * n_experts {self.n_experts} != d_h {d_h}")
        if self.k_a > d_h:
            raise ValueError(f"k_a={self.k_a} exceeds hidden size {d_h}")
        return self if self.expert_size == m else replace(self, expert_size=m)


@dataclass
class Partition:
    shared: np.ndarray            # sorted neuron indices, size n_shared * m
    clusters: list[np.ndarray]    # n_routed sorted index arrays, each of size m
    centroids: np.ndarray         # n_routed x q, float64
    representatives: np.ndarray | None = None

    def check(self, d_h: int, m: int) -> None:
        everything = np.concatenate([self.shared, *self.clusters])
        if everything.size != d_h or not np.array_equal(np.sort(everything), np.arange(d_h)):
            raise AssertionError("partition is not a disjoint cover of the hidden neurons")
        if self.shared.size % m or any(c.size != m for c in self.clusters):
            raise AssertionError("partition is unbalanced")
        if self.representatives is not None:
            for j, c in enumerate(self.clusters):
                if self.representatives[j] not in c:
                    raise AssertionError(f"representative of cluster {j} is not a member")


@dataclass
class KMeansResult:
    clusters: list[np.ndarray]
    centroids: np.ndarray
    converged: bool
    iterations: int
    objective_log: list[float] = field(default_factory=list)
    # centroids that produced the final assignment
    assignment_centroids: np.ndarray | None = None


def _top_by_rate(rates: np.ndarray, candidates: np.ndarray, k: int) -> np.ndarray:
    order = np.argsort(-rates[candidates], kind="stable")
    return candidates[order[:k]]


def select_shared(profile: ActivationProfile, n_shared: int, m: int) -> np.ndarray:
    k = n_shared * m
    if k > profile.d_h:
        raise ValueError(f"shared size {k} exceeds hidden size {profile.d_h}")
    return np.sort(_top_by_rate(profile.rates, np.arange(profile.d_h), k))


def remaining_neurons(d_h: int, shared) -> np.ndarray:
    mask = np.ones(d_h, dtype=bool)
    mask[np.asarray(shared, dtype=np.int64)] = False
    return np.flatnonzero(mask)


def init_centroids(profile: ActivationProfile, shared, n_routed: int) -> tuple[np.ndarray, np.ndarray]:
    """Seed centroids with the highest-rate neurons outside the shared set.

    Returns ``(centroids, source_indices)`` with source indices in descending
    order of activation rate.
    """
    rest = remaining_neurons(profile.d_h, shared)
    if rest.size < n_routed:
        raise ValueError(f"only {rest.size} neurons left for {n_routed} centroids")
    src = _top_by_rate(profile.rates, rest, n_routed)
    return profile.features(src), src


def distance_matrix(features: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    f = np.asarray(features, dtype=np.float64)
    c = np.asarray(centroids, dtype=np.float64)
    if f.ndim != 2 or c.ndim != 2 or f.shape[1] != c.shape[1]:
        raise ValueError(f"feature/centroid length mismatch: {f.shape} vs {c.shape}")
    # direct differences rather than the |a|^2 - 2ab + |b|^2 expansion,
    # which loses the exact zero for identical vectors
    out = np.empty((f.shape[0], c.shape[0]))
    for j in range(c.shape[0]):
        diff = f - c[j]
        out[:, j] = np.sqrt(np.einsum("ik,ik->i", diff, diff))
    return out


def extend_distance_matrix(d: np.ndarray, m: int) -> np.ndarray:
    d = np.asarray(d, dtype=np.float64)
    n_routed = d.shape[1]
    if d.ndim != 2 or d.shape[0] != n_routed * m:
        raise ValueError(f"distance matrix {d.shape} incompatible with {n_routed} clusters of size {m}")
    return np.repeat(d, m, axis=1)


def assign_balanced(features: np.ndarray, centroids: np.ndarray, m: int) -> tuple[np.ndarray, float]:
    """Balanced assignment step: label per feature row and its total distance."""
    d = distance_matrix(features, centroids)
    sol = solve_lap(extend_distance_matrix(d, m))
    labels = sol.perm // m
    return labels, float(d[np.arange(d.shape[0]), labels].sum())


def kmeans_objective(features: np.ndarray, clusters, centroids: np.ndarray) -> float:
    """Sum of member-to-centroid L2 distances.

    ``clusters`` index rows of ``features``.
    """
    f = np.asarray(features, dtype=np.float64)
    total = 0.0
    for p, members in enumerate(clusters):
        diff = f[np.asarray(members, dtype=np.int64)] - centroids[p]
        total += float(np.sqrt((diff * diff).sum(axis=1)).sum())
    return total


def balanced_kmeans(profile: ActivationProfile, shared, config: MoeConfig) -> KMeansResult:
    """Partition the non-shared neurons into ``n_routed`` clusters of exactly
    ``expert_size`` members each.

    Alternates a balanced assignment (LAP on the column-repeated distance
    matrix) with a mean update until the centroids stop moving or the
    iteration cap is hit.
    """
    m = config.expert_size
    n_routed = config.n_routed
    rest = remaining_neurons(profile.d_h, shared)
    if rest.size != n_routed * m:
        raise ValueError(f"{rest.size} routed neurons cannot form {n_routed} clusters of {m}")
    features = profile.features(rest)
    centroids, _ = init_centroids(profile, shared, n_routed)

    log: list[float] = []
    converged = False
    it = 0
    labels = np.zeros(rest.size, dtype=np.int64)
    used = centroids
    while it < config.max_kmeans_iters:
        it += 1
        labels, obj = assign_balanced(features, centroids, m)
        log.append(obj)
        used = centroids
        updated = centroids.copy()
        for p in range(n_routed):
            members = labels == p
            if members.any():
                updated[p] = features[members].mean(axis=0)
            else:  # pragma: no cover - unreachable under balanced assignment
                raise AssertionError(f"cluster {p} emptied under balanced assignment")
        moved = np.max(np.abs(updated - centroids)) > CENTROID_TOL
        centroids = updated
        if not moved:
            converged = True
            break

    clusters = [rest[labels == p] for p in range(n_routed)]
    return KMeansResult(
        clusters=clusters,
        centroids=centroids,
        converged=converged,
        iterations=it,
        objective_log=log,
        assignment_centroids=used,
    )


def pick_representatives(profile: ActivationProfile, clusters, centroids: np.ndarray) -> np.ndarray:
    reps = np.empty(len(clusters), dtype=np.int64)
    for j, members in enumerate(clusters):
        members = np.sort(np.asarray(members, dtype=np.int64))
        dist = distance_matrix(profile.features(members), centroids[j : j + 1])[:, 0]
        reps[j] = members[int(np.argmin(dist))]  # argmin keeps the lowest index on ties
    return reps


def group_neurons(profile: ActivationProfile, config: MoeConfig) -> tuple[Partition, KMeansResult]:
    config = config.with_hidden_size(profile.d_h)
    shared = select_shared(profile, config.n_shared, config.expert_size)
    km = balanced_kmeans(profile, shared, config)
    part = Partition(shared=shared, clusters=km.clusters, centroids=km.centroids)
    part.representatives = pick_representatives(profile, part.clusters, part.centroids)
    return part, km
