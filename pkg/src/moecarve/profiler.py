"""Activation profiling of a dense SwiGLU FFN over a calibration batch."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor_core import ShapeError, as_matrix, hadamard, matmul, swiglu, swish


@dataclass(frozen=True)
class DenseFfn:
    w_up: np.ndarray    # d x d_h
    w_gate: np.ndarray  # d x d_h
    w_down: np.ndarray  # d_h x d

    def __post_init__(self):
        object.__setattr__(self, "w_up", as_matrix(self.w_up, "w_up"))
        object.__setattr__(self, "w_gate", as_matrix(self.w_gate, "w_gate"))
        object.__setattr__(self, "w_down", as_matrix(self.w_down, "w_down"))
        d, d_h = self.w_up.shape
        if self.w_gate.shape != (d, d_h) or self.w_down.shape != (d_h, d):
            raise ShapeError(
                "inconsistent FFN shapes: "
                f"w_up {self.w_up.shape}, w_gate {self.w_gate.shape}, w_down {self.w_down.shape}"
            )

    @property
    def d(self) -> int:
        return self.w_up.shape[0]

    @property
    def d_h(self) -> int:
        return self.w_up.shape[1]


@dataclass(frozen=True)
class ActivationProfile:
    markers: np.ndarray  # q x d_h, uint8 in {0, 1}
    rates: np.ndarray    # d_h, float64
    k_a: int
    q: int

    @property
    def d_h(self) -> int:
        return self.markers.shape[1]

    def features(self, indices=None) -> np.ndarray:
        """Feature vectors (marker columns) as rows of a float64 array."""
        cols = self.markers if indices is None else self.markers[:, np.asarray(indices, dtype=np.int64)]
        return np.ascontiguousarray(cols.T, dtype=np.float64)


def _unit_rows(m: np.ndarray, what: str) -> np.ndarray:
    norms = np.linalg.norm(m.astype(np.float64), axis=1)
    bad = np.flatnonzero(norms == 0)
    if bad.size:
        raise ValueError(f"cannot normalize: {what} {int(bad[0])} has zero norm")
    return (m.astype(np.float64) / norms[:, None]).astype(np.float32)


def hidden_states(x: np.ndarray, ffn: DenseFfn, normalize: bool = False) -> np.ndarray:
    """SwiGLU hidden states for a q x d batch of token embeddings.

    With ``normalize`` every token row and every neuron column of the gate and
    up projections is scaled to unit L2 norm first, so the markers judge
    neurons independently of weight magnitude.
    """
    x = as_matrix(x, "x")
    if x.shape[1] != ffn.d:
        raise ShapeError(f"batch width {x.shape[1]} does not match FFN width {ffn.d}")
    if not normalize:
        return swiglu(x, ffn.w_gate, ffn.w_up)
    xn = _unit_rows(x, "token row")
    wg = _unit_rows(ffn.w_gate.T, "w_gate column").T
    wu = _unit_rows(ffn.w_up.T, "w_up column").T
    return hadamard(swish(matmul(xn, wg)), matmul(xn, wu))


def atopk_markers(h, k_a: int) -> np.ndarray:
    """Mark the ``k_a`` entries of largest magnitude in each row.

    Accepts a single vector or a q x d_h matrix. Ties go to the lower index.
    """
    h = np.asarray(h, dtype=np.float32)
    single = h.ndim == 1
    h2 = h.reshape(1, -1) if single else h
    d_h = h2.shape[1]
    if not 1 <= k_a <= d_h:
        raise ValueError(f"k_a must lie in [1, {d_h}], got {k_a}")
    order = np.argsort(-np.abs(h2), axis=1, kind="stable")[:, :k_a]
    out = np.zeros(h2.shape, dtype=np.uint8)
    np.put_along_axis(out, order, 1, axis=1)
    return out[0] if single else out


def atopk_output(x: np.ndarray, ffn: DenseFfn, k_a: int) -> np.ndarray:
    """FFN output keeping only each token's ``k_a`` largest-magnitude neurons."""
    h = hidden_states(x, ffn)
    kept = np.where(atopk_markers(h, k_a) == 1, h, np.float32(0))
    return matmul(kept, ffn.w_down)


def activation_rates(markers) -> np.ndarray:
    """Fraction of tokens on which each neuron is marked."""
    markers = np.asarray(markers)
    if markers.ndim != 2 or markers.shape[0] < 1:
        raise ValueError(f"markers must be a non-empty q x d_h matrix, got shape {markers.shape}")
    return markers.sum(axis=0, dtype=np.int64) / markers.shape[0]


def build_profile(x: np.ndarray, ffn: DenseFfn, k_a: int, normalize: bool = False) -> ActivationProfile:
    h = hidden_states(x, ffn, normalize=normalize)
    if h.shape[0] < 1:
        raise ValueError("calibration batch is empty")
    markers = atopk_markers(h, k_a)
    return ActivationProfile(markers=markers, rates=activation_rates(markers), k_a=int(k_a), q=markers.shape[0])


def rate_histogram(rates, bins: int = 50) -> dict:
    counts, edges = np.histogram(np.asarray(rates, dtype=np.float64), bins=bins, range=(0.0, 1.0))
    return {"bins": bins, "edges": edges.tolist(), "counts": counts.astype(int).tolist()}
