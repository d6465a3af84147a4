"""Dense and MoE forward passes, top-k gating and load balancing."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .carve import MoeFfn
from .profiler import DenseFfn
from .tensor_core import ShapeError, as_matrix, matmul, softmax, swiglu

MODES = ("binary", "scaled", "generic")


@dataclass(frozen=True)
class GateDecision:
    mode: str
    s: np.ndarray           # router affinity
    probs: np.ndarray       # softmax(s)
    active_set: np.ndarray  # ascending expert indices
    g: np.ndarray           # gate score per routed expert, 0 when inactive


@dataclass(frozen=True)
class BatchRouting:
    mode: str
    s: np.ndarray       # q x n_routed
    probs: np.ndarray   # q x n_routed
    active: np.ndarray  # q x n_routed bool
    g: np.ndarray       # q x n_routed float64

    def decision(self, t: int) -> GateDecision:
        return GateDecision(
            mode=self.mode,
            s=self.s[t],
            probs=self.probs[t],
            active_set=np.flatnonzero(self.active[t]),
            g=self.g[t],
        )


@dataclass
class EvalCounter:
    """Counts token-expert evaluations actually performed."""

    shared: int = 0
    routed: int = 0
    per_expert: dict[int, int] = field(default_factory=dict)

    @property
    def total(self) -> int:
        return self.shared + self.routed


@dataclass
class LoadStats:
    counts: np.ndarray
    tokens: int
    n_active: int

    @classmethod
    def empty(cls, n_routed: int, n_active: int) -> "LoadStats":
        return cls(np.zeros(n_routed, dtype=np.int64), 0, n_active)

    @classmethod
    def from_active(cls, active: np.ndarray, n_active: int) -> "LoadStats":
        return cls(active.sum(axis=0).astype(np.int64), int(active.shape[0]), n_active)

    def add(self, active: np.ndarray) -> None:
        self.counts = self.counts + active.sum(axis=0).astype(np.int64)
        self.tokens += int(active.shape[0])

    @property
    def expected(self) -> float:
        return self.tokens * self.n_active / len(self.counts)


def _tokens(x, d: int) -> tuple[np.ndarray, bool]:
    arr = np.asarray(x, dtype=np.float32)
    single = arr.ndim == 1
    arr = as_matrix(arr.reshape(1, -1) if single else arr, "x")
    if arr.shape[1] != d:
        raise ShapeError(f"token width {arr.shape[1]} does not match model width {d}")
    return arr, single


def dense_forward(ffn: DenseFfn, x) -> np.ndarray:
    xs, single = _tokens(x, ffn.d)
    out = matmul(swiglu(xs, ffn.w_gate, ffn.w_up), ffn.w_down)
    return out[0] if single else out


def topk_mask(scores: np.ndarray, k: int) -> np.ndarray:
    """Boolean mask of the k highest entries per row; ties go to the lower index."""
    order = np.argsort(-scores, axis=1, kind="stable")[:, :k]
    mask = np.zeros(scores.shape, dtype=bool)
    np.put_along_axis(mask, order, True, axis=1)
    return mask


def route_batch(moe: MoeFfn, x, mode: str = "binary") -> BatchRouting:
    if mode not in MODES:
        raise ValueError(f"unknown gating mode {mode!r}; expected one of {MODES}")
    xs, _ = _tokens(x, moe.d)
    s = moe.router.affinity(xs)
    probs = np.apply_along_axis(softmax, 1, s) if s.shape[0] else np.zeros(s.shape)
    # bias shifts selection only; it never enters g
    active = topk_mask(probs + moe.b.astype(np.float64), moe.n_active)
    if mode == "binary":
        vals = np.ones(s.shape)
    elif mode == "scaled":
        vals = 1.0 + probs * moe.u.astype(np.float64)
    else:
        vals = s.astype(np.float64)
    g = np.where(active, vals, 0.0)
    return BatchRouting(mode=mode, s=s, probs=probs, active=active, g=g)


def route(moe: MoeFfn, x, mode: str = "binary") -> GateDecision:
    x = np.asarray(x, dtype=np.float32).reshape(1, -1)
    return route_batch(moe, x, mode).decision(0)


def moe_forward(moe: MoeFfn, x, mode: str = "binary", counter: EvalCounter | None = None,
                routing: BatchRouting | None = None) -> np.ndarray:
    """Shared block plus gated routed experts.

    Routed experts are evaluated only on the tokens that selected them.
    """
    xs, single = _tokens(x, moe.d)
    if routing is None:
        routing = route_batch(moe, xs, mode)
    q = xs.shape[0]
    out = moe.shared(xs).astype(np.float64)
    if counter is not None:
        counter.shared += q
    for i, expert in enumerate(moe.routed):
        rows = np.flatnonzero(routing.active[:, i])
        if rows.size == 0:
            continue
        y = expert(xs[rows]).astype(np.float64)
        out[rows] += routing.g[rows, i][:, None] * y
        if counter is not None:
            counter.routed += rows.size
            counter.per_expert[i] = counter.per_expert.get(i, 0) + int(rows.size)
    out = out.astype(np.float32)
    return out[0] if single else out


def expert_outputs(moe: MoeFfn, x) -> np.ndarray:
    """Every routed expert on every token: n_routed x q x d (for checks)."""
    xs, _ = _tokens(x, moe.d)
    return np.stack([e(xs) for e in moe.routed])


def gate_jacobian(decision: GateDecision) -> np.ndarray:
    """d g_i / d u_j with the active set and softmax probabilities held fixed."""
    if decision.mode != "scaled":
        raise ValueError(f"gate jacobian is defined for scaled mode, not {decision.mode!r}")
    n = decision.g.shape[0]
    jac = np.zeros((n, n))
    idx = decision.active_set
    jac[idx, idx] = decision.probs[idx]
    return jac


def update_balance_bias(b: np.ndarray, stats: LoadStats, gamma: float) -> np.ndarray:
    if gamma <= 0:
        raise ValueError(f"gamma must be positive, got {gamma}")
    b = np.asarray(b)
    n = len(stats.counts)
    # compare counts*n against tokens*k to keep the test exact in integers
    scaled = stats.counts * n
    target = stats.tokens * stats.n_active
    step = np.where(scaled > target, -gamma, np.where(scaled < target, gamma, 0.0))
    return (b.astype(np.float64) + step).astype(b.dtype)


def load_ratio(counts) -> float:
    counts = np.asarray(counts, dtype=np.float64)
    lo = counts.min()
    return float("inf") if lo == 0 else float(counts.max() / lo)


@dataclass
class BalanceTrace:
    ratios: list[float]
    counts: list[list[int]]
    bias: np.ndarray


def simulate_balance(moe: MoeFfn, x, steps: int, gamma: float, mode: str = "binary") -> BalanceTrace:
    """Route the same token stream ``steps`` times, updating the bias after
    each pass. The trace has ``steps + 1`` entries: the loads before each
    update and after the last one."""
    work = replace(moe, b=moe.b.copy())
    ratios, counts = [], []
    for step in range(steps + 1):
        active = route_batch(work, x, mode).active
        stats = LoadStats.from_active(active, work.n_active)
        ratios.append(load_ratio(stats.counts))
        counts.append(stats.counts.tolist())
        if step < steps:
            work.b = update_balance_bias(work.b, stats, gamma)
    return BalanceTrace(ratios=ratios, counts=counts, bias=work.b)


@dataclass(frozen=True)
class FidelityReport:
    tokens: int
    overlap: float
    random_overlap: float
    router_deactivated_l1: float
    oracle_deactivated_l1: float
    random_deactivated_l1: float
    router_le_random_fraction: float

    def as_dict(self) -> dict:
        return dict(self.__dict__)


def expert_hidden_l1(moe: MoeFfn, ffn: DenseFfn, x) -> np.ndarray:
    """Per-token L1 norm of each routed expert's slice of the dense hidden state."""
    if moe.d != ffn.d or sum(e.width for e in moe.routed) + moe.shared.width != ffn.d_h:
        raise ShapeError("MoE does not match the dense FFN dimensions")
    xs, _ = _tokens(x, ffn.d)
    h = np.abs(swiglu(xs, ffn.w_gate, ffn.w_up).astype(np.float64))
    return np.stack([h[:, e.source_indices].sum(axis=1) for e in moe.routed], axis=1)


def _deactivated_mean(l1: np.ndarray, active: np.ndarray) -> np.ndarray:
    n_off = (~active).sum(axis=1)
    mass = np.where(active, 0.0, l1).sum(axis=1)
    return np.divide(mass, n_off, out=np.zeros_like(mass), where=n_off > 0)


def fidelity_from_selection(l1: np.ndarray, selected: np.ndarray, n_active: int,
                            rng: np.random.Generator) -> FidelityReport:
    """Compare a q x n_routed selection mask with the L1-oracle and a random pick."""
    q, n_routed = l1.shape
    oracle = topk_mask(l1, n_active)
    rand = np.zeros_like(oracle)
    for t in range(q):
        rand[t, rng.choice(n_routed, size=n_active, replace=False)] = True
    ov = (selected & oracle).sum(axis=1) / n_active
    rov = (rand & oracle).sum(axis=1) / n_active
    sel_mass = _deactivated_mean(l1, selected)
    rand_mass = _deactivated_mean(l1, rand)
    return FidelityReport(
        tokens=q,
        overlap=float(ov.mean()),
        random_overlap=float(rov.mean()),
        router_deactivated_l1=float(sel_mass.mean()),
        oracle_deactivated_l1=float(_deactivated_mean(l1, oracle).mean()),
        random_deactivated_l1=float(rand_mass.mean()),
        router_le_random_fraction=float((sel_mass <= rand_mass).mean()),
    )


def routing_fidelity(moe: MoeFfn, ffn: DenseFfn, x, mode: str = "binary", seed: int = 0) -> FidelityReport:
    l1 = expert_hidden_l1(moe, ffn, x)
    active = route_batch(moe, x, mode).active
    return fidelity_from_selection(l1, active, moe.n_active, np.random.default_rng(seed))


def projection_flops(d: int, width: int) -> int:
    return 2 * d * width


def flop_report(moe: MoeFfn, counter: EvalCounter, tokens: int) -> dict:
    """Per-token FLOPs under the 2*d*width-per-projection model.

    The FFN ratio covers the expert projections only; router cost is listed
    separately and folded into ``total_flop_ratio``.
    """
    d = moe.d
    m = moe.routed[0].width
    d_h = moe.shared.width + m * moe.n_routed
    dense = 3 * projection_flops(d, d_h) * tokens
    shared = 3 * projection_flops(d, moe.shared.width) * counter.shared
    routed = 3 * projection_flops(d, m) * counter.routed
    router = 2 * projection_flops(d, moe.n_routed) * tokens
    per = lambda v: v / tokens if tokens else 0.0  # noqa: E731
    return {
        "dense_flops_per_token": per(dense),
        "moe_ffn_flops_per_token": per(shared + routed),
        "router_flops_per_token": per(router),
        "ffn_flop_ratio": (shared + routed) / dense if dense else 0.0,
        "total_flop_ratio": (shared + routed + router) / dense if dense else 0.0,
    }
