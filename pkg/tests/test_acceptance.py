"""Acceptance suite. Each test carries a ``criterion`` marker and the run
ends with one PASS/FAIL line per criterion."""

import itertools
import json
import time
from dataclasses import replace

import numpy as np
import pytest

from moecarve import artifacts
from moecarve.assignment import brute_force_lap, solve_lap
from moecarve.carve import carve_moe
from moecarve.cli import main
from moecarve.grouping import MoeConfig, balanced_kmeans, distance_matrix, group_neurons, kmeans_objective
from moecarve.moe_runtime import (
    dense_forward,
    gate_jacobian,
    moe_forward,
    route,
    routing_fidelity,
)
from moecarve.profiler import ActivationProfile, activation_rates, atopk_output, build_profile
from moecarve.synthetic import clustered_ffn, clustered_tokens, random_ffn, random_tokens

pytestmark = pytest.mark.acceptance


def cli(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    assert code == 0, err
    return json.loads(out)


@pytest.fixture(scope="module")
def fixture_run(tmp_path_factory):
    """profile + carve of the shipped fixture, done once for criteria 8, 10 and 12."""
    from conftest import FIXTURES

    out = tmp_path_factory.mktemp("fixture_run")
    common = ["--config", FIXTURES / "config.json", "--weights", FIXTURES / "dense_ffn.safetensors"]
    assert main([str(a) for a in ["profile", *common, "--calib", FIXTURES / "calib.safetensors",
                                  "--out", out / "profile.safetensors"]]) == 0
    assert main([str(a) for a in ["carve", *common, "--profile", out / "profile.safetensors",
                                  "--out", out / "moe.safetensors"]]) == 0
    return FIXTURES, out, common


@pytest.mark.criterion(1, "exact decomposition with all routed experts active")
def test_exact_decomposition():
    rng = np.random.default_rng(1)
    start = time.perf_counter()
    worst = 0.0
    for i in range(20):
        n_shared = 1 + i % 2
        ffn = random_ffn(rng, 32, 64)
        prof = build_profile(random_tokens(rng, 64, 32), ffn, 16, True)
        config = MoeConfig(n_experts=8, n_shared=n_shared, n_routed=8 - n_shared, n_active=8 - n_shared, k_a=16)
        moe = carve_moe(ffn, prof, config)
        x = random_tokens(rng, 100, 32)
        y = dense_forward(ffn, x).astype(np.float64)
        y_moe = moe_forward(moe, x, "binary").astype(np.float64)
        rel = np.linalg.norm(y_moe - y, axis=1) / np.linalg.norm(y, axis=1)
        worst = max(worst, rel.max())
    elapsed = time.perf_counter() - start
    print(f"max relative error {worst:.3e}, {elapsed:.2f}s")
    assert worst <= 1e-4
    assert elapsed < 10


@pytest.mark.criterion(2, "shared and routed clusters form an exact disjoint cover")
def test_partition_validity():
    rng = np.random.default_rng(2)
    violations = 0
    for _ in range(100):
        n_experts = int(rng.integers(2, 9))
        n_shared = int(rng.integers(0, n_experts))
        m = int(rng.integers(1, 7))
        d_h = n_experts * m
        k_a = int(rng.integers(1, d_h + 1))
        ffn = random_ffn(rng, 8, d_h)
        prof = build_profile(random_tokens(rng, int(rng.integers(5, 40)), 8), ffn, k_a, bool(rng.integers(2)))
        config = MoeConfig(n_experts=n_experts, n_shared=n_shared, n_routed=n_experts - n_shared, k_a=k_a,
                           seed=int(rng.integers(1000)))
        part, _ = group_neurons(prof, config)
        groups = [list(part.shared)] + [list(c) for c in part.clusters]
        flat = [int(i) for g in groups for i in g]
        ok = (sorted(flat) == list(range(d_h))
              and len(part.shared) == n_shared * m
              and len(part.clusters) == n_experts - n_shared
              and all(len(c) == m for c in part.clusters))
        violations += not ok
    print(f"{violations} violations")
    assert violations == 0


@pytest.mark.criterion(3, "exact LAP agrees with brute force")
def test_lap_optimality():
    rng = np.random.default_rng(3)
    start = time.perf_counter()
    for _ in range(500):
        n = int(rng.integers(2, 9))
        c = rng.integers(-100, 101, (n, n))
        sol = solve_lap(c)
        assert sorted(sol.perm.tolist()) == list(range(n))
        assert sol.total_cost == brute_force_lap(c).total_cost
    for _ in range(200):
        n = int(rng.integers(2, 9))
        c = rng.standard_normal((n, n))
        assert abs(solve_lap(c).total_cost - brute_force_lap(c).total_cost) <= 1e-9
    elapsed = time.perf_counter() - start
    print(f"{elapsed:.2f}s")
    assert elapsed < 5


def test_lap_scipy_cross_check():
    scipy_opt = pytest.importorskip("scipy.optimize")
    rng = np.random.default_rng(33)
    c = rng.random((300, 300))
    r, col = scipy_opt.linear_sum_assignment(c)
    assert solve_lap(c).total_cost == pytest.approx(c[r, col].sum(), abs=1e-9)


def _markers_profile(markers):
    return ActivationProfile(markers=markers, rates=activation_rates(markers), k_a=0, q=markers.shape[0])


@pytest.mark.criterion(4, "balanced k-means objective and final assignment optimality")
def test_balanced_kmeans():
    # instance family and seed fixed before the first run
    rng = np.random.default_rng(0)
    config = MoeConfig(n_experts=6, n_shared=1, n_routed=5, k_a=10)
    worst_rise = -np.inf
    for _ in range(50):
        ffn = random_ffn(rng, 16, 48)
        _, km = group_neurons(build_profile(random_tokens(rng, 64, 16), ffn, 10, True), config)
        if len(km.objective_log) > 1:
            worst_rise = max(worst_rise, float(np.max(np.diff(km.objective_log))))
    print(f"largest objective increase between assignment steps {worst_rise:.3e}")
    assert worst_rise <= 1e-6

    splits = list(itertools.combinations(range(8), 4))
    assert len(splits) == 70
    small = MoeConfig(n_experts=2, n_shared=0, n_routed=2, expert_size=4)
    for _ in range(50):
        markers = np.zeros((20, 8), dtype=np.uint8)
        for row in markers:
            row[rng.choice(8, 3, replace=False)] = 1
        prof = _markers_profile(markers)
        km = balanced_kmeans(prof, [], small)
        feats = prof.features()
        d = distance_matrix(feats, km.assignment_centroids)
        best = min(d[list(s), 0].sum() + d[[i for i in range(8) if i not in s], 1].sum() for s in splits)
        got = kmeans_objective(feats, km.clusters, km.assignment_centroids)
        assert abs(got - best) <= 1e-9


@pytest.mark.criterion(5, "representative-neuron router tracks the oracle top experts")
def test_router_fidelity():
    rng = np.random.default_rng(5)
    planted = clustered_ffn(rng, 32, 8, 7, 8)
    calib, _ = clustered_tokens(rng, planted, 512)
    config = MoeConfig(n_experts=8, n_shared=1, n_routed=7, n_active=2, k_a=16)
    moe = carve_moe(planted.ffn, build_profile(calib, planted.ffn, 16, True), config)
    held, _ = clustered_tokens(rng, planted, 2000)
    rep = routing_fidelity(moe, planted.ffn, held, "binary", seed=5)
    print(json.dumps(rep.as_dict()))
    assert rep.overlap >= 2 / 7 + 0.2
    assert rep.overlap > rep.random_overlap
    assert rep.router_le_random_fraction >= 0.9


@pytest.mark.criterion(6, "ATopK reconstruction error shrinks as K_a grows")
def test_atopk_reconstruction():
    rng = np.random.default_rng(6)
    d, d_h = 32, 64
    for _ in range(50):
        ffn = random_ffn(rng, d, d_h)
        x = random_tokens(rng, 1, d)
        y = dense_forward(ffn, x).astype(np.float64)
        errs = [np.linalg.norm(y - atopk_output(x, ffn, k).astype(np.float64))
                for k in (1, d_h // 4, d_h // 2, d_h)]
        assert all(b <= a for a, b in zip(errs, errs[1:])), errs
        assert errs[-1] <= 1e-5


@pytest.mark.criterion(7, "analytic gate derivative matches central differences")
def test_gate_gradient():
    rng = np.random.default_rng(7)
    ffn = random_ffn(rng, 16, 48)
    moe = carve_moe(ffn, build_profile(random_tokens(rng, 64, 16), ffn, 8, True),
                    MoeConfig(n_experts=6, n_shared=1, n_routed=5, n_active=2, k_a=8))
    step, checked = 1e-6, 0
    while checked < 100:
        work = replace(moe, u=rng.standard_normal(5), b=rng.uniform(-0.01, 0.01, 5))
        x = random_tokens(rng, 1, 16)[0]
        dec = route(work, x, "scaled")
        ranked = np.sort(dec.probs + work.b)[::-1]
        if ranked[1] - ranked[2] < 1e-6:
            continue  # tied selection: derivative undefined
        jac = gate_jacobian(dec)
        for j in range(5):
            up, down = work.u.copy(), work.u.copy()
            up[j] += step
            down[j] -= step
            fd = (route(replace(work, u=up), x, "scaled").g - route(replace(work, u=down), x, "scaled").g) / (2 * step)
            assert np.max(np.abs(fd - jac[:, j])) <= 1e-6
        checked += 1


@pytest.mark.criterion(8, "bias updates at gamma=0.001 halve the load ratio")
def test_load_balancing(capsys, fixture_run):
    fixtures, out, common = fixture_run
    rep = cli(capsys, "balance-sim", *common, "--moe", out / "moe.safetensors",
              "--calib", fixtures / "heldout.safetensors", "--steps", 200, "--gamma", 0.001)
    first, last = rep["initial_ratio"], rep["final_ratio"]
    print(f"load ratio {first} -> {last}")
    assert first is not None and first >= 5
    assert last is not None and last <= first / 2


@pytest.mark.criterion(9, "zero-initialized scaled gates are bit-identical to binary gates")
def test_zero_init_neutrality():
    rng = np.random.default_rng(9)
    ffn = random_ffn(rng, 24, 64)
    moe = carve_moe(ffn, build_profile(random_tokens(rng, 64, 24), ffn, 10, True),
                    MoeConfig(n_experts=8, n_shared=1, n_routed=7, n_active=2, k_a=10))
    assert not moe.u.any() and not moe.b.any()
    x = random_tokens(rng, 1000, 24)
    assert moe_forward(moe, x, "scaled").tobytes() == moe_forward(moe, x, "binary").tobytes()


@pytest.mark.criterion(10, "S1A1E8 reports an FFN FLOP ratio of exactly 0.25")
def test_flop_ratio(capsys, fixture_run):
    fixtures, out, common = fixture_run
    manifest = json.loads((out / "moe.manifest.json").read_text())
    assert manifest["config"]["n_experts"] == 8 and manifest["config"]["n_shared"] == 1
    assert manifest["n_active"] == 1
    rep = cli(capsys, "eval", *common, "--moe", out / "moe.safetensors", "--calib", fixtures / "heldout.safetensors")
    print(json.dumps(rep["flops"]))
    assert rep["flops"]["ffn_flop_ratio"] == 0.25


@pytest.mark.criterion(11, "tensor format round trip and distinct corruption errors")
def test_format_round_trip(tmp_path):
    from moecarve.carve import carve
    from moecarve.tensorfile import (
        MalformedHeaderError,
        OffsetOverlapError,
        TruncatedError,
        UnknownDtypeError,
        decode_tensors,
    )

    rng = np.random.default_rng(11)
    ffn = random_ffn(rng, 16, 32)
    res = carve(ffn, build_profile(random_tokens(rng, 40, 16), ffn, 6, True),
                MoeConfig(n_experts=4, n_shared=1, n_routed=3, n_active=2, k_a=6))
    res.moe.u[:] = rng.standard_normal(3)
    res.moe.b[:] = rng.standard_normal(3)
    path = tmp_path / "moe.safetensors"
    artifacts.save_moe(res, path)
    moe, _ = artifacts.load_moe(path)
    before, after = artifacts.moe_tensors(res.moe), artifacts.moe_tensors(moe)
    assert before.keys() == after.keys()
    assert all(before[k].tobytes() == after[k].tobytes() and before[k].shape == after[k].shape for k in before)
    x = random_tokens(rng, 50, 16)
    assert moe_forward(moe, x, "scaled").tobytes() == moe_forward(res.moe, x, "scaled").tobytes()

    def forge(header: dict, payload: bytes) -> bytes:
        blob = json.dumps(header).encode()
        return len(blob).to_bytes(8, "little") + blob + payload

    cases = {
        TruncatedError: path.read_bytes()[:-4],
        OffsetOverlapError: forge({"a": {"dtype": "F32", "shape": [2], "data_offsets": [0, 8]},
                                   "b": {"dtype": "F32", "shape": [2], "data_offsets": [4, 12]}}, bytes(12)),
        UnknownDtypeError: forge({"a": {"dtype": "BF16", "shape": [2], "data_offsets": [0, 4]}}, bytes(4)),
        MalformedHeaderError: (7).to_bytes(8, "little") + b"{bad!!}",
    }
    for expected, data in cases.items():
        with pytest.raises(expected) as info:
            decode_tensors(data)
        assert type(info.value) is expected


@pytest.mark.criterion(12, "profile and carve on the fixture are byte-for-byte reproducible")
def test_end_to_end_determinism(fixture_run, tmp_path):
    fixtures, first, common = fixture_run
    assert main([str(a) for a in ["profile", *common, "--calib", fixtures / "calib.safetensors",
                                  "--out", tmp_path / "profile.safetensors"]]) == 0
    assert main([str(a) for a in ["carve", *common, "--profile", tmp_path / "profile.safetensors",
                                  "--out", tmp_path / "moe.safetensors"]]) == 0
    assert (tmp_path / "moe.manifest.json").read_bytes() == (first / "moe.manifest.json").read_bytes()
    assert (tmp_path / "profile.safetensors").read_bytes() == (first / "profile.safetensors").read_bytes()
    assert (tmp_path / "moe.safetensors").read_bytes() == (first / "moe.safetensors").read_bytes()
