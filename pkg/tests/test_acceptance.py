"""Acceptance criteria, one printed PASS/FAIL line each.

Run with ``pytest tests/test_acceptance.py -v`` (lines appear in the live
output) or directly with ``python tests/test_acceptance.py``.
"""

import sys
import time
from pathlib import Path

import numpy as np
import pytest

from tailsink import (
    ScoreField,
    augment_dustbin,
    bias_certificate,
    build_band_support,
    estimate_memory_ledger,
    measure_hilbert_contraction,
    orbit_reconstruct,
    projective_coefficient,
    r2_backward,
    random_problem,
    select_tail_depth,
    solve,
    surrogate_gradient,
)
from tailsink.oracle import DenseProblem, finite_diff_grad
from tailsink.problem import rng
from tailsink.sinkhorn import col_sums, output, row_sums, trace_plan
from tailsink.support import augment_tensors, explicit_support

ROOT = Path(__file__).resolve().parents[1]
_sink = None


def emit(number, passed, detail):
    line = f"CRITERION {number} {'PASS' if passed else 'FAIL'}  {detail}"
    if _sink is not None:
        with _sink.disabled():
            print(line, flush=True)
    else:
        print(line, flush=True)
    return passed


@pytest.fixture(autouse=True)
def _live_output(capsys):
    global _sink
    _sink = capsys
    yield
    _sink = None


def _dev(a, b):
    return float(np.abs(np.asarray(a, np.float64) - np.asarray(b, np.float64)).max())


# 1 -----------------------------------------------------------------------------------------

def criterion_exactness():
    ok, parts = True, []
    for L in (64, 128, 512):
        t0 = time.perf_counter()
        p32 = random_problem(L, min(256, L), d=8, T=15, R=2, seed=0, dtype="float32")
        p64 = p32.astype("float64")
        dp = DenseProblem.from_problem(p64)
        g32, g64 = surrogate_gradient(p32), surrogate_gradient(p64)
        picker = rng(100 + L)
        worst = {"f64": 0.0, "f32": 0.0}
        for name in "QKV":
            size = getattr(p64, name).size
            # full finite differences where affordable, sampled entries at L = 512
            idx = np.arange(size) if L <= 128 else np.sort(picker.choice(size, 64, replace=False))
            ref = finite_diff_grad(dp, name, index=idx)
            worst["f64"] = max(worst["f64"], _dev(getattr(g64, name).ravel()[idx], ref))
            worst["f32"] = max(worst["f32"], _dev(getattr(g32, name).ravel()[idx], ref))
        secs = time.perf_counter() - t0
        good = worst["f64"] <= 1e-8 and worst["f32"] <= 1e-4 and secs < 120
        ok &= good
        parts.append(f"L={L}: f64 {worst['f64']:.1e} f32 {worst['f32']:.1e} {secs:.0f}s")
    return emit(1, ok, "exactness vs finite differences (tol 1e-8 / 1e-4, <2 min): " + "; ".join(parts))


# 2 -----------------------------------------------------------------------------------------

def _mode_pair(p, G):
    _, tr = p.forward()
    a = r2_backward(p.score(), tr, G, p.V, "one_reference")
    b = r2_backward(p.score(), tr, G, p.V, "direct_four_plan")
    return a, b, tr


def _interleaved_ratio(L, repeats=21, warmup=3):
    p = random_problem(L, 256, d=8, T=15, R=2, seed=0, dtype="float32")
    s = p.score()
    _, tr = p.forward()
    G = p.loss.weight
    runs = [lambda m=m: r2_backward(s, tr, G, p.V, m) for m in ("one_reference", "direct_four_plan")]
    for _ in range(warmup):
        for r in runs:
            r()
    ratios = []
    for _ in range(repeats):
        t = []
        for r in runs:
            t0 = time.perf_counter()
            r()
            t.append(time.perf_counter() - t0)
        ratios.append(t[0] / t[1])
    return float(np.median(ratios))


def criterion_modes():
    worst = {"float64": 0.0, "float32": 0.0}
    ratio_ok = True
    for dtype in worst:
        for seed in range(100):
            g = np.random.default_rng(seed)
            L = int(g.integers(16, 160))
            p = random_problem(L, int(g.integers(1, L)), d=8, T=15, R=2, seed=seed, dtype=dtype,
                               block=int(g.integers(8, 65)))
            a, b, _ = _mode_pair(p, p.loss.weight)
            worst[dtype] = max(worst[dtype], a.S_bar.max_abs_diff(b.S_bar))
            ratio_ok &= b.stats["logical_plan_bytes"] == 4 * a.stats["logical_plan_bytes"]
    slow = {L: _interleaved_ratio(L) for L in (512, 1024)}
    ok = worst["float64"] <= 1e-12 and worst["float32"] <= 1e-6 and ratio_ok and max(slow.values()) <= 1.10
    timing = ", ".join(f"L={L} one-ref/direct time {r:.2f}" for L, r in slow.items())
    return emit(2, ok, f"mode equivalence on 100+100 instances: max|dS| f64 {worst['float64']:.1e} "
                       f"f32 {worst['float32']:.1e}; storage ratio 4: {ratio_ok}; {timing} (limit 1.10)")


# 3 -----------------------------------------------------------------------------------------

def criterion_bias():
    residual, decreasing, selected, scan_ok = 0.0, True, [], True
    for seed in (0, 1, 2):
        p = random_problem(128, 128, d=8, T=15, R=2, seed=seed, loss="supervised")
        certs = [bias_certificate(p, R) for R in (0, 1, 2, 4)]
        residual = max(residual, *(c.residual for c in certs))
        decreasing &= all(a.eta_norm > b.eta_norm for a, b in zip(certs, certs[1:]))
        selected.append(select_tail_depth(p, 1e-5, 4).R)
        # the selector agrees with an exhaustive scan, also on a second loss family
        for q in (p, random_problem(128, 128, d=8, T=15, R=2, seed=seed, loss="frobenius")):
            for tau in (1e-2, 1e-3, 1e-5):
                cs = [bias_certificate(q, r, oracle=False).c_max for r in range(5)]
                best = next((r for r, c in enumerate(cs) if c <= tau), None)
                scan_ok &= select_tail_depth(q, tau, 4).R == best
    ok = residual <= 1e-9 and decreasing and selected == [2, 2, 2] and scan_ok
    return emit(3, ok, f"bias certificate: max residual {residual:.1e} (tol 1e-9); eta strictly decreasing: "
                       f"{decreasing}; selector at tau=1e-5 -> {selected}; matches exhaustive scan: {scan_ok}")


# 4 -----------------------------------------------------------------------------------------

def criterion_orbit():
    err = {"float32": 0.0, "float64": 0.0}
    counts = set()
    for dtype in err:
        for seed in (0, 1, 2):
            p = random_problem(128, 128, d=8, T=15, R=2, seed=seed, dtype=dtype)
            _, tr = p.forward()
            rep = orbit_reconstruct(p.score(), tr)
            counts.add(len(rep.errors))
            err[dtype] = max(err[dtype], rep.max_error)
    ok = err["float32"] <= 1e-5 and err["float64"] <= 1e-10 and counts == {34}
    return emit(4, ok, f"orbit reconstruction over {counts.pop() if len(counts) == 1 else counts} plans: "
                       f"f32 {err['float32']:.2e} (tol 1e-5), f64 {err['float64']:.2e} (tol 1e-10)")


# 5 -----------------------------------------------------------------------------------------

def criterion_ledger():
    led = estimate_memory_ledger(16384, 1024, 128, 64, 4, R=2, T=15)
    m = led.mib()
    got = {
        "entries": led.active_entries,
        "direct": f"{m['direct_plan_mib']:.2f}",
        "one_ref": f"{m['one_ref_plan_mib']:.2f}",
        "tiles": f"{m['direct_tile_mib']:.4f}/{m['one_ref_tile_mib']:.4f}",
        "tail": f"{m['tail_vector_mib']:.3f}",
        "qkv": f"{m['qkv_mib']:.2f}",
    }
    want = {"entries": 32_521_216, "direct": "496.23", "one_ref": "124.06", "tiles": "0.2500/0.0625",
            "tail": "0.375", "qkv": "12.00"}
    return emit(5, got == want, "memory ledger: " + ", ".join(f"{k}={v}" for k, v in got.items()))


# 6 -----------------------------------------------------------------------------------------

def criterion_contraction():
    g = rng(2024)
    violations, worst_gap = 0, -np.inf
    for _ in range(200):
        n, m = (int(x) for x in g.integers(1, 33, size=2))
        S = g.standard_normal((n, m)) * float(g.uniform(0.05, 3.0))
        cert = projective_coefficient(S)
        if m > 1:
            obs = measure_hilbert_contraction(S, g.standard_normal(m), g.standard_normal(m), log=True)
            worst_gap = max(worst_gap, obs - cert.rho_H)
            violations += obs > cert.rho_H
        violations += not (cert.rho_H <= cert.rho_range < 1)
    trivial = []
    for _ in range(20):
        n, m = (int(x) for x in g.integers(1, 33, size=2))
        trivial.append(projective_coefficient(np.full((n, m), float(g.standard_normal()))).rho_H)
        a, b = g.standard_normal(n) * 4, g.standard_normal(m) * 4
        trivial.append(projective_coefficient(a[:, None] + b[None, :]).rho_H)
    zeros = all(r == 0.0 for r in trivial)
    ok = violations == 0 and zeros
    return emit(6, ok, f"contraction on 200 random blocks: {violations} violations of observed <= rho_H <= "
                       f"rho_range < 1 (max observed - rho_H = {worst_gap:.1e}); constant/rank-one rho_H == 0: {zeros}")


# 7 -----------------------------------------------------------------------------------------

def _unit_target_error(score, trace):
    err = 0.0
    rows, cols = score.row_valid, score.col_valid
    for t in range(1, trace.n_steps + 1):
        s = score if trace.epsilons[t] == score.epsilon else score.with_epsilon(trace.epsilons[t])
        err = max(err, float(np.abs(row_sums(trace_plan(s, trace, t, t - 1))[rows] - 1).max()),
                  float(np.abs(col_sums(trace_plan(s, trace, t, t))[cols] - 1).max()))
    return err


def criterion_unit_targets():
    g = np.random.default_rng(7)
    err = 0.0
    for seed in range(30):
        L = int(g.integers(4, 96))
        rows = g.random(L) > 0.1
        rows[0] = True
        sched = [(2.0, 5), (1.0, 10)] if seed % 3 == 0 else None
        try:
            p = random_problem(L, int(g.integers(1, L)), d=8, T=15, R=2, seed=seed, row_mask=rows,
                               block=int(g.integers(4, 33)), schedule=sched)
        except ValueError:
            continue
        _, tr = p.forward()
        err = max(err, _unit_target_error(p.score(), tr))
    filler_mass, bridge = 0.0, 0.0
    for seed, (L, W, B) in enumerate([(12, 2, 4), (20, 3, 8), (9, 1, 3), (16, 16, 1)]):
        gg = np.random.default_rng(seed)
        aug = augment_dustbin(build_band_support(L, L, W), B)
        s = aug.support
        Qa = augment_tensors(gg.standard_normal((L, 8)), gg.standard_normal(8), B)
        Ka = augment_tensors(gg.standard_normal((L, 8)), gg.standard_normal(8), B)
        Va = augment_tensors(gg.standard_normal((L, 4)), np.zeros(4), B)
        fa = ScoreField(s, 1.0, q=Qa, k=Ka, block=8)
        manual = explicit_support(s.dense(), s.n_rows, s.n_cols, row_mask=s.row_active, col_mask=s.col_active)
        fm = ScoreField(manual, 1.0, q=Qa, k=Ka, block=8)
        ta, tm = solve(fa, 15, 2), solve(fm, 15, 2)
        err = max(err, _unit_target_error(fa, ta))
        for t in range(1, ta.n_steps + 1):
            P = trace_plan(fa, ta, t, t).dense()
            filler_mass = max(filler_mass, float(np.abs(P[aug.filler_rows]).sum() + np.abs(P[:, aug.filler_cols]).sum()))
        bridge = max(bridge, _dev(output(fa, ta, Va), output(fm, tm, Va)))
    ok = err <= 1e-12 and filler_mass == 0.0 and bridge <= 1e-12
    return emit(7, ok, f"unit targets: max marginal error {err:.1e} (tol 1e-12); filler mass {filler_mass}; "
                       f"dustbin vs explicit support {bridge:.1e} (tol 1e-12)")


# 8 -----------------------------------------------------------------------------------------

def criterion_gauge():
    same, fixed, unfixed_min = 0.0, 0.0, np.inf
    for seed in range(5):
        p = random_problem(64, 16, d=8, T=15, R=2, seed=seed, block=16)
        s = p.score()
        cen, raw = solve(s, 15, 2, centered=True), solve(s, 15, 2, centered=False)
        for t in range(cen.n_steps + 1):
            same = max(same, trace_plan(s, cen, t, t).max_abs_diff(trace_plan(s, raw, t, t)))
        for a, b in [(t, t - 1) for t in range(1, cen.n_steps + 1)] + [(17, 15), (12, 3)]:
            truth = trace_plan(s, raw, a, b, ungauged=False)
            fixed = max(fixed, truth.max_abs_diff(trace_plan(s, cen, a, b, ungauged=True)))
            if cen.log_gauge(a, b) != 0.0:
                unfixed_min = min(unfixed_min, truth.max_abs_diff(trace_plan(s, cen, a, b, ungauged=False)))
    ok = same <= 1e-12 and fixed <= 1e-12 and unfixed_min > 1e-12
    return emit(8, ok, f"gauge ledger: same-time {same:.1e}; mixed-time with e^(c_a-c_b) {fixed:.1e}; "
                       f"smallest mixed-time gap without it {unfixed_min:.1e} (must exceed 1e-12)")


# 9 -----------------------------------------------------------------------------------------

EXCLUDED = ("accelerator throughput", "protein-family screen and held-out metrics",
            "checkpoint contraction statistics")


def criterion_exclusions():
    readme = (ROOT / "README.md").read_text().lower()
    documented = all(item in readme for item in EXCLUDED)
    return emit(9, documented, "not reproducible at desk scale, documented in README and substituted by "
                               "criteria 1-8: " + "; ".join(EXCLUDED))


CRITERIA = [criterion_exactness, criterion_modes, criterion_bias, criterion_orbit, criterion_ledger,
            criterion_contraction, criterion_unit_targets, criterion_gauge, criterion_exclusions]


@pytest.mark.parametrize("criterion", CRITERIA, ids=lambda f: f.__name__.removeprefix("criterion_"))
def test_criterion(criterion):
    assert criterion()


if __name__ == "__main__":
    results = [c() for c in CRITERIA]
    sys.exit(0 if all(results) else 1)
