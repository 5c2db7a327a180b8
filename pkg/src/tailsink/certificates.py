"""Bias, tail-depth, projective-contraction and orbit certificates."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import MissingBaseTrace, NotApplicable, StageMismatch, UndefinedRatio
from .oracle import MAX_BPTT, DenseProblem, full_bptt_grad
from .problem import Problem, surrogate_gradient
from .sinkhorn import (
    DualTrace,
    ScoreField,
    half_step_plans,
    plan_matvec,
    plan_tile,
    score_for_step,
)

EXACT_DIAMETER_LIMIT = 256


# -- base-solve VJP and the a posteriori bias certificate ------------------------------------

def base_solve_vjp(score: ScoreField, trace: DualTrace, eta) -> dict[str, np.ndarray]:
    """Pull a cotangent of the stopped base pair back to ``Q`` and ``K``.

    Reverse sweep over the ``T`` base steps with the half-step Jacobians
    ``-P^(t,t)`` (column update) and ``-P^(t,t-1)`` (row update), applying
    the centering pullback explicitly since ``eta`` is arbitrary.
    """
    if score.q is None:
        raise ValueError("base_solve_vjp needs a factor-form score field")
    T = trace.T
    if len(trace.u) < T + 1:
        raise MissingBaseTrace(f"trace holds {len(trace.u) - 1} steps, base needs {T}")
    dt = score.dtype
    u_bar = np.asarray(eta[0], dtype=dt).copy()
    v_bar = np.asarray(eta[1], dtype=dt).copy()
    Q_bar = np.zeros(score.q.shape, dtype=dt)
    K_bar = np.zeros(score.k.shape, dtype=dt)
    rows = score.row_valid
    m = rows / rows.sum()
    for t in range(T, 0, -1):
        s_t = score_for_step(score, trace, t)
        if trace.centered:
            u_bar = u_bar + (m * (v_bar.sum() - u_bar.sum())).astype(dt)
        u_t, v_t, v_prev = trace.u[t], trace.v[t], trace.v[t - 1]
        kappa = trace.shifts[t]
        u_bar = u_bar - plan_matvec(s_t, u_t, v_t, v_bar)
        new_v_bar = np.zeros_like(v_bar)
        sc = dt.type(s_t.scale)
        for tile in s_t.schedule:
            r0, r1, c0, c1 = tile
            p_mix = plan_tile(s_t, tile, u_t, v_prev, kappa)
            new_v_bar[c0:c1] -= u_bar[r0:r1] @ p_mix
            s_bar = -(plan_tile(s_t, tile, u_t, v_t) * v_bar[None, c0:c1] + p_mix * u_bar[r0:r1, None])
            Q_bar[r0:r1] += (s_bar @ score.k[c0:c1]) * sc
            K_bar[c0:c1] += (s_bar.T @ score.q[r0:r1]) * sc
        u_bar, v_bar = np.zeros_like(u_bar), new_v_bar
    return {"Q": Q_bar, "K": K_bar, "V": np.zeros((score.k.shape[0], 0), dtype=dt)}


@dataclass
class BiasCertificate:
    R: int
    eta_norm: float
    c_max: float
    c_l2: float
    omitted: dict[str, np.ndarray] = field(repr=False)
    delta_g_max: float | None = None
    residual: float | None = None
    tolerance: float | None = None

    def row(self) -> dict:
        return {"R": self.R, "eta_norm": self.eta_norm, "c_norm": self.c_max, "c_l2": self.c_l2,
                "delta_g_max": self.delta_g_max, "residual": self.residual}


def _max_abs(d: dict[str, np.ndarray]) -> float:
    return max(float(np.abs(a).max()) if a.size else 0.0 for a in d.values())


def bias_certificate(problem: Problem, R: int | None = None, oracle: bool = True,
                     tolerance: float | None = None) -> BiasCertificate:
    """Measured base-state cotangent, its omitted-gradient VJP and, when the
    dense full-BPTT oracle is affordable, the residual of the exact identity
    ``g_full - g_surr = c_R``."""
    p = problem if R is None else problem.with_depth(R=R)
    if p.R < 0:
        raise ValueError("R must be >= 0")
    grads = surrogate_gradient(p, mode="generic")
    cot = grads.cotangents
    c = base_solve_vjp(p.score(), grads.trace.base(), cot.eta)
    c_vec = np.concatenate([c["Q"].ravel(), c["K"].ravel()]).astype(np.float64)
    cert = BiasCertificate(
        R=p.R, eta_norm=cot.eta_norm,
        c_max=float(np.abs(c_vec).max()) if c_vec.size else 0.0,
        c_l2=float(np.linalg.norm(c_vec)), omitted=c, tolerance=tolerance,
    )
    if oracle and max(p.support.n_rows, p.support.n_cols) <= MAX_BPTT:
        full = full_bptt_grad(DenseProblem.from_problem(p))
        delta = {k: full[k] - getattr(grads, k) for k in ("Q", "K", "V")}
        cert.delta_g_max = _max_abs(delta)
        cert.residual = max(_max_abs({"Q": delta["Q"] - c["Q"], "K": delta["K"] - c["K"]}),
                            _max_abs({"V": delta["V"]}))
    return cert


@dataclass
class TailDepthSelection:
    R: int | None
    trail: list
    feasible: bool
    tau: float


def first_feasible(measure: Callable[[int], float], tau: float, r_max: int,
                   cost: Callable[[int], float] | None = None) -> tuple[int | None, list[float]]:
    """Smallest ``R <= r_max`` with ``measure(R) <= tau``; stops at the first hit."""
    if not tau > 0:
        raise ValueError("tau must be positive")
    if r_max < 0:
        raise ValueError("r_max must be >= 0")
    if cost is not None:
        cs = [cost(r) for r in range(r_max + 1)]
        if any(a > b for a, b in zip(cs, cs[1:])):
            raise ValueError("cost must be nondecreasing in R")
    seen = []
    for r in range(r_max + 1):
        seen.append(measure(r))
        if seen[-1] <= tau:
            return r, seen
    return None, seen


def select_tail_depth(problem: Problem, tau: float, r_max: int, cost=None, *, norm: str = "max",
                      operator_bound: float | None = None) -> TailDepthSelection:
    """First tail depth whose omitted gradient is certified below ``tau``.

    With ``operator_bound`` (an upper bound on the base-solve VJP norm) the
    cheaper sufficient test ``operator_bound * ||eta_R|| <= tau`` is used.
    Returns ``R=None`` when no depth up to ``r_max`` qualifies.
    """
    if norm not in ("max", "l2"):
        raise ValueError("norm must be 'max' or 'l2'")
    trail: list[BiasCertificate] = []

    def measure(r):
        cert = bias_certificate(problem, r, oracle=False, tolerance=tau)
        trail.append(cert)
        if operator_bound is not None:
            return operator_bound * cert.eta_norm
        return cert.c_max if norm == "max" else cert.c_l2

    R, _ = first_feasible(measure, tau, r_max, cost)
    return TailDepthSelection(R, trail, R is not None, tau)


# -- projective contraction -------------------------------------------------------------------

@dataclass
class ContractionCertificate:
    block: int | tuple | None
    delta: float | None
    delta_T: float | None
    rho_H: float | None
    omega: float
    rho_range: float

    def row(self) -> dict:
        return {"block": self.block, "delta": self.delta, "rho_H": self.rho_H,
                "omega": self.omega, "rho_range": self.rho_range}


def _restrict(S, row_mask, col_mask, entry_mask):
    S = np.asarray(S, dtype=np.float64)
    rows = np.ones(S.shape[0], bool) if row_mask is None else np.asarray(row_mask, bool)
    cols = np.ones(S.shape[1], bool) if col_mask is None else np.asarray(col_mask, bool)
    block = S[np.ix_(rows, cols)]
    if block.size == 0:
        raise NotApplicable("empty active block")
    if entry_mask is not None and not np.asarray(entry_mask, bool)[np.ix_(rows, cols)].all():
        raise NotApplicable("masked hole inside the active block")
    if not np.isfinite(block).all():
        raise NotApplicable("active block is not strictly positive")
    return block


def projective_diameter(S: np.ndarray) -> float:
    """``max_{i,i',j,j'} S_ij + S_i'j' - S_ij' - S_i'j``, computed as the largest
    oscillation of a row difference ``S_i - S_i'``.

    Values at the rounding level of ``S`` are reported as exactly zero, so
    additively separable blocks (rank-one kernels) certify ``rho_H = 0``.
    """
    best = 0.0
    for i in range(S.shape[0]):
        d = S[i][None, :] - S
        best = max(best, float((d.max(axis=1) - d.min(axis=1)).max()))
    floor = 16 * np.finfo(np.float64).eps * max(float(np.abs(S).max()), 1.0)
    return 0.0 if best <= floor else best


def projective_coefficient(S_block, row_mask=None, col_mask=None, entry_mask=None, *,
                           block=None, exact_limit: int = EXACT_DIAMETER_LIMIT) -> ContractionCertificate:
    """Birkhoff-Hopf coefficient ``tanh(D(K)/4) tanh(D(K^T)/4)`` of ``K = exp(S)``
    plus the range bound ``tanh^2(Omega_S / 2)``.  Blocks larger than
    ``exact_limit`` get the range bound only."""
    S = _restrict(S_block, row_mask, col_mask, entry_mask)
    omega = float(S.max() - S.min())
    rho_range = math.tanh(omega / 2) ** 2
    if max(S.shape) > exact_limit:
        return ContractionCertificate(block, None, None, None, omega, rho_range)
    dk = projective_diameter(S)
    dkt = projective_diameter(S.T)
    rho = math.tanh(dk / 4) * math.tanh(dkt / 4)
    return ContractionCertificate(block, dk, dkt, rho, omega, rho_range)


def range_bound(S_raw, epsilon: float) -> float:
    """``tanh^2(Omega / (2 eps))`` for unscaled logits."""
    S_raw = np.asarray(S_raw, dtype=np.float64)
    return math.tanh(float(S_raw.max() - S_raw.min()) / (2 * epsilon)) ** 2


def oscillation(w) -> float:
    w = np.asarray(w, dtype=np.float64)
    return float(w.max() - w.min())


def hilbert_distance(x, y) -> float:
    """Hilbert projective distance of two positive vectors, via log ratios."""
    return oscillation(np.log(np.asarray(x, dtype=np.float64)) - np.log(np.asarray(y, dtype=np.float64)))


def scaling_map_log(S, log_c) -> np.ndarray:
    """``log T(c)`` for ``T(c) = 1 / (K^T (1 / (K c)))`` with unit marginals."""
    from scipy.special import logsumexp

    S = np.asarray(S, dtype=np.float64)
    row = logsumexp(S + np.asarray(log_c)[None, :], axis=1)
    return -logsumexp(S - row[:, None], axis=0)


def measure_hilbert_contraction(S_block, c, c_prime, *, log: bool = False, atol: float = 1e-12) -> float:
    """Observed ratio ``d_H(T c, T c') / d_H(c, c')``; ``log=True`` takes log-scalings."""
    lc = np.asarray(c, dtype=np.float64) if log else np.log(np.asarray(c, dtype=np.float64))
    lcp = np.asarray(c_prime, dtype=np.float64) if log else np.log(np.asarray(c_prime, dtype=np.float64))
    before = oscillation(lc - lcp)
    if before <= atol:
        raise UndefinedRatio("inputs are proportional; Hilbert distance is zero")
    tc, tcp = scaling_map_log(S_block, lc), scaling_map_log(S_block, lcp)
    after = oscillation(tc - tcp)
    # below the rounding level of the mapped logs the two rays coincide
    if after <= 16 * np.finfo(np.float64).eps * max(np.abs(tc).max(), np.abs(tcp).max(), 1.0):
        return 0.0
    return after / before


def block_certificates(score: ScoreField, block: int = 128) -> list[ContractionCertificate]:
    """Certificates for each row block of the support, restricted to the
    rectangle of columns reached by every row in it (strictly positive part)."""
    out = []
    sup = score.support
    dense = score.dense()
    for b, r0 in enumerate(range(0, sup.n_rows, block)):
        rows = np.arange(r0, min(r0 + block, sup.n_rows))
        rows = rows[sup.row_active[rows]]
        if rows.size == 0:
            continue
        sub = dense[rows]
        cols = np.isfinite(sub).all(axis=0)
        if not cols.any():
            continue
        out.append(projective_coefficient(sub[:, cols], block=b))
    return out


def oscillation_contraction(trace: DualTrace) -> list[float]:
    """Per-step ratios ``osc(v^(t+1) - v^(t)) / osc(v^(t) - v^(t-1))``."""
    v = trace.v
    diffs = [oscillation(v[t + 1] - v[t]) for t in range(1, len(v) - 1)]
    return [b / a for a, b in zip(diffs, diffs[1:]) if a > 0]


def summarize(values: Sequence[float]) -> dict:
    a = np.asarray([x for x in values if x is not None], dtype=np.float64)
    if a.size == 0:
        return {"count": 0, "median": None, "p95": None, "max": None}
    return {"count": int(a.size), "median": float(np.median(a)),
            "p95": float(np.percentile(a, 95)), "max": float(a.max())}


# -- transport orbit ------------------------------------------------------------------------

@dataclass
class OrbitReport:
    reference: tuple[int, int]
    stage: int
    errors: dict[tuple[int, int], float]

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)


def orbit_reconstruct(score: ScoreField, trace: DualTrace, reference: tuple[int, int] | None = None,
                      plans: Sequence[tuple[int, int]] | None = None) -> OrbitReport:
    """Rebuild staircase plans as ``diag(r) P* diag(s)`` from one reference plan.

    Plans are taken in ungauged coordinates and compared with their direct
    evaluation in the log domain; the result is the largest absolute
    log-plan discrepancy per plan.  Only plans built from the reference's
    temperature stage may be requested.
    """
    n = trace.n_steps
    a_ref, b_ref = reference or (n, n)
    stage = trace.stage(a_ref)
    if plans is None:
        plans = [pb for pb in half_step_plans(n) if trace.stage(pb[0]) == stage]
    bad = [pb for pb in plans if trace.stage(pb[0]) != stage]
    if bad:
        raise StageMismatch(f"plans {bad[:4]} use a different temperature stage than the reference")

    s = score_for_step(score, trace, a_ref)
    dt = s.dtype.type
    # ungauged representatives
    uu = lambda a: trace.u[a] + dt(trace.gauge(a))  # noqa: E731
    vv = lambda b: trace.v[b] - dt(trace.gauge(b))  # noqa: E731
    u_ref, v_ref = uu(a_ref), vv(b_ref)
    ref_tiles = {t: plan_tile(s, t, u_ref, v_ref) for t in s.schedule}
    errors = {}
    for a, b in plans:
        ua, vb = uu(a), vv(b)
        r, c = np.exp(ua - u_ref), np.exp(vb - v_ref)
        worst = 0.0
        for t in s.schedule:
            r0, r1, c0, c1 = t
            m = s.mask(t)
            direct = plan_tile(s, t, ua, vb)
            recon = ref_tiles[t] * r[r0:r1, None] * c[None, c0:c1]
            with np.errstate(divide="ignore"):
                err = np.abs(np.log(direct[m].astype(np.float64)) - np.log(recon[m].astype(np.float64)))
            if err.size:
                worst = max(worst, float(err.max()))
        errors[(a, b)] = worst
    return OrbitReport((a_ref, b_ref), stage, errors)
