"""Exact reverse pass of the stopped-base refinement tail.

The surrogate output is ``O = A(u^(R), v^(R))`` where the tail duals are
recomputed from a stopped base pair.  Its cotangents satisfy

    v̄^(R)   = g_v
    ū^(R)   = g_u - P^(R,R) v̄^(R)
    v̄^(t-1) = -(P^(t,t-1))^T ū^(t)          t = R..1
    ū^(t-1) = -P^(t-1,t-1) v̄^(t-1)           t = R..2

with ``g_u``/``g_v`` the row/column sums of ``P^(R,R) * Z`` and
``Z_ij = <G_i, V_j>``.  The reverse pass is written in ungauged coordinates;
centered traces are translated through the gauge ledger.  Centering
pullbacks are omitted because the unit-target plans keep cotangent totals
equal at every centering boundary.

For ``R = 2`` the four staircase factors are row/column rescalings of
``P^(2,2)``, so the score cotangent of a tile needs one resident plan tile.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import UnsupportedDepth
from .sinkhorn import (
    DualTrace,
    ScoreField,
    TileField,
    plan_matvec,
    plan_rmatvec,
    plan_tile,
)


@dataclass
class CotangentSet:
    G: np.ndarray
    u_bar: dict[int, np.ndarray]
    v_bar: dict[int, np.ndarray]
    S_bar: TileField
    Q_bar: np.ndarray | None
    K_bar: np.ndarray | None
    V_bar: np.ndarray
    eta: tuple[np.ndarray, np.ndarray]
    g_u: np.ndarray
    g_v: np.ndarray
    stats: dict = field(default_factory=dict)

    @property
    def eta_norm(self) -> float:
        u, v = self.eta
        return float(np.sqrt(np.sum(u.astype(np.float64) ** 2) + np.sum(v.astype(np.float64) ** 2)))


@dataclass
class ModifierVectors:
    """Ungauged row/column modifiers of the ``R = 2`` staircase.

    ``alpha = exp(u1 - u2)``, ``beta = exp(v1 - v2)``, ``delta = exp(v0 - v2)``.
    The ``*_c`` fields are the same ratios of centered representatives and
    ``gauge_21 = exp(c2 - c1)``, ``gauge_10 = exp(c1 - c0)`` the ledger
    factors relating the two.
    """

    alpha: np.ndarray
    beta: np.ndarray
    delta: np.ndarray
    alpha_c: np.ndarray
    beta_c: np.ndarray
    delta_c: np.ndarray
    gauge_21: float
    gauge_10: float

    @classmethod
    def from_trace(cls, trace: DualTrace) -> "ModifierVectors":
        if trace.R != 2:
            raise UnsupportedDepth(f"modifier vectors need R = 2, trace has R = {trace.R}")
        T = trace.T
        (u0, v0), (u1, v1), (u2, v2) = (trace.tail(k) for k in range(3))
        c0, c1, c2 = (trace.gauge(T + k) for k in range(3))
        dt = u2.dtype.type
        alpha_c, beta_c, delta_c = np.exp(u1 - u2), np.exp(v1 - v2), np.exp(v0 - v2)
        # ungauged u = centered u + c, ungauged v = centered v - c
        return cls(
            alpha=alpha_c * dt(np.exp(c1 - c2)),
            beta=beta_c * dt(np.exp(c2 - c1)),
            delta=delta_c * dt(np.exp(c2 - c0)),
            alpha_c=alpha_c, beta_c=beta_c, delta_c=delta_c,
            gauge_21=float(np.exp(c2 - c1)), gauge_10=float(np.exp(c1 - c0)),
        )


def _tail_duals(trace: DualTrace):
    us = [trace.tail(k)[0] for k in range(trace.R + 1)]
    vs = [trace.tail(k)[1] for k in range(trace.R + 1)]
    return us, vs


def _accumulate_qkv(score: ScoreField, t, s_bar, p_ref, G, Q_bar, K_bar, V_bar):
    r0, r1, c0, c1 = t
    V_bar[c0:c1] += p_ref.T @ G[r0:r1]
    if Q_bar is not None:
        sc = score.dtype.type(score.scale)
        Q_bar[r0:r1] += (s_bar @ score.k[c0:c1]) * sc
        K_bar[c0:c1] += (s_bar.T @ score.q[r0:r1]) * sc


def _qkv_buffers(score: ScoreField, G, V):
    dt = score.dtype
    V_bar = np.zeros(V.shape, dtype=dt)
    if score.q is None:
        return None, None, V_bar
    return np.zeros(score.q.shape, dtype=dt), np.zeros(score.k.shape, dtype=dt), V_bar


def _terminal_sums(score: ScoreField, u, v, G, V):
    g_u = np.zeros(score.support.n_rows, dtype=score.dtype)
    g_v = np.zeros(score.support.n_cols, dtype=score.dtype)
    for t in score.schedule:
        r0, r1, c0, c1 = t
        pz = plan_tile(score, t, u, v) * (G[r0:r1] @ V[c0:c1].T)
        g_u[r0:r1] += pz.sum(axis=1)
        g_v[c0:c1] += pz.sum(axis=0)
    return g_u, g_v


def tail_adjoint_generic(score: ScoreField, trace: DualTrace, G, V) -> CotangentSet:
    """Reverse pass for any tail depth, forming each staircase plan tile directly."""
    G = np.asarray(G, dtype=score.dtype)
    V = np.asarray(V, dtype=score.dtype)
    R, T = trace.R, trace.T
    us, vs = _tail_duals(trace)
    lg = lambda a, b: trace.log_gauge(T + a, T + b)  # noqa: E731

    g_u, g_v = _terminal_sums(score, us[R], vs[R], G, V)
    u_bar: dict[int, np.ndarray] = {}
    v_bar: dict[int, np.ndarray] = {}
    if R == 0:
        u_bar[0], v_bar[0] = g_u, g_v
    else:
        v_bar[R] = g_v
        u_bar[R] = g_u - plan_matvec(score, us[R], vs[R], v_bar[R])
        for k in range(R, 0, -1):
            v_bar[k - 1] = -plan_rmatvec(score, us[k], vs[k - 1], u_bar[k], lg(k, k - 1))
            if k >= 2:
                u_bar[k - 1] = -plan_matvec(score, us[k - 1], vs[k - 1], v_bar[k - 1])

    Q_bar, K_bar, V_bar = _qkv_buffers(score, G, V)
    S_bar = TileField(score.schedule, (score.support.n_rows, score.support.n_cols))
    for t in score.schedule:
        r0, r1, c0, c1 = t
        p_ref = plan_tile(score, t, us[R], vs[R])
        s = p_ref * (G[r0:r1] @ V[c0:c1].T)
        for k in range(1, R + 1):
            s -= plan_tile(score, t, us[k], vs[k]) * v_bar[k][None, c0:c1]
            s -= plan_tile(score, t, us[k], vs[k - 1], lg(k, k - 1)) * u_bar[k][r0:r1, None]
        S_bar.tiles[t] = s
        _accumulate_qkv(score, t, s, p_ref, G, Q_bar, K_bar, V_bar)

    eta = (np.zeros_like(us[0]), v_bar[0]) if R > 0 else (g_u, g_v)
    return CotangentSet(G, u_bar, v_bar, S_bar, Q_bar, K_bar, V_bar, eta, g_u, g_v,
                        stats={"mode": "generic", "R": R})


def r2_score_cotangent_tile(p22, z, ub2, vb2, ub1, vb1, alpha, beta, delta) -> np.ndarray:
    """Score cotangent of one tile from the resident reference plan ``P^(2,2)``.

    All vector arguments are the tile slices (rows: ``ub2, ub1, alpha``;
    columns: ``vb2, vb1, beta, delta``), with ungauged modifiers.
    """
    a = alpha[:, None]
    bracket = (z - vb2[None, :] - beta[None, :] * ub2[:, None]
               - a * (beta * vb1)[None, :] - a * delta[None, :] * ub1[:, None])
    return p22 * bracket


def r2_four_plan_tile(p22, p21, p11, p10, z, ub2, vb2, ub1, vb1) -> np.ndarray:
    """Score cotangent of one tile from the four staircase factors."""
    return (p22 * z - p22 * vb2[None, :] - p21 * ub2[:, None]
            - p11 * vb1[None, :] - p10 * ub1[:, None])


def r2_backward(score: ScoreField, trace: DualTrace, G, V, mode: str = "one_reference") -> CotangentSet:
    """Streaming ``R = 2`` backward over the tile schedule.

    ``one_reference`` forms only ``P^(2,2)`` per tile and applies modifier
    vectors; ``direct_four_plan`` forms ``P^(2,2), P^(2,1), P^(1,1), P^(1,0)``
    separately.  Both run the same six sweeps.
    """
    if mode not in ("one_reference", "direct_four_plan"):
        raise ValueError(f"unknown mode {mode!r}")
    if trace.R != 2:
        raise UnsupportedDepth(f"{mode} backward needs R = 2, trace has R = {trace.R}")
    G = np.asarray(G, dtype=score.dtype)
    V = np.asarray(V, dtype=score.dtype)
    T = trace.T
    (u0, v0), (u1, v1), (u2, v2) = (trace.tail(k) for k in range(3))
    one_ref = mode == "one_reference"
    mod = ModifierVectors.from_trace(trace)
    lg21, lg10 = trace.log_gauge(T + 2, T + 1), trace.log_gauge(T + 1, T)
    al, be, de = mod.alpha, mod.beta, mod.delta
    n_rows, n_cols = score.support.n_rows, score.support.n_cols
    formed = {"P22": 0, "P21": 0, "P11": 0, "P10": 0}

    def p22(t):
        formed["P22"] += 1
        return plan_tile(score, t, u2, v2)

    def factor(name, t, ua, vb, log_g):
        formed[name] += 1
        return plan_tile(score, t, ua, vb, log_g)

    g_u, g_v = np.zeros(n_rows, dtype=score.dtype), np.zeros(n_cols, dtype=score.dtype)
    for t in score.schedule:
        r0, r1, c0, c1 = t
        pz = p22(t) * (G[r0:r1] @ V[c0:c1].T)
        g_u[r0:r1] += pz.sum(axis=1)
        g_v[c0:c1] += pz.sum(axis=0)

    vb2 = g_v
    ub2 = g_u.copy()
    for t in score.schedule:
        r0, r1, c0, c1 = t
        ub2[r0:r1] -= p22(t) @ vb2[c0:c1]

    vb1 = np.zeros(n_cols, dtype=score.dtype)
    for t in score.schedule:
        r0, r1, c0, c1 = t
        p = p22(t) * be[None, c0:c1] if one_ref else factor("P21", t, u2, v1, lg21)
        vb1[c0:c1] -= ub2[r0:r1] @ p

    ub1 = np.zeros(n_rows, dtype=score.dtype)
    for t in score.schedule:
        r0, r1, c0, c1 = t
        if one_ref:
            ub1[r0:r1] -= al[r0:r1] * (p22(t) @ (be * vb1)[c0:c1])
        else:
            ub1[r0:r1] -= factor("P11", t, u1, v1, 0.0) @ vb1[c0:c1]

    vb0 = np.zeros(n_cols, dtype=score.dtype)
    for t in score.schedule:
        r0, r1, c0, c1 = t
        if one_ref:
            vb0[c0:c1] -= de[c0:c1] * ((al * ub1)[r0:r1] @ p22(t))
        else:
            vb0[c0:c1] -= ub1[r0:r1] @ factor("P10", t, u1, v0, lg10)

    Q_bar, K_bar, V_bar = _qkv_buffers(score, G, V)
    S_bar = TileField(score.schedule, (n_rows, n_cols))
    for t in score.schedule:
        r0, r1, c0, c1 = t
        I, J = slice(r0, r1), slice(c0, c1)
        ref = p22(t)
        z = G[I] @ V[J].T
        if one_ref:
            s = r2_score_cotangent_tile(ref, z, ub2[I], vb2[J], ub1[I], vb1[J], al[I], be[J], de[J])
        else:
            s = r2_four_plan_tile(ref, factor("P21", t, u2, v1, lg21), factor("P11", t, u1, v1, 0.0),
                                  factor("P10", t, u1, v0, lg10), z, ub2[I], vb2[J], ub1[I], vb1[J])
        S_bar.tiles[t] = s
        _accumulate_qkv(score, t, s, ref, G, Q_bar, K_bar, V_bar)

    n_entries = score.support.n_edges
    n_factors = 1 if one_ref else 4
    stats = {
        "mode": mode,
        "tiles_formed": formed,
        "resident_plan_tiles": n_factors,
        "logical_plan_bytes": n_factors * n_entries * score.dtype.itemsize,
    }
    return CotangentSet(G, {2: ub2, 1: ub1}, {2: vb2, 1: vb1, 0: vb0}, S_bar, Q_bar, K_bar, V_bar,
                        (np.zeros_like(u0), vb0), g_u, g_v, stats)


def backprop_scores_to_qkv(S_bar, Q, K, epsilon: float):
    """Chain rule through ``S = Q K^T / (sqrt(d) eps)``."""
    S_bar = S_bar.dense() if isinstance(S_bar, TileField) else np.asarray(S_bar)
    Q, K = np.asarray(Q), np.asarray(K)
    sc = 1.0 / (np.sqrt(Q.shape[1]) * epsilon)
    return (S_bar @ K) * sc, (S_bar.T @ Q) * sc
