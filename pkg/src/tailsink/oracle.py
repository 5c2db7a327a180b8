"""Dense reference path and independent gradient oracles.

Nothing here reuses the blockwise kernels: scores are dense ``L x L``
matrices with ``-inf`` off the support, reductions go through
``scipy.special.logsumexp``, and the analytic reverse pass applies the
centering pullback explicitly at every full step instead of relying on it
vanishing.  Everything runs in float64 and single-threaded.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .errors import SizeCapExceeded
from .losses import LossSpec
from .sinkhorn import DualTrace

MAX_DENSE = 512
MAX_BPTT = 256


@dataclass(eq=False)
class DenseProblem:
    Q: np.ndarray
    K: np.ndarray
    V: np.ndarray
    mask: np.ndarray
    loss: LossSpec
    epsilon: float = 1.0
    T: int = 15
    R: int = 2
    schedule: list[tuple[float, int]] | None = None

    def __post_init__(self):
        if max(self.mask.shape) > MAX_DENSE:
            raise SizeCapExceeded(f"dense oracle is capped at L <= {MAX_DENSE}")
        self.Q = np.asarray(self.Q, dtype=np.float64)
        self.K = np.asarray(self.K, dtype=np.float64)
        self.V = np.asarray(self.V, dtype=np.float64)
        self.mask = np.asarray(self.mask, dtype=bool)
        self.rows = self.mask.any(axis=1)
        self.cols = self.mask.any(axis=0)

    @classmethod
    def from_problem(cls, p) -> "DenseProblem":
        sched = None if p.schedule is None else list(p.schedule.stages)
        if max(p.support.n_rows, p.support.n_cols) > MAX_DENSE:
            raise SizeCapExceeded(f"dense oracle is capped at L <= {MAX_DENSE}")
        return cls(p.Q, p.K, p.V, p.support.dense(), p.loss, p.epsilon, p.T, p.R, sched)

    def step_epsilons(self) -> list[float]:
        base = self.schedule or [(self.epsilon, self.T)]
        return [e for e, n in base for _ in range(n)] + [self.epsilon] * self.R

    def with_(self, **kw) -> "DenseProblem":
        fields = dict(Q=self.Q, K=self.K, V=self.V, mask=self.mask, loss=self.loss,
                      epsilon=self.epsilon, T=self.T, R=self.R, schedule=self.schedule)
        fields.update(kw)
        return DenseProblem(**fields)


def raw_scores(Q, K) -> np.ndarray:
    return (Q @ K.T) / math.sqrt(Q.shape[1])


def _half(S, mask, w, axis):
    x = np.where(mask, S + (w[None, :] if axis == 1 else w[:, None]), -np.inf)
    return -logsumexp(x, axis=axis)


def _step(S, mask, v_prev, rows, cols, centered):
    u_hat = np.where(rows, _half(S, mask, v_prev, 1), 0.0)
    v_hat = np.where(cols, _half(S, mask, u_hat, 0), 0.0)
    kappa = u_hat[rows].mean() if centered else 0.0
    return u_hat, v_hat, np.where(rows, u_hat - kappa, 0.0), np.where(cols, v_hat + kappa, 0.0), kappa


def _plan(S, mask, u, v):
    return np.where(mask, np.exp(np.where(mask, S + u[:, None] + v[None, :], 0.0)), 0.0)


def _run(p: DenseProblem, Sraw, start=None, steps=None, centered=True):
    """Run full steps; returns per-step records and the final (u, v)."""
    eps = p.step_epsilons()
    first = 0 if start is None else p.T
    last = len(eps) if steps is None else steps
    u = np.zeros(p.mask.shape[0])
    v = np.zeros(p.mask.shape[1]) if start is None else start[1]
    if start is not None:
        u = start[0]
    recs = []
    for t in range(first, last):
        S = Sraw / eps[t]
        u_hat, v_hat, u_new, v_new, kappa = _step(S, p.mask, v, p.rows, p.cols, centered)
        recs.append(dict(eps=eps[t], S=S, v_prev=v, u_hat=u_hat, v_hat=v_hat, u=u_new, v=v_new, kappa=kappa))
        u, v = u_new, v_new
    return recs, (u, v)


def dense_forward(p: DenseProblem, centered: bool = True, base=None):
    """Surrogate output and trace.  ``base`` freezes the stopped pair."""
    Sraw = raw_scores(p.Q, p.K)
    if base is None:
        recs, _ = _run(p, Sraw, centered=centered)
        u0 = [np.zeros(p.mask.shape[0])]
        v0 = [np.zeros(p.mask.shape[1])]
        shifts, epss = [0.0], [p.epsilon]
    else:
        recs, _ = _run(p, Sraw, start=base, centered=centered)
        u0, v0 = [base[0]], [base[1]]
        shifts, epss = [0.0], [p.epsilon]
    trace = DualTrace(u0 + [r["u"] for r in recs], v0 + [r["v"] for r in recs],
                      shifts + [float(r["kappa"]) for r in recs], epss + [r["eps"] for r in recs],
                      p.T if base is None else 0, centered)
    u, v = trace.u[-1], trace.v[-1]
    O = _plan(Sraw / p.epsilon, p.mask, u, v) @ p.V
    return O, trace


def base_pair(p: DenseProblem, centered: bool = True):
    _, pair = _run(p, raw_scores(p.Q, p.K), steps=p.T, centered=centered)
    return pair


def surrogate_loss(p: DenseProblem, base) -> float:
    O, _ = dense_forward(p, base=base)
    return p.loss.value_and_grad(O, p.V)[0]


def full_loss(p: DenseProblem) -> float:
    O, _ = dense_forward(p)
    return p.loss.value_and_grad(O, p.V)[0]


def finite_diff_grad(p: DenseProblem, wrt: str, h: float = 1e-5, variant: str = "surrogate",
                     index=None, order: int = 2) -> np.ndarray:
    """Central-difference gradient of the loss with respect to ``Q``, ``K`` or ``V``.

    ``variant="surrogate"`` freezes the base pair at its unperturbed value;
    ``variant="full"`` re-solves the base for every perturbation.  The step
    for entry ``x`` is ``h * (1 + |x|)``.  ``index`` restricts evaluation to
    the given flat indices and returns only those entries.
    """
    if wrt not in ("Q", "K", "V"):
        raise ValueError("wrt must be Q, K or V")
    if variant not in ("surrogate", "full"):
        raise ValueError("variant must be surrogate or full")
    if order not in (2, 4):
        raise ValueError("order must be 2 or 4")
    if not h > 1e3 * np.finfo(np.float64).eps:
        raise ValueError(f"step h={h} is below what float64 central differences can resolve")
    base = base_pair(p) if variant == "surrogate" else None
    x0 = getattr(p, wrt)
    flat = np.arange(x0.size) if index is None else np.asarray(index).ravel()

    def f(x):
        q = p.with_(**{wrt: x})
        return surrogate_loss(q, base) if base is not None else full_loss(q)

    out = np.empty(flat.size)
    for n, idx in enumerate(flat):
        x = x0.copy()
        xi = x.flat[idx]
        hi = h * (1.0 + abs(xi))

        def at(k):
            x.flat[idx] = xi + k * hi
            return f(x)

        if order == 2:
            out[n] = (at(1) - at(-1)) / (2 * hi)
        else:
            out[n] = (-at(2) + 8 * at(1) - 8 * at(-1) + at(-2)) / (12 * hi)
    return out.reshape(x0.shape) if index is None else out


def full_bptt_grad(p: DenseProblem, stop_base: bool = False, centered: bool = True) -> dict[str, np.ndarray]:
    """Analytic reverse pass through the base solve and the tail.

    With ``stop_base=True`` the sweep ends at the stopped pair, giving the
    surrogate gradient; ``eta`` is then the cotangent of that pair.
    """
    if max(p.mask.shape) > MAX_BPTT:
        raise SizeCapExceeded(f"full BPTT oracle is capped at L <= {MAX_BPTT}")
    Sraw = raw_scores(p.Q, p.K)
    recs, (u, v) = _run(p, Sraw, centered=centered)
    P = _plan(Sraw / p.epsilon, p.mask, u, v)
    O = P @ p.V
    _, G, V_direct = p.loss.value_and_grad(O, p.V)
    PZ = P * (G @ p.V.T)
    S_bar = PZ / p.epsilon
    V_bar = P.T @ G + (0.0 if V_direct is None else V_direct)
    u_bar, v_bar = PZ.sum(axis=1), PZ.sum(axis=0)
    m = p.rows / p.rows.sum()
    stop = p.T if stop_base else 0
    for t in range(len(recs) - 1, stop - 1, -1):
        r = recs[t]
        if centered:
            u_bar = u_bar + m * (v_bar.sum() - u_bar.sum())
        P_tt = _plan(r["S"], p.mask, r["u_hat"], r["v_hat"])
        u_bar = u_bar - P_tt @ v_bar
        S_bar -= P_tt * v_bar[None, :] / r["eps"]
        P_mix = _plan(r["S"], p.mask, r["u_hat"], r["v_prev"])
        S_bar -= P_mix * u_bar[:, None] / r["eps"]
        u_bar, v_bar = np.zeros_like(u_bar), -P_mix.T @ u_bar
    sc = 1.0 / math.sqrt(p.Q.shape[1])
    return {"Q": S_bar @ p.K * sc, "K": S_bar.T @ p.Q * sc, "V": V_bar,
            "eta": (u_bar, v_bar), "S_bar": S_bar}
