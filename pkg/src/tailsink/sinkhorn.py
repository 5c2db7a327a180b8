"""Blockwise log-domain Sinkhorn on a fixed active support.

Everything here streams over the tiles of a :class:`TileSchedule`.  Scores
are formed per tile from the ``Q``/``K`` factors and never stored globally;
half-step reductions use an online max-shifted logsumexp in ascending tile
order, so repeated runs are bit-identical.

Dual potentials follow the unit-target updates

    u_i = -log sum_{j in row i} exp(S_ij + v_j)
    v_j = -log sum_{i in col j} exp(S_ij + u_i)

applied u-then-v per full step.  With centering on, every full step ends by
shifting ``(u, v) -> (u - c, v + c)`` with ``c`` the mean of ``u`` over valid
queries; the per-step shifts are kept in the trace so that mixed-time plans
can be translated back to ungauged coordinates.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterator

import numpy as np

from .errors import InfeasibleSupport, InvalidTemperature, MissingBaseTrace
from .support import SupportMask, TileSchedule, tile_schedule

Tile = tuple[int, int, int, int]


@dataclass(frozen=True)
class EpsSchedule:
    """Continuation schedule ``eps_1 >= ... >= eps_S`` with ``T_s`` steps each."""

    stages: tuple[tuple[float, int], ...]

    def __post_init__(self):
        eps = [e for e, _ in self.stages]
        if any(e <= 0 for e in eps):
            raise InvalidTemperature("schedule temperatures must be positive")
        if any(a < b for a, b in zip(eps, eps[1:])):
            raise ValueError("schedule temperatures must be non-increasing")
        if any(n < 0 for _, n in self.stages):
            raise ValueError("stage iteration counts must be >= 0")

    @classmethod
    def single(cls, epsilon: float, T: int) -> "EpsSchedule":
        return cls(((float(epsilon), int(T)),))

    @property
    def T(self) -> int:
        return sum(n for _, n in self.stages)

    @property
    def final(self) -> float:
        return self.stages[-1][0]

    def step_epsilons(self) -> list[float]:
        return [e for e, n in self.stages for _ in range(n)]


class ScoreField:
    """Scaled scores ``S = S_raw / eps`` restricted to an active support.

    Either built from factors (``S_raw = Q K^T / sqrt(d)``) or from dense
    values.  With ``raw=False`` dense values are taken as already scaled.
    """

    def __init__(self, support: SupportMask, epsilon: float = 1.0, *, q=None, k=None,
                 values=None, raw: bool = True, block: int = 64, schedule: TileSchedule | None = None):
        if not epsilon > 0:
            raise InvalidTemperature(f"epsilon must be positive, got {epsilon}")
        if (q is None) == (values is None):
            raise ValueError("give either q/k factors or dense values")
        self.support = support
        self.epsilon = float(epsilon)
        self.raw = raw
        self.block = block
        if q is not None:
            q, k = np.asarray(q), np.asarray(k)
            if q.shape[1] != k.shape[1]:
                raise ValueError("Q and K must share the head dimension")
            if q.shape[0] != support.n_rows or k.shape[0] != support.n_cols:
                raise ValueError("Q/K row counts do not match the support")
            self.q, self.k, self.values = q, k, None
            self.dtype = np.result_type(q, k)
        else:
            values = np.asarray(values)
            if values.shape != (support.n_rows, support.n_cols):
                raise ValueError("values shape does not match the support")
            self.q = self.k = None
            self.values = values
            self.dtype = values.dtype
        self._schedule = schedule
        self._masks: dict[Tile, np.ndarray] = {}

    @property
    def d(self) -> int | None:
        return None if self.q is None else self.q.shape[1]

    @property
    def scale(self) -> float:
        """Factor mapping ``Q K^T`` (or dense values) to scaled scores."""
        if self.q is not None:
            return 1.0 / (math.sqrt(self.d) * self.epsilon)
        return 1.0 / self.epsilon if self.raw else 1.0

    @property
    def schedule(self) -> TileSchedule:
        if self._schedule is None:
            self._schedule = tile_schedule(self.support, self.block)
        return self._schedule

    def with_epsilon(self, epsilon: float) -> "ScoreField":
        if self.values is not None and not self.raw and epsilon != self.epsilon:
            raise ValueError("pre-scaled values cannot be rescaled")
        out = ScoreField(self.support, epsilon, q=self.q, k=self.k, values=self.values,
                         raw=self.raw, block=self.block, schedule=self._schedule)
        out._masks = self._masks
        return out

    def mask(self, t: Tile) -> np.ndarray:
        m = self._masks.get(t)
        if m is None:
            m = self._masks[t] = self.support.tile_mask(*t)
        return m

    def tile(self, t: Tile) -> np.ndarray:
        r0, r1, c0, c1 = t
        if self.q is not None:
            s = self.q[r0:r1] @ self.k[c0:c1].T
        else:
            s = self.values[r0:r1, c0:c1]
        return s * self.dtype.type(self.scale)

    def dense(self) -> np.ndarray:
        """Dense scaled scores with ``-inf`` off the support (small problems only)."""
        out = np.full((self.support.n_rows, self.support.n_cols), -np.inf, dtype=self.dtype)
        for t in self.schedule:
            r0, r1, c0, c1 = t
            out[r0:r1, c0:c1] = np.where(self.mask(t), self.tile(t), -np.inf)
        return out

    @cached_property
    def row_valid(self) -> np.ndarray:
        return self.support.row_active

    @cached_property
    def col_valid(self) -> np.ndarray:
        return self.support.col_active


def scaled_scores(Q, K, epsilon: float, support: SupportMask, block: int = 64) -> ScoreField:
    return ScoreField(support, epsilon, q=Q, k=K, block=block)


@dataclass
class TileField:
    """Tile-keyed storage for a matrix living on the active support."""

    schedule: TileSchedule
    shape: tuple[int, int]
    tiles: dict[Tile, np.ndarray] = field(default_factory=dict)

    def dense(self) -> np.ndarray:
        dtype = next(iter(self.tiles.values())).dtype if self.tiles else np.float64
        out = np.zeros(self.shape, dtype=dtype)
        for (r0, r1, c0, c1), a in self.tiles.items():
            out[r0:r1, c0:c1] = a
        return out

    def max_abs(self) -> float:
        return max((float(np.abs(a).max()) for a in self.tiles.values()), default=0.0)

    def max_abs_diff(self, other: "TileField") -> float:
        return max((float(np.abs(a.astype(np.float64) - other.tiles[t]).max())
                    for t, a in self.tiles.items()), default=0.0)


@dataclass
class DualTrace:
    """All dual iterates of a base solve plus tail, with the gauge ledger.

    Index ``t`` runs over full steps: ``0`` is the cold start, ``T`` is the
    stopped base pair and ``T + k`` is tail step ``k``.  ``shifts[t]`` is the
    centering constant subtracted from ``u`` at step ``t`` (zero when
    uncentered) and ``epsilons[t]`` the temperature step ``t`` used.
    """

    u: list[np.ndarray]
    v: list[np.ndarray]
    shifts: list[float]
    epsilons: list[float]
    T: int
    centered: bool = True

    @property
    def R(self) -> int:
        return len(self.u) - 1 - self.T

    @property
    def n_steps(self) -> int:
        return len(self.u) - 1

    def gauge(self, t: int) -> float:
        """Cumulative ledger ``c_t``: centered = ungauged shifted by ``Gamma_{c_t}``."""
        return float(np.sum(np.asarray(self.shifts[1:t + 1], dtype=np.float64)))

    def stage(self, t: int) -> int:
        """Temperature stage of step ``t`` (consecutive steps sharing one epsilon)."""
        eps = self.epsilons[1:max(t, 1) + 1]
        return sum(a != b for a, b in zip(eps, eps[1:]))

    def tail(self, k: int) -> tuple[np.ndarray, np.ndarray]:
        return self.u[self.T + k], self.v[self.T + k]

    @property
    def base_pair(self) -> tuple[np.ndarray, np.ndarray]:
        return self.tail(0)

    def log_gauge(self, a: int, b: int) -> float:
        """``log`` of the factor turning a centered ``(a, b)`` plan into the ungauged one."""
        return self.gauge(a) - self.gauge(b)

    def base(self) -> "DualTrace":
        return DualTrace(self.u[:self.T + 1], self.v[:self.T + 1], self.shifts[:self.T + 1],
                         self.epsilons[:self.T + 1], self.T, self.centered)


# -- tile primitives ---------------------------------------------------------------------------

def _masked(score: ScoreField, t: Tile, add_rows, add_cols, log_g: float = 0.0) -> np.ndarray:
    r0, r1, c0, c1 = t
    x = score.tile(t)
    if add_rows is not None:
        x = x + add_rows[r0:r1, None]
    if add_cols is not None:
        x = x + add_cols[None, c0:c1]
    if log_g:
        x = x + x.dtype.type(log_g)
    return np.where(score.mask(t), x, -np.inf)


def plan_tile(score: ScoreField, t: Tile, ua, vb, log_g: float = 0.0) -> np.ndarray:
    """``exp(S + u_a + v_b + log_g)`` on the tile, exactly zero off the support."""
    return np.exp(_masked(score, t, ua, vb, log_g))


def _online_lse(score: ScoreField, w: np.ndarray, axis: int) -> np.ndarray:
    n = score.support.n_rows if axis == 1 else score.support.n_cols
    m = np.full(n, -np.inf, dtype=score.dtype)
    s = np.zeros(n, dtype=score.dtype)
    tiles = score.schedule.tiles if axis == 1 else score.schedule.col_order()
    for t in tiles:
        r0, r1, c0, c1 = t
        if axis == 1:
            x = _masked(score, t, None, w)
            sl = slice(r0, r1)
        else:
            x = _masked(score, t, w, None).T
            sl = slice(c0, c1)
        mt = x.max(axis=1)
        new = np.maximum(m[sl], mt)
        safe = np.where(np.isfinite(new), new, 0).astype(score.dtype)
        s[sl] = s[sl] * np.exp(m[sl] - safe) + np.exp(x - safe[:, None]).sum(axis=1)
        m[sl] = new
    with np.errstate(divide="ignore"):
        return m + np.log(s)


def row_half_step(score: ScoreField, v: np.ndarray) -> np.ndarray:
    """``u_i = -logsumexp_j (S_ij + v_j)`` over active edges; zero on inactive rows."""
    lse = _online_lse(score, np.asarray(v, dtype=score.dtype), axis=1)
    valid = score.row_valid
    if not np.isfinite(lse[valid]).all():
        raise InfeasibleSupport("active row without active edges")
    return np.where(valid, -lse, 0).astype(score.dtype)


def col_half_step(score: ScoreField, u: np.ndarray) -> np.ndarray:
    """Column analogue of :func:`row_half_step`."""
    lse = _online_lse(score, np.asarray(u, dtype=score.dtype), axis=0)
    valid = score.col_valid
    if not np.isfinite(lse[valid]).all():
        raise InfeasibleSupport("active column without active edges")
    return np.where(valid, -lse, 0).astype(score.dtype)


def center(u: np.ndarray, v: np.ndarray, row_valid: np.ndarray, col_valid=None):
    """Return ``(u - c, v + c, c)`` with ``c`` the mean of ``u`` over valid queries."""
    if not row_valid.any():
        raise ValueError("centering needs at least one valid query")
    col_valid = np.ones(v.shape, dtype=bool) if col_valid is None else col_valid
    c = u[row_valid].mean(dtype=u.dtype)
    return np.where(row_valid, u - c, u), np.where(col_valid, v + c, v), c


def sinkhorn_step(score: ScoreField, v_prev: np.ndarray, centered: bool = True):
    u = row_half_step(score, v_prev)
    v = col_half_step(score, u)
    if not centered:
        return u, v, score.dtype.type(0)
    return center(u, v, score.row_valid, score.col_valid)


def _new_trace(score: ScoreField, centered: bool) -> DualTrace:
    z_u = np.zeros(score.support.n_rows, dtype=score.dtype)
    z_v = np.zeros(score.support.n_cols, dtype=score.dtype)
    return DualTrace([z_u], [z_v], [0.0], [score.epsilon], 0, centered)


def stopped_base_solve(score: ScoreField, T: int, schedule: EpsSchedule | None = None,
                       centered: bool = True) -> DualTrace:
    """Run ``T`` full steps from the cold start ``u = v = 0``.

    ``score`` carries the raw scores; stage ``s`` of ``schedule`` uses
    ``S_raw / eps_s``.  Without a schedule every step runs at ``score.epsilon``.
    """
    if T < 0:
        raise ValueError("T must be >= 0")
    schedule = schedule or EpsSchedule.single(score.epsilon, T)
    if schedule.T != T:
        raise ValueError(f"schedule covers {schedule.T} steps, expected T={T}")
    trace = _new_trace(score, centered)
    stage_score = score
    for eps in schedule.step_epsilons():
        if eps != stage_score.epsilon:
            stage_score = score.with_epsilon(eps)
        u, v, c = sinkhorn_step(stage_score, trace.v[-1], centered)
        trace.u.append(u)
        trace.v.append(v)
        trace.shifts.append(float(c))
        trace.epsilons.append(eps)
    trace.T = T
    return trace


def tail_refine(score: ScoreField, base: DualTrace, R: int) -> DualTrace:
    """Append ``R`` refinement steps at ``score.epsilon`` to a stopped base trace."""
    if R < 0:
        raise ValueError("R must be >= 0")
    if base.R != 0:
        base = base.base()
    out = DualTrace(list(base.u), list(base.v), list(base.shifts), list(base.epsilons),
                    base.T, base.centered)
    for _ in range(R):
        u, v, c = sinkhorn_step(score, out.v[-1], out.centered)
        out.u.append(u)
        out.v.append(v)
        out.shifts.append(float(c))
        out.epsilons.append(score.epsilon)
    return out


def solve(score: ScoreField, T: int, R: int, schedule: EpsSchedule | None = None,
          centered: bool = True) -> DualTrace:
    """Stopped base solve followed by the refinement tail (tail at ``score.epsilon``)."""
    if schedule is not None and schedule.final != score.epsilon:
        raise ValueError("the tail runs at the final schedule temperature")
    return tail_refine(score, stopped_base_solve(score, T, schedule, centered), R)


def score_for_step(score: ScoreField, trace: DualTrace, t: int) -> ScoreField:
    eps = trace.epsilons[t]
    return score if eps == score.epsilon else score.with_epsilon(eps)


# -- plans and sweeps --------------------------------------------------------------------------

def staircase_plan(score: ScoreField, ua, vb, log_gauge: float = 0.0) -> TileField:
    """Plan ``exp(S + u_a + v_b)`` times ``exp(log_gauge)``, tile by tile.

    ``log_gauge = c_a - c_b`` recovers the ungauged mixed-time plan from
    centered representatives; it is zero for same-time plans.
    """
    out = TileField(score.schedule, (score.support.n_rows, score.support.n_cols))
    for t in score.schedule:
        out.tiles[t] = plan_tile(score, t, ua, vb, log_gauge)
    return out


def trace_plan(score: ScoreField, trace: DualTrace, a: int, b: int, ungauged: bool = True) -> TileField:
    """Plan ``P^(a,b)`` from trace indices ``a`` (rows) and ``b`` (columns)."""
    log_g = trace.log_gauge(a, b) if ungauged else 0.0
    return staircase_plan(score, trace.u[a], trace.v[b], log_g)


def half_step_plans(n_steps: int) -> Iterator[tuple[int, int]]:
    """Index pairs ``(t, t-1)`` and ``(t, t)`` of every half-step plan, in order."""
    for t in range(1, n_steps + 1):
        yield (t, t - 1)
        yield (t, t)


def plan_matvec(score: ScoreField, ua, vb, x, log_g: float = 0.0) -> np.ndarray:
    """``P x`` with ``P = exp(S + u_a + v_b + log_g)``."""
    y = np.zeros(score.support.n_rows, dtype=score.dtype)
    for t in score.schedule:
        r0, r1, c0, c1 = t
        y[r0:r1] += plan_tile(score, t, ua, vb, log_g) @ x[c0:c1]
    return y


def plan_rmatvec(score: ScoreField, ua, vb, y, log_g: float = 0.0) -> np.ndarray:
    """``P^T y`` with ``P = exp(S + u_a + v_b + log_g)``."""
    x = np.zeros(score.support.n_cols, dtype=score.dtype)
    for t in score.schedule:
        r0, r1, c0, c1 = t
        x[c0:c1] += y[r0:r1] @ plan_tile(score, t, ua, vb, log_g)
    return x


def apply_transport(score: ScoreField, u, v, V) -> np.ndarray:
    """Raw transport output ``O_i = sum_j P_ij V_j``; rows are not renormalized."""
    V = np.asarray(V, dtype=score.dtype)
    if V.shape[0] != score.support.n_cols:
        raise ValueError("V must have one row per key")
    O = np.zeros((score.support.n_rows, V.shape[1]), dtype=score.dtype)
    for t in score.schedule:
        r0, r1, c0, c1 = t
        O[r0:r1] += plan_tile(score, t, u, v) @ V[c0:c1]
    return O


def output(score: ScoreField, trace: DualTrace, V) -> np.ndarray:
    u, v = trace.u[-1], trace.v[-1]
    return apply_transport(score, u, v, V)


def require_base(trace: DualTrace, T: int | None = None) -> None:
    if len(trace.u) < trace.T + 1 or (T is not None and trace.T < T):
        raise MissingBaseTrace("trace does not hold the base iterates")


def row_sums(plan: TileField) -> np.ndarray:
    out = np.zeros(plan.shape[0])
    for (r0, r1, c0, c1), a in plan.tiles.items():
        out[r0:r1] += a.sum(axis=1)
    return out


def col_sums(plan: TileField) -> np.ndarray:
    out = np.zeros(plan.shape[1])
    for (r0, r1, c0, c1), a in plan.tiles.items():
        out[c0:c1] += a.sum(axis=0)
    return out

