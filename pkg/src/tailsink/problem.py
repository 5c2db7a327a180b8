"""Problem instances, the surrogate gradient pipeline and the instance file format.

Synthetic instances draw ``Q``, ``K``, ``V`` (then the loss weight, if any)
i.i.d. standard normal, in that order, from numpy's counter-based ``Philox``
generator keyed by the seed.  Any implementation with a Philox4x64-10 stream
reproduces the same instances.

Instance files are a JSON header plus a sibling ``.bin`` file holding
row-major little-endian buffers; the header records each buffer's dtype,
shape and byte offset.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .adjoint import CotangentSet, r2_backward, tail_adjoint_generic
from .losses import LossSpec
from .sinkhorn import DualTrace, EpsSchedule, ScoreField, output, solve
from .support import SupportMask, build_band_support

FORMAT = "tailsink-instance"
FORMAT_VERSION = 1


def rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=seed))


@dataclass(eq=False)
class Problem:
    Q: np.ndarray
    K: np.ndarray
    V: np.ndarray
    support: SupportMask
    loss: LossSpec
    epsilon: float = 1.0
    T: int = 15
    R: int = 2
    schedule: EpsSchedule | None = None
    block: int = 64
    seed: int | None = None
    _score: ScoreField | None = field(default=None, repr=False)

    @property
    def dtype(self) -> np.dtype:
        return self.Q.dtype

    @property
    def L(self) -> int:
        return self.support.n_rows

    def astype(self, dtype) -> "Problem":
        dtype = np.dtype(dtype)
        return replace(self, Q=self.Q.astype(dtype), K=self.K.astype(dtype), V=self.V.astype(dtype),
                       _score=None)

    def with_depth(self, R: int | None = None, T: int | None = None) -> "Problem":
        T = self.T if T is None else T
        sched = self.schedule if T == self.T else None
        return replace(self, R=self.R if R is None else R, T=T, schedule=sched)

    def score(self) -> ScoreField:
        if self._score is None:
            self._score = ScoreField(self.support, self.epsilon, q=self.Q, k=self.K, block=self.block)
        return self._score

    def forward(self, centered: bool = True) -> tuple[np.ndarray, DualTrace]:
        trace = solve(self.score(), self.T, self.R, self.schedule, centered)
        return output(self.score(), trace, self.V), trace


@dataclass
class Gradients:
    Q: np.ndarray
    K: np.ndarray
    V: np.ndarray
    loss: float
    O: np.ndarray
    trace: DualTrace
    cotangents: CotangentSet

    def as_dict(self) -> dict[str, np.ndarray]:
        return {"Q": self.Q, "K": self.K, "V": self.V}


def random_problem(L: int, W: int, d: int = 8, T: int = 15, R: int = 2, seed: int = 0, *,
                   epsilon: float = 1.0, loss: str = "linear", dtype="float64", block: int = 64,
                   L_k: int | None = None, d_v: int | None = None, schedule=None,
                   row_mask=None, col_mask=None) -> Problem:
    """Synthetic banded instance with i.i.d. standard normal ``Q``, ``K``, ``V``."""
    L_k = L if L_k is None else L_k
    d_v = d if d_v is None else d_v
    g = rng(seed)
    Q = g.standard_normal((L, d))
    K = g.standard_normal((L_k, d))
    V = g.standard_normal((L_k, d_v))
    if loss == "linear":
        spec = LossSpec.linear(g.standard_normal((L, d_v)))
    elif loss == "frobenius":
        spec = LossSpec.frobenius(g.standard_normal((L, d_v)))
    elif loss == "supervised":
        # diagonal alignment targets, clipped to the key range
        spec = LossSpec.supervised(np.minimum(np.arange(L), L_k - 1))
    else:
        raise ValueError(f"unknown loss {loss!r}")
    support = build_band_support(L, L_k, W, row_mask, col_mask)
    if schedule is not None and not isinstance(schedule, EpsSchedule):
        schedule = EpsSchedule(tuple((float(e), int(n)) for e, n in schedule))
    p = Problem(Q, K, V, support, spec, epsilon, T, R, schedule, block, seed)
    return p.astype(dtype)


def surrogate_gradient(problem: Problem, mode: str = "auto", trace: DualTrace | None = None) -> Gradients:
    """Loss gradient of the stopped-base surrogate with respect to ``Q, K, V``.

    ``mode`` picks the backward: ``one_reference`` or ``direct_four_plan``
    (``R = 2`` only), ``generic``, or ``auto`` (one-reference when ``R = 2``).
    """
    score = problem.score()
    if trace is None:
        trace = solve(score, problem.T, problem.R, problem.schedule)
    O = output(score, trace, problem.V)
    value, G, V_direct = problem.loss.value_and_grad(O, problem.V)
    if mode == "auto":
        mode = "one_reference" if trace.R == 2 else "generic"
    if mode == "generic":
        cot = tail_adjoint_generic(score, trace, G, problem.V)
    else:
        cot = r2_backward(score, trace, G, problem.V, mode)
    V_bar = cot.V_bar if V_direct is None else cot.V_bar + V_direct
    return Gradients(cot.Q_bar, cot.K_bar, V_bar, value, O, trace, cot)


# -- instance files ------------------------------------------------------------------------------

def _loss_buffers(loss: LossSpec) -> dict[str, np.ndarray]:
    return {"linear": {"loss_weight": loss.weight},
            "frobenius": {"loss_target": loss.target},
            "supervised": {"loss_columns": loss.columns}}[loss.kind]


def save_instance(problem: Problem, path) -> Path:
    """Write ``path`` (JSON header) and ``path.with_suffix('.bin')``."""
    path = Path(path)
    bin_path = path.with_suffix(".bin")
    buffers = {"Q": problem.Q, "K": problem.K, "V": problem.V,
               "row_mask": problem.support.row_active.astype(np.uint8),
               "col_mask": problem.support.col_active.astype(np.uint8),
               **_loss_buffers(problem.loss)}
    index, offset = {}, 0
    with open(bin_path, "wb") as fh:
        for name, arr in buffers.items():
            a = np.ascontiguousarray(arr)
            a = a.astype(a.dtype.newbyteorder("<"))
            raw = a.tobytes(order="C")
            index[name] = {"dtype": a.dtype.str, "shape": list(a.shape), "offset": offset, "nbytes": len(raw)}
            fh.write(raw)
            offset += len(raw)
    header = {
        "format": FORMAT,
        "version": FORMAT_VERSION,
        "L_q": problem.support.n_rows,
        "L_k": problem.support.n_cols,
        "d": int(problem.Q.shape[1]),
        "d_v": int(problem.V.shape[1]),
        "epsilon": problem.epsilon,
        "schedule": None if problem.schedule is None else [list(s) for s in problem.schedule.stages],
        "T": problem.T,
        "R": problem.R,
        "seed": problem.seed,
        "block": problem.block,
        "dtype": problem.dtype.name,
        "loss": problem.loss.kind,
        "support": problem.support.to_json(compact=True),
        "data": bin_path.name,
        "buffers": index,
    }
    path.write_text(json.dumps(header, indent=2))
    return path


def load_instance(path) -> Problem:
    path = Path(path)
    header = json.loads(path.read_text())
    if header.get("format") != FORMAT:
        raise ValueError(f"{path} is not a {FORMAT} file")
    blob = (path.parent / header["data"]).read_bytes()
    bufs = {}
    for name, meta in header["buffers"].items():
        raw = blob[meta["offset"]:meta["offset"] + meta["nbytes"]]
        bufs[name] = np.frombuffer(raw, dtype=np.dtype(meta["dtype"])).reshape(meta["shape"]).copy()
    support = SupportMask.from_json(header["support"])
    kind = header["loss"]
    loss = {"linear": lambda: LossSpec.linear(bufs["loss_weight"]),
            "frobenius": lambda: LossSpec.frobenius(bufs["loss_target"]),
            "supervised": lambda: LossSpec.supervised(bufs["loss_columns"])}[kind]()
    sched = header["schedule"]
    sched = None if sched is None else EpsSchedule(tuple((float(e), int(n)) for e, n in sched))
    dt = np.dtype(header["dtype"])
    return Problem(bufs["Q"].astype(dt), bufs["K"].astype(dt), bufs["V"].astype(dt), support, loss,
                   header["epsilon"], header["T"], header["R"], sched, header["block"], header["seed"])
