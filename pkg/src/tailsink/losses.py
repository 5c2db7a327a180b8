"""Scalar losses on the transport output."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True, eq=False)
class LossSpec:
    """One of three scalar losses of the transport output ``O``.

    ``linear``      ``<G, O>`` for a fixed weight ``G``
    ``frobenius``   ``0.5 * ||O - target||_F^2``
    ``supervised``  element-wise mean squared error between ``O_i`` and the
                    target value vector ``V_{c_i}`` over annotated rows;
                    ``columns[i] < 0`` marks an unannotated row
    """

    kind: str
    weight: np.ndarray | None = None
    target: np.ndarray | None = None
    columns: np.ndarray | None = None

    def __post_init__(self):
        need = {"linear": "weight", "frobenius": "target", "supervised": "columns"}
        if self.kind not in need:
            raise ValueError(f"unknown loss kind {self.kind!r}")
        if getattr(self, need[self.kind]) is None:
            raise ValueError(f"{self.kind} loss needs `{need[self.kind]}`")

    @classmethod
    def linear(cls, G) -> "LossSpec":
        return cls("linear", weight=np.asarray(G))

    @classmethod
    def frobenius(cls, target) -> "LossSpec":
        return cls("frobenius", target=np.asarray(target))

    @classmethod
    def supervised(cls, columns) -> "LossSpec":
        return cls("supervised", columns=np.asarray(columns, dtype=np.int64))

    def value_and_grad(self, O: np.ndarray, V: np.ndarray):
        """Return ``(loss, dL/dO, direct dL/dV or None)``."""
        if self.kind == "linear":
            G = self.weight.astype(O.dtype)
            return float(np.sum(G * O, dtype=np.float64)), G, None
        if self.kind == "frobenius":
            r = O - self.target.astype(O.dtype)
            return 0.5 * float(np.sum(r * r, dtype=np.float64)), r, None
        rows = np.flatnonzero(self.columns >= 0)
        cols = self.columns[rows]
        r = O[rows] - V[cols].astype(O.dtype)
        n = max(len(rows), 1) * O.shape[1]
        G = np.zeros_like(O)
        G[rows] = (2.0 / n) * r
        V_direct = np.zeros(V.shape, dtype=O.dtype)
        np.add.at(V_direct, cols, -(2.0 / n) * r)
        return float(np.sum(r * r, dtype=np.float64)) / n, G, V_direct
