"""Active supports, tile schedules and the analytic storage ledger.

A support is the set of active (query, key) edges.  Three kinds exist:

* ``banded``    clipped symmetric band ``|i - j| <= W`` intersected with the
                row/column activity masks,
* ``explicit``  an arbitrary edge set, kept sorted in row-major order,
* ``augmented`` the dustbin-augmented support, which is a widened band on the
                enlarged index space.

Supports are immutable.  Banded supports never materialize an ``L x L`` mask
unless asked to, so edge counts at ``L = 16384`` stay O(L).
"""

from __future__ import annotations

import base64
from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterator

import numpy as np

from .errors import InfeasibleSupport

MIB = float(1 << 20)


@dataclass(frozen=True, eq=False)
class SupportMask:
    n_rows: int
    n_cols: int
    kind: str
    row_active: np.ndarray
    col_active: np.ndarray
    W: int | None = None
    edges: np.ndarray | None = None
    base: "SupportMask | None" = None
    block: int | None = None

    @property
    def is_band(self) -> bool:
        return self.kind in ("banded", "augmented")

    def tile_mask(self, r0: int, r1: int, c0: int, c1: int) -> np.ndarray:
        """Boolean activity of the sub-block ``[r0:r1) x [c0:c1)``."""
        act = self.row_active[r0:r1, None] & self.col_active[None, c0:c1]
        if self.is_band:
            i = np.arange(r0, r1)[:, None]
            j = np.arange(c0, c1)[None, :]
            return act & (np.abs(i - j) <= self.W)
        return act & self._dense_edges[r0:r1, c0:c1]

    @cached_property
    def _dense_edges(self) -> np.ndarray:
        m = np.zeros((self.n_rows, self.n_cols), dtype=bool)
        m[self.edges[:, 0], self.edges[:, 1]] = True
        return m

    def dense(self) -> np.ndarray:
        return self.tile_mask(0, self.n_rows, 0, self.n_cols)

    def _band_counts(self, axis: int) -> np.ndarray:
        # per-row (axis=0) or per-column (axis=1) active-edge counts of a band
        n_self, other = (self.n_rows, self.col_active) if axis == 0 else (self.n_cols, self.row_active)
        csum = np.concatenate([[0], np.cumsum(other, dtype=np.int64)])
        idx = np.arange(n_self)
        lo = np.clip(idx - self.W, 0, len(other))
        hi = np.clip(idx + self.W + 1, 0, len(other))
        own = self.row_active if axis == 0 else self.col_active
        return np.where(own, csum[hi] - csum[lo], 0)

    def row_counts(self) -> np.ndarray:
        if self.is_band:
            return self._band_counts(0)
        return np.bincount(self.edges[:, 0], minlength=self.n_rows)

    def col_counts(self) -> np.ndarray:
        if self.is_band:
            return self._band_counts(1)
        return np.bincount(self.edges[:, 1], minlength=self.n_cols)

    @property
    def n_edges(self) -> int:
        return int(self.row_counts().sum())

    def edge_list(self) -> np.ndarray:
        """Active edges as an ``(n, 2)`` array in row-major order."""
        if self.edges is not None:
            return self.edges
        return np.argwhere(self.dense())

    def check_feasible(self) -> None:
        rows = np.flatnonzero(self.row_active & (self.row_counts() == 0))
        cols = np.flatnonzero(self.col_active & (self.col_counts() == 0))
        if rows.size or cols.size:
            raise InfeasibleSupport(
                f"active rows {rows[:8].tolist()} / cols {cols[:8].tolist()} have no active edge"
            )

    def to_json(self, compact: bool = False) -> dict:
        def enc(mask):
            if compact:
                return base64.b64encode(np.packbits(mask.astype(np.uint8)).tobytes()).decode()
            return mask.astype(int).tolist()

        out = {
            "kind": self.kind,
            "L_q": self.n_rows,
            "L_k": self.n_cols,
            "W": self.W,
            "masks": {"encoding": "base64" if compact else "array",
                      "row": enc(self.row_active), "col": enc(self.col_active)},
            "dustbin_block": self.block,
        }
        if self.kind == "explicit":
            out["edges"] = self.edges.tolist()
        if self.kind == "augmented":
            out["base"] = self.base.to_json(compact)
        return out

    @classmethod
    def from_json(cls, obj: dict) -> "SupportMask":
        masks = obj["masks"]

        def dec(v, n):
            if masks.get("encoding") == "base64":
                bits = np.unpackbits(np.frombuffer(base64.b64decode(v), dtype=np.uint8))
                return bits[:n].astype(bool)
            return np.asarray(v, dtype=bool)

        rows = dec(masks["row"], obj["L_q"])
        cols = dec(masks["col"], obj["L_k"])
        kind = obj["kind"]
        if kind == "banded":
            return build_band_support(obj["L_q"], obj["L_k"], obj["W"], rows, cols)
        if kind == "explicit":
            return explicit_support(np.asarray(obj["edges"], dtype=np.int64).reshape(-1, 2),
                                    obj["L_q"], obj["L_k"], rows, cols)
        if kind == "augmented":
            return augment_dustbin(cls.from_json(obj["base"]), obj["dustbin_block"]).support
        raise ValueError(f"unknown support kind {kind!r}")


def _mask(m, n: int) -> np.ndarray:
    if m is None:
        return np.ones(n, dtype=bool)
    m = np.asarray(m, dtype=bool)
    if m.shape != (n,):
        raise ValueError(f"mask has shape {m.shape}, expected ({n},)")
    return m


def build_band_support(L_q: int, L_k: int, W: int, row_mask=None, col_mask=None) -> SupportMask:
    """Clipped symmetric band ``{(i, j): |i - j| <= W}`` on active rows/columns."""
    if L_q < 1 or L_k < 1:
        raise ValueError("L_q and L_k must be >= 1")
    if W < 0:
        raise ValueError("W must be >= 0")
    s = SupportMask(L_q, L_k, "banded", _mask(row_mask, L_q), _mask(col_mask, L_k), W=int(W))
    s.check_feasible()
    return s


def explicit_support(edges, n_rows: int, n_cols: int, row_mask=None, col_mask=None) -> SupportMask:
    """Support from an explicit edge set or a dense boolean matrix."""
    e = np.asarray(edges)
    if e.dtype == bool and e.shape == (n_rows, n_cols):
        e = np.argwhere(e)
    e = np.unique(e.astype(np.int64).reshape(-1, 2), axis=0)  # sorted row-major
    if e.size and (e[:, 0].max() >= n_rows or e[:, 1].max() >= n_cols or e.min() < 0):
        raise ValueError("edge index out of range")
    rows = np.bincount(e[:, 0], minlength=n_rows) > 0 if row_mask is None else _mask(row_mask, n_rows)
    cols = np.bincount(e[:, 1], minlength=n_cols) > 0 if col_mask is None else _mask(col_mask, n_cols)
    if e.size and not (rows[e[:, 0]].all() and cols[e[:, 1]].all()):
        raise ValueError("edges touch inactive rows or columns")
    s = SupportMask(n_rows, n_cols, "explicit", rows, cols, edges=e)
    s.check_feasible()
    return s


@dataclass(frozen=True, eq=False)
class AugmentedSupport:
    base: SupportMask
    support: SupportMask
    dustbin_row: int
    dustbin_col: int
    filler_rows: np.ndarray
    filler_cols: np.ndarray
    effective_band: int


def augment_dustbin(base: SupportMask, block: int) -> AugmentedSupport:
    """Append one active dustbin token and ``block - 1`` inert fillers per side.

    The realized support is the generic band widened to ``max(W, L)`` over
    the augmented activity masks, so every active base token reaches the
    dustbin on the opposite side.
    """
    if block < 1:
        raise ValueError("dustbin block must be >= 1")
    if base.kind != "banded":
        raise ValueError("dustbin augmentation is defined for banded base supports")
    Lq, Lk = base.n_rows, base.n_cols
    tail = np.zeros(block, dtype=bool)
    tail[0] = True
    rows = np.concatenate([base.row_active, tail])
    cols = np.concatenate([base.col_active, tail])
    wide = max(base.W, Lq, Lk)
    s = SupportMask(Lq + block, Lk + block, "augmented", rows, cols, W=wide, base=base, block=block)
    s.check_feasible()
    return AugmentedSupport(
        base=base,
        support=s,
        dustbin_row=Lq,
        dustbin_col=Lk,
        filler_rows=np.arange(Lq + 1, Lq + block),
        filler_cols=np.arange(Lk + 1, Lk + block),
        effective_band=wide,
    )


def augment_tensors(X: np.ndarray, dustbin: np.ndarray, block: int) -> np.ndarray:
    """Append a dustbin token row and ``block - 1`` zero filler rows to ``X``."""
    fill = np.zeros((block - 1, X.shape[1]), dtype=X.dtype)
    return np.concatenate([X, np.asarray(dustbin, dtype=X.dtype)[None, :], fill], axis=0)


@dataclass(frozen=True, eq=False)
class TileSchedule:
    block: int
    tiles: tuple[tuple[int, int, int, int], ...]
    deterministic: bool = True
    by_col: tuple[int, ...] = field(default=())

    def __iter__(self) -> Iterator[tuple[int, int, int, int]]:
        return iter(self.tiles)

    def __len__(self) -> int:
        return len(self.tiles)

    def col_order(self) -> Iterator[tuple[int, int, int, int]]:
        """Tiles ordered column-block major, for column reductions."""
        return (self.tiles[k] for k in self.by_col)


def tile_schedule(support: SupportMask, block: int) -> TileSchedule:
    """Row-major list of ``block x block`` tiles holding at least one active edge."""
    if block < 1:
        raise ValueError("block must be >= 1")
    tiles = []
    for r0 in range(0, support.n_rows, block):
        r1 = min(r0 + block, support.n_rows)
        for c0 in range(0, support.n_cols, block):
            c1 = min(c0 + block, support.n_cols)
            if support.is_band and (c0 - (r1 - 1) > support.W or r0 - (c1 - 1) > support.W):
                continue
            if support.tile_mask(r0, r1, c0, c1).any():
                tiles.append((r0, r1, c0, c1))
    by_col = sorted(range(len(tiles)), key=lambda k: (tiles[k][2], tiles[k][0]))
    return TileSchedule(block, tuple(tiles), True, tuple(by_col))


def band_entry_count(L: int, W: int) -> int:
    """Active entries of the all-active clipped band on an ``L x L`` grid."""
    if W >= L:
        return L * L
    return L * (2 * W + 1) - W * (W + 1)


@dataclass(frozen=True)
class LedgerReport:
    L: int
    W: int
    B: int
    d: int
    bytes_per_scalar: int
    R: int
    T: int
    active_entries: int
    direct_plan_bytes: int
    one_ref_plan_bytes: int
    direct_tile_bytes: int
    one_ref_tile_bytes: int
    tail_vector_bytes: int
    history_vector_bytes: int
    qkv_bytes: int

    def mib(self) -> dict[str, float]:
        return {
            "direct_plan_mib": self.direct_plan_bytes / MIB,
            "one_ref_plan_mib": self.one_ref_plan_bytes / MIB,
            "direct_tile_mib": self.direct_tile_bytes / MIB,
            "one_ref_tile_mib": self.one_ref_tile_bytes / MIB,
            "tail_vector_mib": self.tail_vector_bytes / MIB,
            "history_vector_mib": self.history_vector_bytes / MIB,
            "qkv_mib": self.qkv_bytes / MIB,
        }

    def rows(self) -> list[tuple[str, str, str]]:
        m = self.mib()
        return [
            ("Active support entries per head", f"{self.active_entries / 1e6:.2f}M", ""),
            ("Logical materialized plan factors", f"{m['direct_plan_mib']:.2f} MiB", f"{m['one_ref_plan_mib']:.2f} MiB"),
            (f"Resident plan tile at B={self.B}", f"{m['direct_tile_mib']:.4f} MiB", f"{m['one_ref_tile_mib']:.4f} MiB"),
            (f"R={self.R} tail u/v vectors", f"{m['tail_vector_mib']:.3f} MiB", ""),
            ("Base-plus-tail u/v history upper ledger", f"{m['history_vector_mib']:.2f} MiB", ""),
            ("QKV activations", f"{m['qkv_mib']:.2f} MiB", ""),
        ]


def estimate_memory_ledger(L: int, W: int, B: int, d: int, bytes_per_scalar: int = 4,
                           R: int = 2, T: int = 15) -> LedgerReport:
    if min(L, B, d, bytes_per_scalar, R) < 1 or W < 0 or T < 0:
        raise ValueError("ledger sizes must be positive")
    n = band_entry_count(L, W)
    b = bytes_per_scalar
    return LedgerReport(
        L=L, W=W, B=B, d=d, bytes_per_scalar=b, R=R, T=T,
        active_entries=n,
        direct_plan_bytes=4 * n * b,
        one_ref_plan_bytes=n * b,
        direct_tile_bytes=4 * B * B * b,
        one_ref_tile_bytes=B * B * b,
        tail_vector_bytes=2 * (R + 1) * L * b,
        history_vector_bytes=2 * (T + R + 1) * L * b,
        qkv_bytes=3 * L * d * b,
    )
