"""Command-line validation and benchmark suite.

    tailsink validate-exactness --L 64 128 512 --precision f64
    tailsink validate-bias --R 0 1 2 4 --seeds 0 1 2 --out bias.json
    tailsink memory-ledger --L 16384 --W 1024 --B 128 --d 64

Every command writes a JSON report bundle (``--out``) that embeds the
resolved configuration and library version, optionally a CSV of its main
table (``--csv``), and exits 0 only when all asserted tolerances hold.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .adjoint import r2_backward
from .certificates import (
    bias_certificate,
    block_certificates,
    measure_hilbert_contraction,
    orbit_reconstruct,
    projective_coefficient,
    select_tail_depth,
    summarize,
)
from .errors import NotApplicable, UndefinedRatio
from .oracle import MAX_BPTT, MAX_DENSE, DenseProblem, dense_forward, finite_diff_grad, full_bptt_grad
from .problem import random_problem, rng, surrogate_gradient
from .reports import ReportBundle
from .sinkhorn import EpsSchedule, output, solve
from .support import estimate_memory_ledger

COMMANDS = ("validate-exactness", "validate-orbit", "validate-bias", "bench-adjoint",
            "memory-ledger", "contraction")

# absolute tolerances by precision
GRAD_TOL = {"f64": 1e-8, "f32": 1e-4}
FORWARD_TOL = {"f64": 1e-12, "f32": 1e-6}
ORBIT_TOL = {"f64": 1e-10, "f32": 1e-5}
SBAR_TOL = {"f64": 1e-12, "f32": 1e-6}
RESIDUAL_TOL = 1e-9
DTYPES = {"f64": "float64", "f32": "float32"}


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    command: str
    L: list[int] = field(default_factory=lambda: [128])
    W: int | None = None  # None: min(256, L)
    B: int = 64
    d: int = 8
    T: int = 15
    R: list[int] = field(default_factory=lambda: [2])
    R_max: int = 4
    tau: float = 1e-5
    epsilon: float = 1.0
    schedule: list[list[float]] | None = None
    precision: str = "f64"
    seeds: list[int] = field(default_factory=lambda: [0])
    loss: str = "linear"
    repeats: int = 20
    warmup: int = 3
    instances: int = 200
    max_block: int = 32
    fd_entries: int = 48
    fd_full_limit: int = 128
    jobs: int = 1
    out: str | None = None
    csv: str | None = None

    def validate(self) -> "RunConfig":
        if self.command not in COMMANDS:
            raise ConfigError(f"unknown command {self.command!r}")
        if self.precision not in DTYPES:
            raise ConfigError("precision must be f32 or f64")
        if not self.L or any(int(x) < 1 for x in self.L):
            raise ConfigError("L must be a non-empty list of positive sizes")
        if self.W is not None and self.W < 0:
            raise ConfigError("W must be >= 0")
        if min(self.B, self.d, self.repeats, self.instances, self.max_block, self.jobs) < 1:
            raise ConfigError("B, d, repeats, instances, max_block and jobs must be positive")
        if self.T < 0 or self.R_max < 0 or self.warmup < 0 or any(r < 0 for r in self.R):
            raise ConfigError("T, R, R_max and warmup must be >= 0")
        if not self.tau > 0:
            raise ConfigError("tau must be positive")
        if not self.epsilon > 0:
            raise ConfigError("epsilon must be positive")
        if self.loss not in ("linear", "frobenius", "supervised"):
            raise ConfigError(f"unknown loss {self.loss!r}")
        if self.schedule is not None:
            try:
                sched = EpsSchedule(tuple((float(e), int(n)) for e, n in self.schedule))
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"bad schedule: {exc}") from None
            if sched.final != self.epsilon:
                raise ConfigError("the last schedule stage must use the tail epsilon")
            if sched.T != self.T:
                raise ConfigError("schedule stage lengths must sum to T")
        if self.command == "bench-adjoint" and self.R != [2]:
            raise ConfigError("bench-adjoint compares the R = 2 backward modes; use --R 2")
        if self.command == "memory-ledger" and any(r < 1 for r in self.R):
            raise ConfigError("memory-ledger needs R >= 1")
        return self

    def width(self, L: int) -> int:
        return min(256, L) if self.W is None else self.W

    def eps_schedule(self):
        return None if self.schedule is None else tuple((float(e), int(n)) for e, n in self.schedule)


COMMAND_DEFAULTS = {
    "validate-exactness": {"L": [64, 128, 512]},
    "validate-orbit": {"L": [128]},
    "validate-bias": {"L": [128], "W": 128, "R": [0, 1, 2, 4], "seeds": [0, 1, 2], "loss": "supervised"},
    "bench-adjoint": {"L": [128, 256, 512], "precision": "f32"},
    "memory-ledger": {"L": [16384], "W": 1024, "B": 128, "d": 64, "precision": "f32"},
    "contraction": {"L": [256], "B": 128},
}


def resolve_config(command: str, file_cfg: dict | None = None, overrides: dict | None = None) -> RunConfig:
    """Merge command defaults, a config-file dict and explicit overrides (in that order)."""
    known = {f.name for f in fields(RunConfig)}
    merged = {"command": command, **COMMAND_DEFAULTS.get(command, {})}
    for src in (file_cfg or {}), (overrides or {}):
        unknown = set(src) - known
        if unknown:
            raise ConfigError(f"unknown config field(s): {sorted(unknown)}")
        if src.get("command", command) != command:
            raise ConfigError(f"config is for {src['command']!r}, not {command!r}")
        merged.update({k: v for k, v in src.items() if v is not None})
    for key in ("L", "R", "seeds"):
        if isinstance(merged.get(key), int):
            merged[key] = [merged[key]]
    try:
        cfg = RunConfig(**merged)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None
    return cfg.validate()


def _map_seeds(cfg: RunConfig, fn, items):
    if cfg.jobs == 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(cfg.jobs) as pool:
        return list(pool.map(fn, items))


def _problem(cfg: RunConfig, L: int, seed: int, R: int, dtype=None):
    return random_problem(L, cfg.width(L), d=cfg.d, T=cfg.T, R=R, seed=seed, epsilon=cfg.epsilon,
                          loss=cfg.loss, dtype=dtype or DTYPES[cfg.precision], block=cfg.B,
                          schedule=cfg.eps_schedule())


# -- commands ------------------------------------------------------------------------------------

def _exactness_row(cfg: RunConfig, L: int, R: int, seed: int) -> dict:
    p = _problem(cfg, L, seed, R)
    g = surrogate_gradient(p)
    row = {"L": L, "W": cfg.width(L), "R": R, "seed": seed, "precision": cfg.precision}
    if L > MAX_DENSE:
        # forward consistency only: retiled float64 run against the kernel output
        p64 = _problem(cfg, L, seed, R, "float64")
        p64.block = 2 * cfg.B
        O64, _ = p64.forward()
        row.update(status="forward-only", forward_dev=float(np.abs(g.O - O64).max()),
                   max_dQ=None, max_dK=None, max_dV=None, rel_l2=None, oracle="skipped")
        return row
    dp = DenseProblem.from_problem(p)
    O_ref, _ = dense_forward(dp)
    row["forward_dev"] = float(np.abs(g.O - O_ref).max())
    picker = rng(10_000 + seed)
    devs, rels = {}, []
    for name in ("Q", "K", "V"):
        ours = getattr(g, name).astype(np.float64)
        if L <= cfg.fd_full_limit:
            idx = np.arange(ours.size)
            ref = finite_diff_grad(dp, name).ravel()
        else:
            idx = np.sort(picker.choice(ours.size, size=min(cfg.fd_entries, ours.size), replace=False))
            ref = finite_diff_grad(dp, name, index=idx)
        diff = ours.ravel()[idx] - ref
        devs[name] = float(np.abs(diff).max())
        rels.append(float(np.linalg.norm(diff) / max(np.linalg.norm(ref), 1e-300)))
    row.update(status="checked", max_dQ=devs["Q"], max_dK=devs["K"], max_dV=devs["V"], rel_l2=max(rels),
               oracle="finite-difference" + ("" if L <= cfg.fd_full_limit else f" ({cfg.fd_entries} sampled entries)"))
    if L <= MAX_BPTT:
        ref = full_bptt_grad(dp, stop_base=True)
        row["analytic_oracle_dev"] = max(float(np.abs(getattr(g, k) - ref[k]).max()) for k in "QKV")
    return row


def cmd_validate_exactness(cfg: RunConfig) -> ReportBundle:
    rep = ReportBundle(cfg.command, asdict(cfg))
    rows = []
    for L in cfg.L:
        for R in cfg.R:
            rows += _map_seeds(cfg, lambda s: _exactness_row(cfg, L, R, s), cfg.seeds)
    rep.tables["exactness"] = rows
    tol, ftol = GRAD_TOL[cfg.precision], FORWARD_TOL[cfg.precision]
    for r in rows:
        tag = f"L={r['L']} R={r['R']} seed={r['seed']}"
        if r["status"] == "checked":
            worst = max(r["max_dQ"], r["max_dK"], r["max_dV"])
            rep.check(f"gradient {tag}", worst <= tol, worst, tol)
            rep.check(f"forward {tag}", r["forward_dev"] <= ftol, r["forward_dev"], ftol)
        else:
            # float32 against a float64 retiling; allow the float32 forward band
            lim = FORWARD_TOL["f32"] if cfg.precision == "f32" else 1e-10
            rep.check(f"forward-only {tag}", r["forward_dev"] <= lim, r["forward_dev"], lim)
    return rep


def _orbit_row(cfg: RunConfig, L: int, R: int, seed: int) -> dict:
    p = _problem(cfg, L, seed, R)
    _, trace = p.forward()
    res = orbit_reconstruct(p.score(), trace)
    return {"L": L, "R": R, "seed": seed, "n_plans": len(res.errors), "stage": res.stage,
            "max_log_error": res.max_error}


def cmd_validate_orbit(cfg: RunConfig) -> ReportBundle:
    rep = ReportBundle(cfg.command, asdict(cfg))
    rows = []
    for L in cfg.L:
        for R in cfg.R:
            rows += _map_seeds(cfg, lambda s: _orbit_row(cfg, L, R, s), cfg.seeds)
    rep.tables["orbit"] = rows
    tol = ORBIT_TOL[cfg.precision]
    for r in rows:
        rep.check(f"orbit L={r['L']} R={r['R']} seed={r['seed']}", r["max_log_error"] <= tol,
                  r["max_log_error"], tol)
    return rep


def _bias_seed(cfg: RunConfig, L: int, seed: int) -> dict:
    # certificate rows always run in float64 so the residual is meaningful
    p = _problem(cfg, L, seed, 0, "float64")
    oracle = L <= MAX_BPTT
    certs = {R: bias_certificate(p, R, oracle=oracle) for R in sorted(set(cfg.R))}
    sel = select_tail_depth(p, cfg.tau, cfg.R_max)
    scan = [bias_certificate(p, r, oracle=False).c_max for r in range(cfg.R_max + 1)]
    feasible = [r for r, c in enumerate(scan) if c <= cfg.tau]
    return {"seed": seed, "certs": certs, "selected": sel.R,
            "exhaustive_min": feasible[0] if feasible else None}


def cmd_validate_bias(cfg: RunConfig) -> ReportBundle:
    rep = ReportBundle(cfg.command, asdict(cfg))
    table, per_seed, selector = [], [], []
    for L in cfg.L:
        results = _map_seeds(cfg, lambda s: _bias_seed(cfg, L, s), cfg.seeds)
        for res in results:
            for R, c in res["certs"].items():
                per_seed.append({"L": L, "seed": res["seed"], **c.row()})
            selector.append({"L": L, "seed": res["seed"], "tau": cfg.tau, "R_max": cfg.R_max,
                             "selected_R": res["selected"], "exhaustive_min_R": res["exhaustive_min"]})
            etas = [res["certs"][R].eta_norm for R in sorted(res["certs"])]
            rep.check(f"eta strictly decreasing L={L} seed={res['seed']}",
                      all(a > b for a, b in zip(etas, etas[1:])), etas)
            rep.check(f"selector matches exhaustive scan L={L} seed={res['seed']}",
                      res["selected"] == res["exhaustive_min"], res["selected"])
        for R in sorted(set(cfg.R)):
            rows = [r for r in per_seed if r["L"] == L and r["R"] == R]
            resid = [r["residual"] for r in rows if r["residual"] is not None]
            table.append({
                "L": L, "R": R,
                "eta_norm": max(r["eta_norm"] for r in rows),
                "c_norm": max(r["c_norm"] for r in rows),
                "delta_g_max": max((r["delta_g_max"] for r in rows if r["delta_g_max"] is not None), default=None),
                "residual": max(resid) if resid else None,
            })
            if resid:
                rep.check(f"certificate residual L={L} R={R}", max(resid) <= RESIDUAL_TOL, max(resid), RESIDUAL_TOL)
    rep.tables["bias"] = table
    rep.tables["bias_per_seed"] = per_seed
    rep.tables["selector"] = selector
    return rep


def _timed(fn, repeats: int, warmup: int) -> list[float]:
    for _ in range(warmup):
        fn()
    out = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        out.append(time.perf_counter() - t0)
    return out


def bench_modes(p, repeats: int = 20, warmup: int = 3) -> dict:
    """Interleaved timing of the two ``R = 2`` backward modes on one instance."""
    score = p.score()
    trace = solve(score, p.T, 2, p.schedule)
    _, G, _ = p.loss.value_and_grad(output(score, trace, p.V), p.V)
    run = {m: (lambda m=m: r2_backward(score, trace, G, p.V, m)) for m in ("direct_four_plan", "one_reference")}
    for m in run:
        _timed(run[m], 0, warmup)
    times = {m: [] for m in run}
    for _ in range(repeats):
        for m in run:
            times[m] += _timed(run[m], 1, 0)
    direct, one = run["direct_four_plan"](), run["one_reference"]()
    stat = lambda t: {"min": min(t), "mean": float(np.mean(t)), "max": max(t)}  # noqa: E731
    return {
        "direct": stat(times["direct_four_plan"]),
        "one_reference": stat(times["one_reference"]),
        "direct_plan_bytes": direct.stats["logical_plan_bytes"],
        "one_ref_plan_bytes": one.stats["logical_plan_bytes"],
        "max_dS_bar": direct.S_bar.max_abs_diff(one.S_bar),
    }


def cmd_bench_adjoint(cfg: RunConfig) -> ReportBundle:
    rep = ReportBundle(cfg.command, asdict(cfg))
    rows = []
    for L in cfg.L:
        for seed in cfg.seeds:
            b = bench_modes(_problem(cfg, L, seed, 2), cfg.repeats, cfg.warmup)
            d, o = b["direct"], b["one_reference"]
            rows.append({
                "L": L, "W": cfg.width(L), "seed": seed, "precision": cfg.precision,
                "direct_mean_s": d["mean"], "direct_min_s": d["min"], "direct_max_s": d["max"],
                "one_ref_mean_s": o["mean"], "one_ref_min_s": o["min"], "one_ref_max_s": o["max"],
                "speedup": d["mean"] / o["mean"],
                "direct_plan_bytes": b["direct_plan_bytes"], "one_ref_plan_bytes": b["one_ref_plan_bytes"],
                "storage_ratio": b["direct_plan_bytes"] / b["one_ref_plan_bytes"],
                "max_dS_bar": b["max_dS_bar"],
                # a wide min/mean spread marks a loaded machine
                "timing_noisy": max(d["mean"] / d["min"], o["mean"] / o["min"]) > 1.5,
            })
    rep.tables["bench"] = rows
    tol = SBAR_TOL[cfg.precision]
    for r in rows:
        tag = f"L={r['L']} seed={r['seed']}"
        rep.check(f"storage ratio {tag}", r["storage_ratio"] == 4.0, r["storage_ratio"], 4.0)
        rep.check(f"score cotangent agreement {tag}", r["max_dS_bar"] <= tol, r["max_dS_bar"], tol)
    return rep


def cmd_memory_ledger(cfg: RunConfig) -> ReportBundle:
    rep = ReportBundle(cfg.command, asdict(cfg))
    rows, printable = [], []
    nbytes = 4 if cfg.precision == "f32" else 8
    for L in cfg.L:
        for R in cfg.R:
            led = estimate_memory_ledger(L, cfg.width(L), cfg.B, cfg.d, nbytes, R=R, T=cfg.T)
            rows.append({"L": L, "W": led.W, "B": led.B, "d": led.d, "R": R, "T": cfg.T,
                         "bytes_per_scalar": nbytes, "active_entries": led.active_entries,
                         **{k: round(v, 6) for k, v in led.mib().items()}})
            printable += [{"L": L, "R": R, "quantity": q, "direct": a, "one_reference": b} for q, a, b in led.rows()]
            rep.check(f"plan storage ratio L={L} R={R}", led.direct_plan_bytes == 4 * led.one_ref_plan_bytes)
    rep.tables["ledger"] = rows
    rep.tables["ledger_printed"] = printable
    return rep


def random_blocks(seed: int, count: int, max_n: int):
    g = rng(seed)
    for _ in range(count):
        n, m = (int(x) for x in g.integers(1, max_n + 1, size=2))
        scale = float(g.uniform(0.05, 3.0))
        yield g.standard_normal((n, m)) * scale, g, m


def cmd_contraction(cfg: RunConfig) -> ReportBundle:
    rep = ReportBundle(cfg.command, asdict(cfg))
    rows, violations = [], 0
    for seed in cfg.seeds:
        for i, (S, g, m) in enumerate(random_blocks(seed, cfg.instances, cfg.max_block)):
            cert = projective_coefficient(S, block=i)
            try:
                obs = measure_hilbert_contraction(S, g.standard_normal(m), g.standard_normal(m), log=True)
            except UndefinedRatio:
                obs = None
            ok = (cert.rho_H <= cert.rho_range + 1e-12 and cert.rho_range < 1
                  and (obs is None or obs <= cert.rho_H + 1e-12))
            violations += not ok
            rows.append({"seed": seed, "block": i, "shape": list(S.shape), "delta": cert.delta,
                         "rho_H": cert.rho_H, "rho_range": cert.rho_range, "observed": obs, "ok": ok})
    rep.check("observed <= rho_H <= rho_range < 1", violations == 0, violations, 0)
    rep.tables["blocks"] = rows
    rep.summary["random_blocks"] = {k: summarize([r[k] for r in rows]) for k in ("rho_H", "rho_range", "observed")}
    # per-row-block certificates on synthetic banded instances at each L
    inst = []
    for L in cfg.L:
        for seed in cfg.seeds:
            p = _problem(cfg, L, seed, 2, "float64")
            try:
                for c in block_certificates(p.score(), cfg.B):
                    inst.append({"L": L, "seed": seed, **c.row()})
            except NotApplicable:
                continue
    rep.tables["instance_blocks"] = inst
    rep.summary["instance_blocks"] = {k: summarize([r[k] for r in inst]) for k in ("rho_H", "rho_range")}
    return rep


HANDLERS = {
    "validate-exactness": cmd_validate_exactness,
    "validate-orbit": cmd_validate_orbit,
    "validate-bias": cmd_validate_bias,
    "bench-adjoint": cmd_bench_adjoint,
    "memory-ledger": cmd_memory_ledger,
    "contraction": cmd_contraction,
}


def run(cfg: RunConfig) -> ReportBundle:
    return HANDLERS[cfg.command](cfg)


# -- argument parsing ----------------------------------------------------------------------------

def _schedule_arg(text: str):
    """``"4:5,2:5,1:5"`` or a JSON list of ``[epsilon, steps]`` pairs."""
    text = text.strip()
    if text.startswith("["):
        return json.loads(text)
    return [[float(e), int(n)] for e, n in (part.split(":") for part in text.split(","))]


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="tailsink", description=__doc__.split("\n")[0])
    sub = ap.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", help="JSON file with RunConfig fields")
        sp.add_argument("--L", type=int, nargs="+")
        sp.add_argument("--W", type=int)
        sp.add_argument("--B", type=int)
        sp.add_argument("--d", type=int)
        sp.add_argument("--T", type=int)
        sp.add_argument("--R", type=int, nargs="+")
        sp.add_argument("--R-max", dest="R_max", type=int)
        sp.add_argument("--tau", type=float)
        sp.add_argument("--epsilon", type=float)
        sp.add_argument("--schedule", type=_schedule_arg, help='e.g. "4:5,2:5,1:5" (epsilon:steps)')
        sp.add_argument("--precision", choices=sorted(DTYPES))
        sp.add_argument("--seeds", type=int, nargs="+")
        sp.add_argument("--loss", choices=["linear", "frobenius", "supervised"])
        sp.add_argument("--repeats", type=int)
        sp.add_argument("--warmup", type=int)
        sp.add_argument("--instances", type=int)
        sp.add_argument("--max-block", dest="max_block", type=int)
        sp.add_argument("--fd-entries", dest="fd_entries", type=int)
        sp.add_argument("--fd-full-limit", dest="fd_full_limit", type=int)
        sp.add_argument("--jobs", type=int, help="shard seeds across threads")
        sp.add_argument("--out", help="write the JSON report here")
        sp.add_argument("--csv", help="write the main table as CSV here")
        sp.add_argument("--quiet", action="store_true")
    return ap


def _print_report(rep: ReportBundle, stream=sys.stdout) -> None:
    for name, rows in rep.tables.items():
        if not rows or name == "blocks":
            continue
        print(f"[{name}]", file=stream)
        for r in rows:
            print("  " + "  ".join(f"{k}={_fmt(v)}" for k, v in r.items()), file=stream)
    for c in rep.checks:
        print(f"{'PASS' if c['passed'] else 'FAIL'}  {c['name']}", file=stream)
    print(f"overall: {'PASS' if rep.passed else 'FAIL'}", file=stream)


def _fmt(v):
    if isinstance(v, float):
        return f"{v:.3e}"
    return v


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    opts = {k: v for k, v in vars(args).items() if k not in ("command", "config", "quiet")}
    try:
        file_cfg = None
        if args.config:
            with open(args.config) as fh:
                file_cfg = json.load(fh)
            if not isinstance(file_cfg, dict):
                raise ConfigError("config file must hold a JSON object")
        cfg = resolve_config(args.command, file_cfg, opts)
    except (ConfigError, OSError, json.JSONDecodeError) as exc:
        print(f"tailsink: config error: {exc}", file=sys.stderr)
        return 2
    rep = run(cfg)
    if cfg.out:
        rep.write(cfg.out)
    if cfg.csv:
        rep.write_csv(cfg.csv)
    if not args.quiet:
        _print_report(rep)
    return 0 if rep.passed else 1


if __name__ == "__main__":
    sys.exit(main())
