"""Command-line driver: ``critsp {constants,solve,verify,sweep}``.

Exit codes: 0 success, 1 configuration or usage error, 2 non-convergence,
3 precondition violation, 4 a verification check failed.
"""
from __future__ import annotations

import argparse
import csv
import io
import logging
import math
import os
import sys
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.fft import next_fast_len

from .energy import (
    bubble_estimates,
    compute_constants,
    evaluate_J,
    fibering_max,
    fibering_max_closed_form,
    level_bound_check,
    mountain_pass_geometry_check,
    random_smooth_field,
)
from .errors import BoundaryLeakageError, ConfigError, CritSPError, PreconditionError, UsageError
from .field import Field, Grid3, check_leakage
from .models import BUILTIN_INSTANCES, ProblemInstance, builtin_instance, check_q, make_potential, make_weight
from .poisson import check_sobolev_bounds, nonlocal_energy, solve_poisson
from .solvers import (
    BallMinimizerConfig,
    MountainPassConfig,
    find_ball_minimizer,
    find_mountain_pass,
    least_energy_select,
    verify_solution,
)

log = logging.getLogger("critsp")

EXIT_OK, EXIT_CONFIG, EXIT_NONCONVERGED, EXIT_PRECONDITION, EXIT_CHECKS = 0, 1, 2, 3, 4

CONSTANTS_COLUMNS = ("S", "rho", "lambda0", "C0", "level_bound")
SUMMARY_COLUMNS = ("kind", "J", "grad_norm", "norm", "iterations", "checks", "guaranteed")
LOG_COLUMNS = ("iteration", "J", "grad_norm", "norm")
SWEEP_COLUMNS = ("lambda", "lambda_fraction", "c", "c_tilde", "saddle_grad", "ball_grad", "status")
VERIFY_COLUMNS = ("check", "status", "value", "detail")

SECTIONS = ("grid", "problem", "solver", "output")


# --------------------------------------------------------------------------
# configuration


@dataclass
class RunConfig:
    L: float = 12.0
    N: int = 48
    instance: str = "const_K_gaussian_f"
    q: float = 1.5
    lam: float | None = None
    lambda_fraction: float | None = 0.5
    K_spec: str | None = None
    f_spec: str | None = None
    grad_tol: float = 1e-6
    path_nodes: int = 10
    string_iters: int = 60
    newton_iters: int = 40
    ball_iters: int = 3000
    geometry_trials: int = 64
    bubble_eps: tuple = (0.4, 0.2, 0.1)
    bubble_L: float = 2.25
    bubble_zoom: float = 3.75
    out: str = "critsp_out"
    seed: int = 0
    strict: bool = False
    force: bool = False

    @property
    def grid(self) -> Grid3:
        return Grid3(self.L, self.N)

    @property
    def bubble_grid(self) -> Grid3:
        n = int(round(self.N * self.bubble_zoom))
        return Grid3(self.bubble_L, n + (n % 2))


# key -> (section, attribute, converter)
_KEYS = {
    ("grid", "L"): ("L", float),
    ("grid", "N"): ("N", int),
    ("grid", "bubble_L"): ("bubble_L", float),
    ("grid", "bubble_zoom"): ("bubble_zoom", float),
    ("problem", "instance"): ("instance", str),
    ("problem", "q"): ("q", float),
    ("problem", "lambda"): ("lam", float),
    ("problem", "lambda_fraction"): ("lambda_fraction", float),
    ("problem", "K"): ("K_spec", str),
    ("problem", "f"): ("f_spec", str),
    ("solver", "grad_tol"): ("grad_tol", float),
    ("solver", "path_nodes"): ("path_nodes", int),
    ("solver", "string_iters"): ("string_iters", int),
    ("solver", "newton_iters"): ("newton_iters", int),
    ("solver", "ball_iters"): ("ball_iters", int),
    ("solver", "geometry_trials"): ("geometry_trials", int),
    ("solver", "bubble_eps"): ("bubble_eps", lambda s: tuple(float(x) for x in s.split(","))),
    ("output", "dir"): ("out", str),
    ("output", "seed"): ("seed", int),
    ("output", "strict"): ("strict", lambda s: _parse_bool(s)),
}


def _parse_bool(s: str) -> bool:
    low = s.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def parse_config(text: str) -> RunConfig:
    """Parse ``[section]`` / ``key = value`` text; errors carry line numbers."""
    values: dict = {}
    lines: dict = {}
    section = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].split(";", 1)[0].strip()
        if not line:
            continue
        if line.startswith("["):
            if not line.endswith("]"):
                raise ConfigError(f"malformed section header {raw.strip()!r}", lineno)
            section = line[1:-1].strip()
            if section not in SECTIONS:
                raise ConfigError(f"unknown section [{section}]; expected one of {', '.join(SECTIONS)}", lineno)
            continue
        if "=" not in line:
            raise ConfigError(f"expected 'key = value', got {raw.strip()!r}", lineno)
        if section is None:
            raise ConfigError("key outside any section", lineno)
        key, val = (p.strip() for p in line.split("=", 1))
        spec = _KEYS.get((section, key))
        if spec is None:
            raise ConfigError(f"unknown key {key!r} in [{section}]", lineno)
        attr, conv = spec
        if attr in values:
            raise ConfigError(f"duplicate key {key!r}", lineno)
        try:
            values[attr] = conv(val)
        except ValueError as exc:
            raise ConfigError(f"bad value for {key}: {exc}", lineno) from None
        lines[attr] = lineno

    has_lam = "lam" in values
    has_frac = "lambda_fraction" in values
    if has_lam and has_frac:
        raise ConfigError("give either lambda or lambda_fraction, not both", lines["lambda_fraction"])
    if has_lam:
        values["lambda_fraction"] = None
    cfg = RunConfig(**values)
    if "q" in values:
        try:
            check_q(cfg.q)
        except UsageError as exc:
            raise ConfigError(str(exc), lines["q"]) from None
    if cfg.instance == "custom":
        for attr, name in (("K_spec", "K"), ("f_spec", "f")):
            if getattr(cfg, attr) is None:
                raise ConfigError(f"instance = custom needs a '{name}' spec in [problem]", lines.get("instance"))
    elif cfg.instance not in BUILTIN_INSTANCES:
        raise ConfigError(
            f"unknown instance {cfg.instance!r}; choose custom or one of {', '.join(BUILTIN_INSTANCES)}",
            lines.get("instance"),
        )
    try:
        cfg.grid
    except UsageError as exc:
        raise ConfigError(str(exc), lines.get("N", lines.get("L"))) from None
    if next_fast_len(cfg.N) != cfg.N:
        warnings.warn(f"N={cfg.N} has large prime factors; FFTs will be slower", stacklevel=2)
    return cfg


def load_config(path: str | os.PathLike) -> RunConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from None
    return parse_config(text)


def _parse_spec(spec: str) -> tuple[str, dict]:
    """``"kind key=value ..."`` -> ``(kind, {key: float})``."""
    parts = spec.split()
    if not parts:
        raise ConfigError("empty coefficient spec")
    params = {}
    for p in parts[1:]:
        if "=" not in p:
            raise ConfigError(f"bad coefficient parameter {p!r}; expected key=value")
        k, v = p.split("=", 1)
        try:
            params[k] = float(v)
        except ValueError:
            raise ConfigError(f"bad number in coefficient parameter {p!r}") from None
    return parts[0], params


def build_instance(cfg: RunConfig, grid: Grid3 | None = None, lam: float | None = None) -> ProblemInstance:
    """Instance on ``grid`` (default: the config grid) with absolute ``lam`` resolved from the config."""
    grid = grid or cfg.grid
    placeholder = 1.0
    if cfg.instance == "custom":
        kkind, kpar = _parse_spec(cfg.K_spec)
        fkind, fpar = _parse_spec(cfg.f_spec)
        try:
            pot = make_potential(grid, kkind, **kpar)
            wt = make_weight(grid, cfg.q, fkind, **fpar)
        except TypeError as exc:
            raise ConfigError(f"bad coefficient spec: {exc}") from None
        inst = ProblemInstance(pot, wt, placeholder, grid, "custom")
    else:
        inst = builtin_instance(cfg.instance, grid, cfg.q, placeholder)
    if lam is None:
        lam = resolve_lambda(cfg)
    return inst.with_lambda(lam)


def resolve_lambda(cfg: RunConfig, fraction: float | None = None) -> float:
    """Absolute lambda; fractions refer to lambda0 on the config grid."""
    frac = cfg.lambda_fraction if fraction is None else fraction
    if frac is None:
        return float(cfg.lam)
    base = build_instance(cfg, cfg.grid, lam=1.0)
    return float(frac) * compute_constants(base).lambda0


# --------------------------------------------------------------------------
# output helpers


def _fmt(x) -> str:
    if isinstance(x, bool):
        return "1" if x else "0"
    if isinstance(x, (float, np.floating)):
        return format(float(x), ".17g")
    return str(x)


def _csv_text(columns, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([_fmt(r.get(c, "")) for c in columns])
    return buf.getvalue()


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)


def dump_field(u: Field, path: Path, name: str) -> None:
    """Raw little-endian float64 in C order plus a ``.hdr`` text sidecar."""
    path.parent.mkdir(parents=True, exist_ok=True)
    np.ascontiguousarray(u.values, dtype="<f8").tofile(path.with_suffix(".f64"))
    header = (
        f"name = {name}\nL = {_fmt(u.grid.L)}\nN = {u.grid.N}\n"
        "dtype = float64 little-endian\norder = C (x slowest), shape N x N x N\n"
        "grid = x_i = -L + i * 2L/N, i = 0..N-1\n"
    )
    path.with_suffix(".hdr").write_text(header)


def load_field(path: str | os.PathLike) -> Field:
    """Inverse of :func:`dump_field`; ``path`` may name either file."""
    p = Path(path)
    meta = {}
    for line in p.with_suffix(".hdr").read_text().splitlines():
        if "=" in line:
            k, v = line.split("=", 1)
            meta[k.strip()] = v.strip()
    grid = Grid3(float(meta["L"]), int(meta["N"]))
    vals = np.fromfile(p.with_suffix(".f64"), dtype="<f8").reshape(grid.shape)
    return Field(grid, vals)


def _checks_text(checks: dict) -> str:
    return ";".join(f"{k}={'pass' if v else 'fail'}" for k, v in checks.items())


# --------------------------------------------------------------------------
# commands


def cmd_constants(cfg: RunConfig, out: Path | None = None):
    inst = build_instance(cfg)
    rep = compute_constants(inst)
    text = _csv_text(CONSTANTS_COLUMNS, [rep.as_row()])
    if out is not None:
        _write(out / "constants.csv", text)
    return rep, text


@dataclass
class SolveResult:
    lam: float
    saddle: object = None
    ball: object = None
    least: object = None
    verifications: dict = field(default_factory=dict)
    converged: bool = False
    summary: str = ""
    error: str = ""


def cmd_solve(cfg: RunConfig, out: Path | None = None, lam: float | None = None) -> SolveResult:
    inst = build_instance(cfg, lam=lam)
    mp_cfg = MountainPassConfig(path_nodes=cfg.path_nodes, max_iters=cfg.string_iters, grad_tol=cfg.grad_tol,
                                newton_max_iters=cfg.newton_iters, force=cfg.force)
    ball_cfg = BallMinimizerConfig(grad_tol=cfg.grad_tol, max_iters=cfg.ball_iters, force=cfg.force)
    saddle = find_mountain_pass(inst, mp_cfg)
    ball = find_ball_minimizer(inst, config=ball_cfg)
    res = SolveResult(lam=inst.lam, saddle=saddle, ball=ball)
    reports = [saddle, ball]
    for r in reports:
        v = verify_solution(inst, r, seed=cfg.seed)
        res.verifications[r.kind] = v
        r.checks.update({f"verify_{k}": ok for k, ok in v.checks.items()})
        check_leakage(r.u, r.kind, strict=cfg.strict)
    saddle.checks["separation"] = bool(
        np.sqrt(max(_h1_dist_sq(saddle.u, ball.u), 0.0)) > 0.1 * saddle.norm
    )
    res.converged = saddle.converged and ball.converged
    if res.converged:
        res.least = least_energy_select(reports)
        reports.append(res.least)
    rows = [
        {"kind": r.kind, "J": r.energy, "grad_norm": r.grad_norm, "norm": r.norm, "iterations": r.iterations,
         "checks": _checks_text(r.checks), "guaranteed": r.guaranteed}
        for r in reports
    ]
    res.summary = _csv_text(SUMMARY_COLUMNS, rows)
    if out is not None:
        _write(out / "summary.csv", res.summary)
        for r in (saddle, ball):
            extra = sorted({k for row in r.log for k in row} - set(LOG_COLUMNS))
            _write(out / f"{r.kind}_log.csv", _csv_text(LOG_COLUMNS + tuple(extra), r.log))
            dump_field(r.u, out / r.kind, r.kind)
    return res


def _h1_dist_sq(a: Field, b: Field) -> float:
    from .field import h1_norm

    return h1_norm(a - b) ** 2


def run_verify_suite(cfg: RunConfig) -> list[dict]:
    """All identity and inequality checks as ``{check, status, value, detail}`` rows."""
    rows: list[dict] = []
    rng = np.random.default_rng(cfg.seed)

    def add(name, ok, value=float("nan"), detail=""):
        status = ok if isinstance(ok, str) else ("pass" if ok else "fail")
        rows.append({"check": name, "status": status, "value": value, "detail": detail})

    inst = build_instance(cfg)
    grid = inst.grid
    samples = [random_smooth_field(grid, rng) for _ in range(5)]

    # potential: homogeneity, energy identity, sign
    worst_scale = worst_id = worst_neg = 0.0
    for u in samples:
        base = solve_poisson(inst, u, check=False)
        ref = float(np.max(np.abs(base.phi.values)))
        for t in (0.5, 2.0, 3.0):
            phit = solve_poisson(inst, u * t, check=False).phi.values
            worst_scale = max(worst_scale, float(np.max(np.abs(phit - t**5 * base.phi.values))) / (t**5 * ref))
        nl = nonlocal_energy(inst, u, base.phi)
        worst_id = max(worst_id, abs(base.d12_norm**2 - nl) / nl)
        worst_neg = max(worst_neg, -base.phi.min() / base.phi.max())
    add("phi_scaling", worst_scale <= 1e-12, worst_scale, "phi_{tu} = t^5 phi_u, t in {0.5,2,3}")
    add("phi_energy_identity", worst_id <= 1e-6, worst_id, "||phi||_D^2 = int K phi |u|^5")
    add("phi_nonnegative", worst_neg <= 1e-10, worst_neg, "min(phi)/max(phi) >= -1e-10")

    sob = [check_sobolev_bounds(inst, u) for u in samples]
    add("sobolev_bounds", all(s.holds for s in sob), min(min(s.phi_slack, s.nonlocal_slack) for s in sob),
        "minimum slack")

    # fibering scaling of J
    u = samples[0]
    br = evaluate_J(inst, u)
    worst = 0.0
    for t in (0.5, 1.0, 2.0):
        pred = br.quadratic * t**2 - br.nonlocal_ * t**10 - br.concave * t**inst.q
        got = evaluate_J(inst, u * t).total
        worst = max(worst, abs(got - pred) / max(abs(got), 1e-300))
    add("fibering_scaling", worst <= 1e-8, worst, "J(tu) three-term prediction")

    # fibering max identity with the concave term removed
    worst = 0.0
    for _ in range(10):
        C1, C2 = rng.uniform(0.1, 10.0, size=2)
        _t, m = fibering_max(lambda t, C1=C1, C2=C2: C1 * t * t - C2 * t**10)
        ref = fibering_max_closed_form(C1, C2)
        worst = max(worst, abs(m - ref) / ref)
    add("fibering_max_identity", worst <= 1e-8, worst, "max C1 t^2 - C2 t^10")

    c = compute_constants(inst)
    lo = compute_constants(inst.with_lambda(c.lambda0 * 0.999)).alpha_floor
    hi = compute_constants(inst.with_lambda(c.lambda0 * 1.001)).alpha_floor
    add("alpha_floor_sign", lo > 0 and hi <= 0, lo, "positive below lambda0, nonpositive above")

    try:
        geo = mountain_pass_geometry_check(inst, trials=cfg.geometry_trials, seed=cfg.seed)
        add("mountain_pass_geometry", geo.passed, geo.min_J, f"alpha_floor={_fmt(geo.alpha_floor)}")
    except PreconditionError as exc:
        add("mountain_pass_geometry", "precondition", float("nan"), str(exc))

    # bubble asymptotics on a zoomed grid around x0
    try:
        bgrid = cfg.bubble_grid
        binst = build_instance(cfg, bgrid, lam=inst.lam)
        be = bubble_estimates(binst, cfg.bubble_eps)
        add("bubble_grad_slope", be.checks["grad_slope"], be.slope_grad, "|grad v|^2 - S^{3/2} = O(eps)")
        add("bubble_l2_slope", be.checks["l2_slope"], be.slope_l2, "|v|_2^2 = O(eps)")
        if be.holder_identically_zero:
            add("bubble_holder_term", be.checks["holder_zero"], 0.0, "K constant: identically zero")
        else:
            add("bubble_holder_term", be.checks["holder_slope"], be.slope_holder, f"slope >= beta-0.15, beta={be.beta:g}")
        lb = level_bound_check(binst, cfg.bubble_eps)
        best = min(e.max_J for e in lb.entries)
        add("level_bound", lb.passed, best, f"level_bound={_fmt(lb.level_bound)}")
    except PreconditionError as exc:
        for name in ("bubble_grad_slope", "bubble_l2_slope", "bubble_holder_term", "level_bound"):
            add(name, "precondition", float("nan"), str(exc))
    return rows


def cmd_verify(cfg: RunConfig, out: Path | None = None):
    rows = run_verify_suite(cfg)
    text = _csv_text(VERIFY_COLUMNS, rows)
    if out is not None:
        _write(out / "verify.csv", text)
    return rows, text


def _parse_lambdas(text: str) -> list[float]:
    try:
        vals = [float(x) for x in text.split(",") if x.strip()]
    except ValueError as exc:
        raise UsageError(f"bad --lambdas list: {exc}") from None
    if not vals:
        raise UsageError("--lambdas list is empty")
    if any(not (v > 0 and math.isfinite(v)) for v in vals):
        raise UsageError("--lambdas entries must be positive")
    return vals


def _dedupe(vals: list[float]) -> list[float]:
    out = sorted(set(vals))
    if len(out) < len(vals):
        warnings.warn(f"duplicate lambda values removed; running {len(out)} of {len(vals)}", stacklevel=2)
    return out


def cmd_sweep(cfg: RunConfig, lambdas: list[float], out: Path | None = None, absolute: bool = False,
              workers: int | None = None):
    """One solve per lambda (fractions of lambda0 unless ``absolute``), aggregated by lambda."""
    if not lambdas:
        raise UsageError("lambda list is empty")
    vals = _dedupe(list(lambdas))
    base = build_instance(cfg, lam=1.0)
    lam0 = compute_constants(base).lambda0
    pairs = [(v, v / lam0) if absolute else (v * lam0, v) for v in vals]

    def one(idx_pair):
        idx, (lam, frac) = idx_pair
        sub = out / f"lambda_{idx:02d}" if out is not None else None
        try:
            res = cmd_solve(cfg, sub, lam=lam)
            status = "ok" if res.converged else "nonconverged"
            return {"lambda": lam, "lambda_fraction": frac, "c": res.saddle.energy, "c_tilde": res.ball.energy,
                    "saddle_grad": res.saddle.grad_norm, "ball_grad": res.ball.grad_norm, "status": status}
        except CritSPError as exc:
            return {"lambda": lam, "lambda_fraction": frac, "c": float("nan"), "c_tilde": float("nan"),
                    "saddle_grad": float("nan"), "ball_grad": float("nan"), "status": f"error: {exc}"}

    n_workers = workers or min(len(pairs), int(os.environ.get("SP_SWEEP_WORKERS", "0")) or len(pairs))
    with ThreadPoolExecutor(max_workers=max(1, n_workers)) as pool:
        rows = list(pool.map(one, enumerate(pairs)))
    rows.sort(key=lambda r: r["lambda"])
    text = _csv_text(SWEEP_COLUMNS, rows)
    if out is not None:
        _write(out / "sweep.csv", text)
    return rows, text


# --------------------------------------------------------------------------
# entry point


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="critsp", description="Critical points of a Schrödinger-Poisson energy with a concave term.")
    p.add_argument("command", choices=("constants", "solve", "verify", "sweep"))
    p.add_argument("--config", help="run configuration file ([grid] [problem] [solver] [output])")
    p.add_argument("--out", help="output directory (overrides [output] dir)")
    p.add_argument("--seed", type=int, help="random seed (overrides [output] seed)")
    p.add_argument("--force", action="store_true", help="allow lambda >= lambda0 (no guarantee)")
    p.add_argument("--strict", action="store_true", help="boundary leakage is an error")
    p.add_argument("--lambdas", help="comma-separated lambda/lambda0 values for sweep")
    p.add_argument("--absolute", action="store_true", help="--lambdas are absolute lambda values")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = load_config(args.config) if args.config else RunConfig()
        cfg = replace(cfg, force=args.force or cfg.force, strict=args.strict or cfg.strict)
        if args.seed is not None:
            cfg = replace(cfg, seed=args.seed)
        if args.out:
            cfg = replace(cfg, out=args.out)
        out = Path(cfg.out)

        if args.command == "constants":
            rep, text = cmd_constants(cfg, out)
            sys.stdout.write(text)
            return EXIT_OK
        if args.command == "solve":
            res = cmd_solve(cfg, out)
            sys.stdout.write(res.summary)
            return EXIT_OK if res.converged else EXIT_NONCONVERGED
        if args.command == "verify":
            rows, text = cmd_verify(cfg, out)
            sys.stdout.write(text)
            if any(r["status"] == "precondition" for r in rows):
                return EXIT_PRECONDITION
            return EXIT_OK if all(r["status"] == "pass" for r in rows) else EXIT_CHECKS
        if args.lambdas is None:
            raise UsageError("sweep needs --lambdas")
        rows, text = cmd_sweep(cfg, _parse_lambdas(args.lambdas), out, absolute=args.absolute)
        sys.stdout.write(text)
        return EXIT_OK if all(r["status"] == "ok" for r in rows) else EXIT_NONCONVERGED
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (PreconditionError, BoundaryLeakageError) as exc:
        print(f"precondition violated: {exc}", file=sys.stderr)
        return EXIT_PRECONDITION
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except CritSPError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NONCONVERGED


if __name__ == "__main__":
    sys.exit(main())
