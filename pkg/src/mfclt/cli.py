"""Experiment orchestration CLI.

Subcommands: ``clt run|decompose|scaling``, ``meanfield run``, ``derivcheck``,
``metrics check``.  Options come from flags or an INI config file (sections
``[experiment]``, ``[law]``, ``[model]``, ``[output]``); flags override file
values.  A seed is always required: there is no wall-clock default, so the
same invocation reproduces the same artifacts byte for byte (the manifest's
wall-time field is the one exception).

Every run writes, next to its JSON report, a manifest with the full resolved
config, package version, RNG family, and per-check outcomes; the manifest is
created before the run starts and finalized afterwards, so a crash leaves a
visibly unfinished manifest.  JSON numbers carry 17 significant digits;
non-finite values serialize as null.  The only environment override is
MFCLT_OUT_DIR for the output directory.

Exit codes: 0 all enabled assertions pass, 2 an assertion failed, 3 bad
configuration, 4 numeric/runtime failure inside an engine.
"""
from __future__ import annotations

import argparse
import configparser
import os
import sys
import time
from dataclasses import dataclass, field

import numpy as np

from . import __version__
from .clt_engine import (
    EngineError,
    martingale_decomposition,
    remainder_scaling,
    run_clt_experiment,
)
from .functionals import (
    FunctionalError,
    derivative_pairing,
    gateaux_numeric,
    lfd,
    make_functional,
    registry_names,
)
from .laws import LawError, SamplerSpec, as_law
from .mean_field import (
    CovarianceConfig,
    MeanFieldError,
    cramer_wold_normality,
    fluctuation_process,
    make_model,
    model_names,
    theoretical_covariance,
)
from .measures import (
    DiscreteMeasure,
    MeasureError,
    MetricKind,
    _lp_transport_cost,
    _pairwise_abs_diff,
    distance,
    metric_axiom_suite,
    tv_wasserstein_inequality_check,
)
from .rng import stream

EXIT_PASS = 0
EXIT_ASSERTION = 2
EXIT_CONFIG = 3
EXIT_NUMERIC = 4

_KINDS = ("clt", "decompose", "scaling", "meanfield", "derivcheck", "metrics")


class ConfigError(ValueError):
    """Invalid or incomplete experiment configuration."""


@dataclass
class ExperimentConfig:
    kind: str
    seed: int
    functional: str | None = None
    model: str | None = None
    phi: str | None = None
    law: str = "normal:0,1"
    n: int = 1000
    reps: int = 200
    dt: float = 0.01
    times: tuple[float, ...] = (0.5, 1.0)
    n_grid: tuple[int, ...] = (100, 316, 1000, 3162)
    quad_points: int = 8
    workers: int = 1
    ref_size: int | None = None
    force: bool = True
    check: bool = True
    out: str | None = None
    out_dir: str = "."
    probes: int = 50

    def validate(self) -> None:
        problems = []
        if self.kind not in _KINDS:
            problems.append(f"unknown kind {self.kind!r}")
        if self.n <= 0 or self.reps <= 0 or self.quad_points <= 0:
            problems.append("n, reps, quad_points must be positive")
        if self.dt <= 0:
            problems.append("dt must be positive")
        if self.workers <= 0:
            problems.append("workers must be positive")
        if any(b <= a for a, b in zip(self.n_grid, self.n_grid[1:])):
            problems.append("n_grid must be strictly increasing")
        if any(b <= a for a, b in zip(self.times, self.times[1:])):
            problems.append("times must be strictly increasing")
        if self.kind in ("clt", "decompose", "scaling") and self.functional:
            try:
                make_functional(self.functional)
            except FunctionalError as exc:
                problems.append(str(exc))
        if self.kind in ("clt", "decompose", "scaling"):
            try:
                parse_law(self.law)
            except ConfigError as exc:
                problems.append(str(exc))
        if self.kind == "meanfield" and self.model not in model_names():
            problems.append(
                f"unknown model {self.model!r}; registry: {', '.join(model_names())}")
        if self.kind == "meanfield" and self.phi:
            try:
                make_functional(self.phi)
            except FunctionalError as exc:
                problems.append(str(exc))
        if problems:
            raise ConfigError("; ".join(problems))


def parse_law(text: str) -> object:
    """Law specs: normal:<mean>,<sd> | uniform:<low>,<high> | atoms:<path>."""
    kind, _, rest = text.partition(":")
    try:
        if kind == "normal":
            mean, sd = (float(v) for v in rest.split(",")) if rest else (0.0, 1.0)
            return SamplerSpec.normal(mean, sd)
        if kind == "uniform":
            low, high = (float(v) for v in rest.split(",")) if rest else (0.0, 1.0)
            return SamplerSpec.uniform(low, high)
        if kind == "atoms":
            with open(rest, encoding="utf-8") as fh:
                return SamplerSpec.discrete(DiscreteMeasure.from_text(fh.read()))
        raise ConfigError(f"unknown law spec {text!r} (normal:|uniform:|atoms:)")
    except (ValueError, OSError, MeasureError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"bad law spec {text!r}: {exc}") from exc


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(v) for v in text.split(","))


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(v) for v in text.split(","))


def _read_ini(path: str) -> dict:
    parser = configparser.ConfigParser()
    if not parser.read(path):
        raise ConfigError(f"config file {path!r} not found or unreadable")
    out: dict = {}
    exp = parser["experiment"] if parser.has_section("experiment") else {}
    for key in ("kind", "functional", "phi"):
        if key in exp:
            out[key] = exp[key]
    for key in ("seed", "n", "reps", "quad_points", "workers", "ref_size", "probes"):
        if key in exp:
            out[key] = int(exp[key])
    if "dt" in exp:
        out["dt"] = float(exp["dt"])
    if "times" in exp:
        out["times"] = _floats(exp["times"])
    if "n_grid" in exp:
        out["n_grid"] = _ints(exp["n_grid"])
    if parser.has_section("law") and "spec" in parser["law"]:
        out["law"] = parser["law"]["spec"]
    if parser.has_section("model"):
        sec = parser["model"]
        if "name" in sec:
            out["model"] = sec["name"]
        if "phi" in sec:
            out["phi"] = sec["phi"]
        if "force" in sec:
            out["force"] = sec.getboolean("force")
    if parser.has_section("output"):
        sec = parser["output"]
        if "json" in sec:
            out["out"] = sec["json"]
        if "dir" in sec:
            out["out_dir"] = sec["dir"]
    return out


def parse_config(argv: list[str]) -> ExperimentConfig:
    parser = argparse.ArgumentParser(
        prog="mfclt", description=__doc__.splitlines()[0], exit_on_error=False)
    sub = parser.add_subparsers(dest="group", required=True)

    def common(p):
        p.add_argument("--config", help="INI config file; flags override it")
        p.add_argument("--seed", type=int, help="required somewhere: flag or file")
        p.add_argument("--out", help="JSON report path")
        p.add_argument("--out-dir", help="output directory")
        p.add_argument("--workers", type=int)

    clt = sub.add_parser("clt", exit_on_error=False)
    clt_sub = clt.add_subparsers(dest="action", required=True)
    for action in ("run", "decompose", "scaling"):
        p = clt_sub.add_parser(action, exit_on_error=False)
        common(p)
        p.add_argument("--functional")
        p.add_argument("--law")
        p.add_argument("--n", type=int)
        p.add_argument("--reps", type=int)
        p.add_argument("--quad-points", type=int)
        if action == "scaling":
            p.add_argument("--n-grid", type=_ints)

    meanfield = sub.add_parser("meanfield", exit_on_error=False)
    mf_sub = meanfield.add_subparsers(dest="action", required=True)
    p = mf_sub.add_parser("run", exit_on_error=False)
    common(p)
    p.add_argument("--model")
    p.add_argument("--phi")
    p.add_argument("--n", type=int)
    p.add_argument("--reps", type=int)
    p.add_argument("--times", type=_floats)
    p.add_argument("--dt", type=float)
    p.add_argument("--ref-size", type=int)
    p.add_argument("--no-force", action="store_true",
                   help="honor the covariance hypothesis gate strictly")

    p = sub.add_parser("derivcheck", exit_on_error=False)
    common(p)
    p.add_argument("--probes", type=int)

    metrics = sub.add_parser("metrics", exit_on_error=False)
    met_sub = metrics.add_subparsers(dest="action", required=True)
    p = met_sub.add_parser("check", exit_on_error=False)
    common(p)

    try:
        ns = parser.parse_args(argv)
    except argparse.ArgumentError as exc:
        raise ConfigError(f"bad arguments: {exc}") from exc
    except SystemExit as exc:
        if exc.code in (0, None):  # --help
            raise
        raise ConfigError("bad arguments (see usage)") from exc

    kind = {"clt": ns.action if ns.group == "clt" else None,
            "meanfield": "meanfield",
            "derivcheck": "derivcheck",
            "metrics": "metrics"}.get(ns.group)
    if ns.group == "clt":
        kind = {"run": "clt", "decompose": "decompose", "scaling": "scaling"}[ns.action]

    values: dict = {}
    if getattr(ns, "config", None):
        values.update(_read_ini(ns.config))
    flag_map = {
        "seed": "seed", "functional": "functional", "law": "law", "n": "n",
        "reps": "reps", "quad_points": "quad_points", "n_grid": "n_grid",
        "model": "model", "phi": "phi", "times": "times", "dt": "dt",
        "ref_size": "ref_size", "workers": "workers", "out": "out",
        "out_dir": "out_dir", "probes": "probes",
    }
    for attr, key in flag_map.items():
        val = getattr(ns, attr, None)
        if val is not None:
            values[key] = val
    if getattr(ns, "no_force", False):
        values["force"] = False
    values["kind"] = kind
    if "out_dir" not in values:
        values["out_dir"] = os.environ.get("MFCLT_OUT_DIR", ".")

    if values.get("seed") is None:
        raise ConfigError("a seed is required (flag --seed or [experiment] seed)")
    cfg = ExperimentConfig(**values)
    cfg.validate()
    return cfg


# ---------------------------------------------------------------------------
# serialization


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        v = float(value)
        if not np.isfinite(v):
            return "null"
        return format(v, ".17g")
    if value is None:
        return "null"
    if isinstance(value, str):
        out = value.replace("\\", "\\\\").replace('"', '\\"')
        return f'"{out}"'
    if isinstance(value, np.ndarray):
        return _fmt(value.tolist())
    if isinstance(value, (list, tuple)):
        return "[" + ", ".join(_fmt(v) for v in value) + "]"
    if isinstance(value, dict):
        items = (f"{_fmt(str(k))}: {_fmt(v)}" for k, v in value.items())
        return "{" + ", ".join(items) + "}"
    raise TypeError(f"cannot serialize {type(value).__name__}")


def dumps_json(payload: dict) -> str:
    """Deterministic JSON with 17-significant-digit floats, null non-finites."""
    return _fmt(payload) + "\n"


def _write(path: str, text: str) -> None:
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(text)


def _csv_lines(header: str, rows) -> str:
    lines = [header]
    for row in rows:
        if np.ndim(row) == 0:
            lines.append(format(float(row), ".17g"))
        else:
            lines.append(",".join(format(float(v), ".17g") for v in row))
    return "\n".join(lines) + "\n"


@dataclass
class Manifest:
    path: str
    config: dict
    checks: dict = field(default_factory=dict)
    status: str = "running"
    started: float = 0.0

    def begin(self) -> None:
        self.started = time.time()
        self._dump(wall_time_s=None)

    def finish(self, status: str) -> None:
        self.status = status
        self._dump(wall_time_s=time.time() - self.started)

    def _dump(self, wall_time_s) -> None:
        _write(self.path, dumps_json({
            "artifact_version": __version__,
            "rng": "philox4x64 counter streams",
            "status": self.status,
            "config": self.config,
            "checks": self.checks,
            "wall_time_s": wall_time_s,
        }))


def _config_echo(cfg: ExperimentConfig) -> dict:
    return {k: v for k, v in vars(cfg).items()}


# ---------------------------------------------------------------------------
# runners


def _paths(cfg: ExperimentConfig, stem: str) -> tuple[str, str, str]:
    base = cfg.out or os.path.join(cfg.out_dir, f"{stem}.json")
    if not os.path.isabs(base):
        base = os.path.join(cfg.out_dir, base) if cfg.out else base
    root, _ = os.path.splitext(base)
    return base, root + ".csv", root + ".manifest.json"


def _run_clt(cfg: ExperimentConfig, manifest: Manifest, json_path: str,
             csv_path: str) -> bool:
    u = make_functional(cfg.functional or "linear-mean")
    law = parse_law(cfg.law)
    report = run_clt_experiment(u, law, cfg.n, cfg.reps, cfg.seed,
                                workers=cfg.workers)
    _write(csv_path, _csv_lines("sqrtN_deltaU", report.samples))
    payload = {
        "n": report.n,
        "reps": report.replications,
        "seed": report.seed,
        "sigma2_theory": report.sigma2_theory,
        "sigma2_empirical": report.sigma2_empirical,
        "ks_stat": report.ks_stat,
        "ks_pvalue": report.ks_pvalue,
        "samples_csv_path": os.path.basename(csv_path),
    }
    _write(json_path, dumps_json(payload))
    if report.degenerate:
        manifest.checks["degenerate_variance_shrinks"] = bool(
            report.sigma2_empirical < 0.05)
        return manifest.checks["degenerate_variance_shrinks"]
    tol = 0.1 * report.sigma2_theory + 3.0 * (
        report.sigma2_empirical_stderr + report.sigma2_theory_stderr)
    manifest.checks["ks_pvalue_gt_0.01"] = bool(report.ks_pvalue > 0.01)
    manifest.checks["variance_within_10pct_plus_3se"] = bool(
        abs(report.sigma2_empirical - report.sigma2_theory) <= tol)
    return all(manifest.checks.values())


def _run_decompose(cfg: ExperimentConfig, manifest: Manifest, json_path: str,
                   csv_path: str) -> bool:
    from .clt_engine import decompose_many

    u = make_functional(cfg.functional or "mean-square")
    law = parse_law(cfg.law)
    records = decompose_many(u, law, cfg.n, cfg.reps, cfg.seed,
                             quad_points=cfg.quad_points)
    residuals = np.asarray([r.identity_residual for r in records])
    _write(csv_path, _csv_lines("identity_residual", residuals))
    payload = {
        "n": cfg.n, "reps": cfg.reps, "seed": cfg.seed,
        "quad_points": cfg.quad_points,
        "max_residual": float(residuals.max()),
        "mean_abs_q": float(np.mean([abs(r.q_n) for r in records])),
        "mean_abs_r": float(np.mean([abs(r.r_n) for r in records])),
        "samples_csv_path": os.path.basename(csv_path),
    }
    _write(json_path, dumps_json(payload))
    manifest.checks["identity_residual_lt_1e-8"] = bool(residuals.max() < 1e-8)
    return manifest.checks["identity_residual_lt_1e-8"]


def _run_scaling(cfg: ExperimentConfig, manifest: Manifest, json_path: str,
                 csv_path: str) -> bool:
    u = make_functional(cfg.functional or "mean-square")
    law = parse_law(cfg.law)
    report = remainder_scaling(u, law, cfg.n_grid, cfg.reps, cfg.seed,
                               quad_points=cfg.quad_points, workers=cfg.workers)
    _write(csv_path, _csv_lines(
        "n,mean_abs_remainder",
        np.column_stack([cfg.n_grid, report.mean_abs_remainder])))
    payload = {
        "n_grid": list(cfg.n_grid), "reps": cfg.reps, "seed": cfg.seed,
        "slope": report.slope, "r2": report.r_squared,
        "mean_abs_remainder": list(report.mean_abs_remainder),
        "degenerate": report.degenerate,
        "samples_csv_path": os.path.basename(csv_path),
    }
    _write(json_path, dumps_json(payload))
    if report.degenerate:
        manifest.checks["remainder_identically_zero"] = True
        return True
    manifest.checks["slope_le_-0.5"] = bool(report.slope <= -0.5)
    manifest.checks["r2_gt_0.9"] = bool(report.r_squared > 0.9)
    return all(manifest.checks.values())


def _run_meanfield(cfg: ExperimentConfig, manifest: Manifest, json_path: str,
                   csv_path: str) -> bool:
    model = make_model(cfg.model or "ou")
    phi = make_functional(cfg.phi or "linear-mean")
    report = fluctuation_process(phi, model, cfg.n, cfg.times, cfg.reps,
                                 cfg.seed, dt=cfg.dt, ref_size=cfg.ref_size,
                                 workers=cfg.workers)
    cov_cfg = CovarianceConfig(dt=cfg.dt, force=cfg.force)
    theory = theoretical_covariance(phi, model, cfg.times, cov_cfg, cfg.seed)
    directions = cramer_wold_normality(report.f_samples, theory.matrix)
    header = ",".join(f"F_t{t:g}" for t in cfg.times)
    _write(csv_path, _csv_lines(header, report.f_samples))
    payload = {
        "times": list(cfg.times),
        "n": cfg.n, "reps": cfg.reps, "seed": cfg.seed, "dt": cfg.dt,
        "sigma_empirical": report.sigma_empirical,
        "sigma_empirical_stderr": report.sigma_empirical_stderr,
        "sigma_theory": theory.matrix,
        "sigma_theory_stderr": theory.stderr,
        "hypothesis_gate": theory.gate,
        "cramer_wold": [
            {"direction": list(d.direction), "pvalue": d.pvalue,
             "skipped": d.skipped} for d in directions],
        "reference_size": report.ref_size,
        "reference_bias_scaled": report.ref_bias_scaled,
        "samples_csv_path": os.path.basename(csv_path),
    }
    _write(json_path, dumps_json(payload))
    combined = np.sqrt(report.sigma_empirical_stderr ** 2 + theory.stderr ** 2)
    gap = np.abs(report.sigma_empirical - theory.matrix)
    manifest.checks["covariance_within_3_combined_se"] = bool(
        np.all(gap <= 3.0 * combined + 1e-12))
    live = [d.pvalue for d in directions if not d.skipped]
    manifest.checks["cramer_wold_p_gt_0.01"] = bool(
        all(p > 0.01 for p in live)) if live else True
    return all(manifest.checks.values())


def _run_derivcheck(cfg: ExperimentConfig, manifest: Manifest, json_path: str,
                    csv_path: str) -> bool:
    rng = stream(cfg.seed, "derivcheck")
    gaps: dict[str, float] = {}
    names = [n if ":" not in n else "quantile:0.5" for n in registry_names()]
    for name in names:
        u = make_functional(name)
        worst = 0.0
        for _ in range(cfg.probes):
            mu = DiscreteMeasure(rng.normal(size=(4, 1)))
            nu = DiscreteMeasure(rng.normal(size=(3, 1)))
            if name.startswith("quantile"):
                mu = as_law(SamplerSpec.normal(float(rng.normal()) * 0.2, 1.0))
            numeric = gateaux_numeric(u, mu, nu, eps=1e-3, richardson=2)
            symbolic = derivative_pairing(lfd(u, 1), mu, nu)
            denom = 1.0 + abs(symbolic)
            worst = max(worst, abs(numeric - symbolic) / denom)
        gaps[name] = worst
    payload = {"probes": cfg.probes, "seed": cfg.seed,
               "max_rel_gap": max(gaps.values()), "per_functional": gaps}
    _write(json_path, dumps_json(payload))
    manifest.checks["max_gap_lt_1e-6"] = bool(max(gaps.values()) < 1e-6)
    return manifest.checks["max_gap_lt_1e-6"]


def _run_metrics(cfg: ExperimentConfig, manifest: Manifest, json_path: str,
                 csv_path: str) -> bool:
    rng = stream(cfg.seed, "metrics")
    axioms = metric_axiom_suite(MetricKind.wasserstein(0.5), rng,
                                n_triples=200, tol=1e-10)
    lp_ok = True
    worst_lp = 0.0
    for _ in range(50):
        mu = DiscreteMeasure(rng.normal(size=(int(rng.integers(1, 7)), 1)))
        nu = DiscreteMeasure(rng.normal(size=(int(rng.integers(1, 7)), 1)))
        ell = float(rng.uniform(1.0, 3.0))
        fast = distance(mu, nu, MetricKind.wasserstein(ell))
        cost = _pairwise_abs_diff(mu, nu) ** ell
        slow = _lp_transport_cost(cost, mu.weights, nu.weights) ** (1.0 / ell)
        worst_lp = max(worst_lp, abs(fast - slow))
        lp_ok = lp_ok and abs(fast - slow) <= 1e-9
    ineq_ok = True
    for _ in range(1000):
        mu = DiscreteMeasure(rng.normal(size=(int(rng.integers(1, 6)), 1)))
        nu = DiscreteMeasure(rng.normal(size=(int(rng.integers(1, 6)), 1)))
        ell = float(rng.uniform(0.3, 2.5))
        ineq_ok = ineq_ok and tv_wasserstein_inequality_check(mu, nu, ell)
    payload = {
        "seed": cfg.seed,
        "axiom_triples": axioms.triples,
        "axiom_max_violation": axioms.max_violation,
        "quantile_vs_lp_max_gap": worst_lp,
        "inequality_pairs": 1000,
    }
    _write(json_path, dumps_json(payload))
    manifest.checks["metric_axioms"] = bool(axioms.ok)
    manifest.checks["quantile_matches_lp"] = bool(lp_ok)
    manifest.checks["tv_wasserstein_inequality"] = bool(ineq_ok)
    return all(manifest.checks.values())


_RUNNERS = {
    "clt": _run_clt,
    "decompose": _run_decompose,
    "scaling": _run_scaling,
    "meanfield": _run_meanfield,
    "derivcheck": _run_derivcheck,
    "metrics": _run_metrics,
}


def run(cfg: ExperimentConfig) -> int:
    json_path, csv_path, manifest_path = _paths(cfg, cfg.kind)
    manifest = Manifest(manifest_path, _config_echo(cfg))
    manifest.begin()
    try:
        passed = _RUNNERS[cfg.kind](cfg, manifest, json_path, csv_path)
    except ConfigError as exc:
        manifest.finish("config-failure")
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (EngineError, MeanFieldError, FunctionalError, LawError,
            MeasureError, FloatingPointError) as exc:
        manifest.checks["error"] = f"{type(exc).__name__}: {exc}"
        manifest.finish("numeric-failure")
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    manifest.finish("done" if passed else "assertion-failure")
    if not passed:
        failing = [k for k, v in manifest.checks.items() if v is not True]
        print(f"assertion failure: {', '.join(failing)}", file=sys.stderr)
        return EXIT_ASSERTION
    return EXIT_PASS


def main(argv: list[str] | None = None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    try:
        cfg = parse_config(argv)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return run(cfg)


if __name__ == "__main__":
    sys.exit(main())
