"""Run orchestration: config ingestion, seeding, artifact persistence.

Configs are TOML files (schema documented in the README); runs are
content-addressed by a digest of the parsed config, and every artifact is a
tab-separated table with a header row.  The manifest is a flat
``key = value`` text file listing statuses, artifact paths and row counts.
All randomness flows through substreams keyed by (seed, stage, unit), so a
given (config, seed) pair reproduces every table byte for byte regardless
of worker count.

Exit codes: 0 all checks passed, 1 error, 2 a check failed, 3 inconclusive.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python 3.10
    import tomli as tomllib

from . import diagnostics, spectral, survival, tilted
from .env import EnvModel, EnvPoint, OffspringLaw, check_conditions
from .errors import BPRELabError, ConfigError, DeltaBoundError, UnsupportedFamilyError
from .matprod import project
from .streams import substream

STAGES = ("conditions", "lyapunov", "calibrate", "survival",
          "mu-tail", "harmonic", "diagnostics")

_STATUS_ORDER = {"pass": 0, "skipped": 0, "inconclusive": 1, "fail": 2, "error": 3}
_EXIT_OF_STATUS = {"pass": 0, "skipped": 0, "inconclusive": 3, "fail": 2, "error": 1}

LN2 = float(np.log(2.0))


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------


def load_config(path: str | Path) -> dict:
    try:
        with open(path, "rb") as fh:
            return tomllib.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"invalid TOML: {exc}")


def config_digest(cfg: dict) -> str:
    """Content hash of the parsed config, stable under key reordering."""
    canon = json.dumps(cfg, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode("utf-8")).hexdigest()[:16]


def _need(cfg: dict, path: str, typ=None):
    node: Any = cfg
    for part in path.split("."):
        if not isinstance(node, dict) or part not in node:
            raise ConfigError("missing required key", key_path=path)
        node = node[part]
    if typ is not None and not isinstance(node, typ):
        raise ConfigError(f"expected {typ}, got {type(node).__name__}", key_path=path)
    return node


def _get(cfg: dict, path: str, default):
    node: Any = cfg
    for part in path.split("."):
        if not isinstance(node, dict) or part not in node:
            return default
        node = node[part]
    return node


def build_model(cfg: dict) -> EnvModel:
    """Construct the environment model from the [model] section."""
    delta = float(_need(cfg, "model.declared_delta", (int, float)))
    scenarios = _need(cfg, "model.scenario", list)
    weights, points = [], []
    for idx, sc in enumerate(scenarios):
        key = f"model.scenario[{idx}]"
        if not isinstance(sc, dict):
            raise ConfigError("scenario must be a table", key_path=key)
        if "weight" not in sc:
            raise ConfigError("missing required key", key_path=key + ".weight")
        weights.append(float(sc["weight"]))
        family = sc.get("family", "poisson-product")
        if family == "poisson-product":
            if "mean_rows" not in sc:
                raise ConfigError("missing required key", key_path=key + ".mean_rows")
            points.append(EnvPoint.poisson(sc["mean_rows"]))
        elif family == "finite-table":
            laws_cfg = sc.get("law")
            if not laws_cfg:
                raise ConfigError("missing required key", key_path=key + ".law")
            laws = [OffspringLaw.table(lw["support"], lw["probs"]) for lw in laws_cfg]
            points.append(EnvPoint.table(laws))
        else:
            raise ConfigError(f"unknown family {family!r}", key_path=key + ".family")
    return EnvModel(weights=np.asarray(weights), points=tuple(points),
                    declared_delta=delta)


def validate_run_section(cfg: dict) -> int:
    seed = _need(cfg, "run.seed", int)
    n_lists = [("survival.n_list", _get(cfg, "survival.n_list", [10, 20, 40, 80, 160]))]
    for path, lst in n_lists:
        if any(b <= a for a, b in zip(lst, lst[1:])):
            raise ConfigError("list must be strictly increasing", key_path=path)
        if any(int(v) <= 0 for v in lst):
            raise ConfigError("entries must be positive", key_path=path)
    for path in ("survival.n_paths", "mu_tail.n_paths", "harmonic.n_paths",
                 "diagnostics.sweep_count"):
        val = _get(cfg, path, 1)
        if int(val) <= 0:
            raise ConfigError("count must be positive", key_path=path)
    return seed


# ---------------------------------------------------------------------------
# artifact writers
# ---------------------------------------------------------------------------


def _fmt(value) -> str:
    if isinstance(value, (bool, np.bool_)):
        return "true" if value else "false"
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(value)


def write_table(path: Path, columns: list[str], rows: list[tuple],
                header_comments: Optional[dict] = None) -> int:
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = []
    for key, val in (header_comments or {}).items():
        lines.append(f"# {key} = {_fmt(val)}")
    lines.append("\t".join(columns))
    for row in rows:
        lines.append("\t".join(_fmt(v) for v in row))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return len(rows)


@dataclass
class StageResult:
    status: str
    artifacts: dict[str, tuple[str, int]] = field(default_factory=dict)  # name -> (relpath, rows)
    keyvals: dict[str, Any] = field(default_factory=dict)
    seconds: float = 0.0


@dataclass
class RunRecord:
    digest: str
    seed: int
    out_dir: Path
    stages: dict[str, StageResult] = field(default_factory=dict)

    @property
    def status(self) -> str:
        worst = "pass"
        for res in self.stages.values():
            if _STATUS_ORDER[res.status] > _STATUS_ORDER[worst]:
                worst = res.status
        return worst

    @property
    def exit_code(self) -> int:
        return _EXIT_OF_STATUS[self.status]

    def manifest_lines(self) -> list[str]:
        lines = [f"config.digest = {self.digest}",
                 f"run.seed = {self.seed}",
                 f"run.status = {self.status}"]
        for stage, res in sorted(self.stages.items()):
            lines.append(f"stage.{stage}.status = {res.status}")
            lines.append(f"stage.{stage}.seconds = {res.seconds:.3f}")
            for name, (rel, rows) in sorted(res.artifacts.items()):
                lines.append(f"stage.{stage}.artifact.{name} = {rel}")
                lines.append(f"stage.{stage}.rows.{name} = {rows}")
            for key, val in sorted(res.keyvals.items()):
                lines.append(f"stage.{stage}.{key} = {_fmt(val)}")
        return lines

    def write_manifest(self):
        (self.out_dir / "manifest.txt").write_text(
            "\n".join(self.manifest_lines()) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# worker-pool helpers (module-level for picklability)
# ---------------------------------------------------------------------------


def _pmap(fn, payloads: list, workers: int) -> list:
    if workers <= 1 or len(payloads) <= 1:
        return [fn(p) for p in payloads]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, payloads))


def _survival_unit(payload) -> survival.SurvivalEstimate:
    model, sp1, method, n, i, n_paths, seed, unit = payload
    rng = substream(seed, "survival", unit)
    if method == survival.METHOD_IS:
        return survival.survival_is(model, n, i, n_paths, sp1, rng)
    if method == survival.METHOD_DIRECT:
        return survival.survival_direct(model, n, i, n_paths, rng, lam1=sp1.lam)
    est = survival.SurvivalEstimate(n=n, start_type=i, method=survival.METHOD_ENUM,
                                    estimate=survival.survival_exact_enum(model, n, i),
                                    se=0.0, n_samples=model.K**n)
    return est.attach_scale(sp1.lam)


def _mu_tail_unit(payload) -> tilted.MuTailTable:
    model, sp1, a, n_list, n_paths, seed, unit = payload
    x = np.ones(model.p) / model.p
    return tilted.mu_tail_estimate(x, a, n_list, model, sp1, n_paths,
                                   substream(seed, "mu-tail", unit))


# ---------------------------------------------------------------------------
# stages
# ---------------------------------------------------------------------------


def _spectral_kwargs(cfg: dict) -> dict:
    return {"tol": float(_get(cfg, "spectral.power_tol", 1e-13)),
            "max_iter": int(_get(cfg, "spectral.max_iter", 20000)),
            "residual_tol": float(_get(cfg, "spectral.residual_tol", 1e-6))}


def _grid_for(cfg: dict, model: EnvModel) -> spectral.DirectionGrid:
    size = _get(cfg, "spectral.grid_size", None)
    return spectral.default_grid(model.p, int(size) if size else None)


def stage_conditions(cfg, model, seed, out, workers) -> StageResult:
    rep = check_conditions(
        model,
        theta_probes=tuple(_get(cfg, "conditions.theta_probes", (0.5, 1.0, 2.0))),
        delta=float(_get(cfg, "conditions.delta", 0.05)),
        budget=int(_get(cfg, "conditions.budget", 512)),
        direction_nodes=int(_get(cfg, "conditions.direction_nodes", 201)),
        rng=substream(seed, "conditions", 0),
        drift_tol=float(_get(cfg, "conditions.drift_tol", 1e-6)),
        h_theta=float(_get(cfg, "spectral.h_theta", 1e-3)))
    rows = [(c.name, c.passed, c.value, c.threshold, c.note) for c in rep.checks()]
    n = write_table(out / "report.tsv",
                    ["check", "passed", "value", "threshold", "note"], rows)
    drows = [("slope_at_zero", rep.drift_at_zero, rep.drift_zero_negative),
             ("slope_at_one", rep.drift_at_one, rep.drift_one_zero)]
    nd = write_table(out / "drifts.tsv", ["point", "value", "hypothesis_ok"], drows)
    return StageResult(status="pass" if rep.passed else "fail",
                       artifacts={"report": ("conditions/report.tsv", n),
                                  "drifts": ("conditions/drifts.tsv", nd)},
                       keyvals={"slope_at_zero": rep.drift_at_zero,
                                "slope_at_one": rep.drift_at_one})


def stage_lyapunov(cfg, model, seed, out, workers) -> StageResult:
    grid = _grid_for(cfg, model)
    kw = _spectral_kwargs(cfg)
    thetas = _get(cfg, "spectral.theta_grid", [0.0, 0.25, 0.5, 0.75, 1.0, 1.25])
    curve = spectral.lyapunov_curve(model, thetas,
                                    h_theta=float(_get(cfg, "spectral.h_theta", 1e-3)),
                                    grid=grid, **kw)
    n1 = write_table(out / "curve.tsv", ["theta", "lam", "log_lam"],
                     list(zip(curve.thetas, curve.lambdas, curve.log_lambdas)))
    n2 = write_table(out / "slopes.tsv", ["point", "slope", "h_theta"],
                     [("zero", curve.slope_at_zero, curve.h_theta),
                      ("one", curve.slope_at_one, curve.h_theta)])
    sol = spectral.solve_eigen(1.0, model, grid, **kw)
    params = grid.params if grid.params.size else np.zeros((len(grid), 1))
    rows = [tuple(params[j]) + (sol.r_values[j], sol.l_weights[j],
                                sol.r_star[j], sol.l_star[j])
            for j in range(len(grid))]
    pcols = [f"param{d+1}" for d in range(params.shape[1])]
    n3 = write_table(out / "eigen_theta1.tsv",
                     pcols + ["r", "l", "r_star", "l_star"], rows,
                     header_comments={"theta": sol.theta, "lam": sol.lam,
                                      "residual": sol.residual,
                                      "iterations": sol.iterations})
    status = "pass" if curve.convex else "fail"
    return StageResult(status=status,
                       artifacts={"curve": ("lyapunov/curve.tsv", n1),
                                  "slopes": ("lyapunov/slopes.tsv", n2),
                                  "eigen_theta1": ("lyapunov/eigen_theta1.tsv", n3)},
                       keyvals={"lam_at_one": sol.lam, "residual": sol.residual,
                                "slope_at_one": curve.slope_at_one,
                                "min_second_difference": curve.min_second_difference})


def stage_calibrate(cfg, model, seed, out, workers) -> StageResult:
    try:
        cal = spectral.calibrate(model, grid=_grid_for(cfg, model),
                                 h_theta=float(_get(cfg, "spectral.h_theta", 1e-3)),
                                 **_spectral_kwargs(cfg))
    except UnsupportedFamilyError as exc:
        return StageResult(status="skipped", keyvals={"note": str(exc)})
    n = write_table(out / "result.tsv",
                    ["c", "slope_before", "slope_after", "slope_at_zero_after",
                     "degenerate"],
                    [(cal.c, cal.slope_before, cal.slope_after,
                      cal.slope_at_zero_after, cal.degenerate)])
    return StageResult(status="pass",
                       artifacts={"result": ("calibrate/result.tsv", n)},
                       keyvals={"c": cal.c, "slope_after": cal.slope_after,
                                "degenerate": cal.degenerate})


def stage_survival(cfg, model, seed, out, workers, sp1) -> StageResult:
    n_list = [int(v) for v in _get(cfg, "survival.n_list", [10, 20, 40, 80, 160])]
    n_paths = int(_get(cfg, "survival.n_paths", 100_000))
    n_direct = int(_get(cfg, "survival.n_paths_direct", 20_000))
    enum_max = int(_get(cfg, "survival.enum_max_n", 12))
    starts = [int(v) for v in _get(cfg, "survival.start_types", [1])]
    burn_in = int(_get(cfg, "survival.burn_in", 40))

    payloads = []
    unit = 0
    for i in starts:
        for n in n_list:
            payloads.append((model, sp1, survival.METHOD_IS, n, i, n_paths, seed, unit))
            unit += 1
            payloads.append((model, sp1, survival.METHOD_DIRECT, n, i, n_direct, seed, unit))
            unit += 1
            if model.K**n <= spectral.ENUM_CAP and n <= enum_max:
                payloads.append((model, sp1, survival.METHOD_ENUM, n, i, 0, seed, unit))
                unit += 1
    ests = _pmap(_survival_unit, payloads, workers)
    rows = [(e.n, e.start_type, e.method, e.estimate, e.se, e.a_n, e.n_samples, seed)
            for e in ests]
    n_rows = write_table(out / "estimates.tsv",
                         ["n", "start_type", "method", "estimate", "se", "a_n",
                          "n_samples", "seed"], rows)

    # flat-band verdict from the importance-sampled scaled statistics
    status = "pass"
    band_rows, ratio_rows = [], []
    for i in starts:
        by_n = {e.n: e for e in ests if e.method == survival.METHOD_IS and e.start_type == i}
        scaled = {n: by_n[n].a_n for n in n_list}
        doubling = [(n, scaled[2 * n] / scaled[n]) for n in n_list
                    if 2 * n in scaled and scaled[n] > 0]
        rel_se = [by_n[n].se / by_n[n].estimate if by_n[n].estimate > 0 else np.inf
                  for n in n_list]
        positive = all(v > 0 for v in scaled.values())
        ratios_ok = all(0.8 <= r <= 1.25 for n, r in doubling if n >= burn_in)
        passed = positive and ratios_ok
        st = "pass" if passed else ("inconclusive" if max(rel_se) > 0.10 else "fail")
        if _STATUS_ORDER[st] > _STATUS_ORDER[status]:
            status = st
        band_rows += [(i, n, scaled[n], rel_se[j]) for j, n in enumerate(n_list)]
        ratio_rows += [(i, n, r) for n, r in doubling]
    nb = write_table(out / "band.tsv", ["start_type", "n", "a_n", "rel_se"], band_rows)
    nr = write_table(out / "doubling.tsv", ["start_type", "n", "ratio"], ratio_rows)
    lo = min(r[2] for r in band_rows)
    hi = max(r[2] for r in band_rows)
    return StageResult(status=status,
                       artifacts={"estimates": ("survival/estimates.tsv", n_rows),
                                  "band": ("survival/band.tsv", nb),
                                  "doubling": ("survival/doubling.tsv", nr)},
                       keyvals={"band_lo": lo, "band_hi": hi,
                                "band_ratio": hi / lo if lo > 0 else np.inf,
                                "lam_at_one": sp1.lam})


def stage_mu_tail(cfg, model, seed, out, workers, sp1) -> StageResult:
    a_values = [float(v) for v in _get(cfg, "mu_tail.a_values",
                                       [-LN2, -2 * LN2, -3 * LN2])]
    n_list = [int(v) for v in _get(cfg, "mu_tail.n_list", [64, 128, 256, 512, 1024])]
    n_paths = int(_get(cfg, "mu_tail.n_paths", 200_000))
    payloads = [(model, sp1, a, n_list, n_paths, seed, idx)
                for idx, a in enumerate(a_values)]
    tables = _pmap(_mu_tail_unit, payloads, workers)
    rows = [(t.a, r.n, r.p_hat, r.se, r.scaled) for t in tables for r in t.rows]
    n1 = write_table(out / "table.tsv", ["a", "n", "p_hat", "se", "sqrt_n_p"], rows)
    fit_rows = [(t.a, t.c_fit) for t in tables]
    n2 = write_table(out / "fit.tsv", ["a", "c_fit"], fit_rows)
    c_global = max(t.c_fit for t in tables)
    ok = np.isfinite(c_global) and all(r.p_hat > 0 for t in tables for r in t.rows)
    return StageResult(status="pass" if ok else "fail",
                       artifacts={"table": ("mu_tail/table.tsv", n1),
                                  "fit": ("mu_tail/fit.tsv", n2)},
                       keyvals={"c_fit": c_global})


def _build_h_table(cfg, model, seed, sp1) -> tilted.HarmonicTable:
    a_values = [float(v) for v in _get(cfg, "harmonic.a_values",
                                       [-4 * LN2, -3 * LN2, -2 * LN2, -LN2])]
    return tilted.build_harmonic_table(
        model, sp1, a_values,
        horizon=int(_get(cfg, "harmonic.horizon", 256)),
        n_paths=int(_get(cfg, "harmonic.n_paths", 200_000)),
        rng=substream(seed, "harmonic", 0))


def stage_harmonic(cfg, model, seed, out, workers, sp1,
                   table: tilted.HarmonicTable) -> StageResult:
    rows = []
    for d in range(len(table.direction_params)):
        for ai, a in enumerate(table.a_values):
            rows.append((table.direction_params[d], a, table.h[d, ai],
                         table.se[d, ai], table.residual[d, ai],
                         table.residual_se[d, ai]))
    n1 = write_table(out / "table.tsv",
                     ["direction_param", "a", "h", "se", "residual", "residual_se"],
                     rows, header_comments={"horizon": table.horizon})
    n2 = write_table(out / "fit.tsv", ["r_fit", "c_fit", "horizon"],
                     [(table.r_fit, table.c_fit, table.horizon)])
    sg = tilted.estimate_sigma(model, sp1,
                               int(_get(cfg, "harmonic.sigma_n", 64)),
                               int(_get(cfg, "harmonic.sigma_paths", 100_000)),
                               substream(seed, "harmonic", 1))
    n3 = write_table(out / "sigma.tsv",
                     ["sigma", "se", "drift", "drift_se", "drift_consistent",
                      "degenerate"],
                     [(sg.sigma, sg.se, sg.drift, sg.drift_se,
                       sg.drift_consistent, sg.degenerate)])
    residual_ok = bool(np.all(table.residual <= 3.0 * table.residual_se + 1e-12))
    status = "pass" if (residual_ok and table.bounds_hold()
                        and not sg.degenerate) else "fail"
    return StageResult(status=status,
                       artifacts={"table": ("harmonic/table.tsv", n1),
                                  "fit": ("harmonic/fit.tsv", n2),
                                  "sigma": ("harmonic/sigma.tsv", n3)},
                       keyvals={"r_fit": table.r_fit, "c_fit": table.c_fit,
                                "sigma": sg.sigma,
                                "residual_ok": residual_ok})


def stage_diagnostics(cfg, model, seed, out, workers, sp1, h_table=None) -> StageResult:
    sweep = int(_get(cfg, "diagnostics.sweep_count", 200))
    n_max = int(_get(cfg, "diagnostics.identity_n_max", 30))
    rng = substream(seed, "diagnostics", 0)
    delta = model.declared_delta

    id_rows, damp_rows = [], []
    max_rel = 0.0
    gaps_ok = damping_ok = True
    for trial in range(sweep):
        n = int(rng.integers(1, n_max + 1))
        seq = [model.points[k] for k in rng.integers(0, model.K, size=n)]
        i = int(rng.integers(1, model.p + 1))
        s = rng.random(model.p) * 0.999
        rep = diagnostics.reciprocal_identity_check(seq, i, s, declared_delta=delta,
                                                    n_cap=n_max)
        max_rel = max(max_rel, rep.rel_error)
        gap_ok = bool(np.all(rep.gap_values >= -1e-12)
                      and np.all(rep.gap_values <= rep.gap_bounds + 1e-12))
        gaps_ok = gaps_ok and gap_ok
        id_rows.append((trial, n, rep.rel_error, gap_ok))
        dmp = diagnostics.damping_bound_check(seq, i, delta)
        damping_ok = damping_ok and dmp.passed and dmp.ratio_ok
        damp_rows.append((trial, n, dmp.damping, dmp.lower_bound, dmp.passed,
                          dmp.row_col_ratio, dmp.ratio_ok))
    n1 = write_table(out / "identity.tsv",
                     ["trial", "n", "rel_error", "gaps_in_bounds"], id_rows)
    n2 = write_table(out / "damping.tsv",
                     ["trial", "n", "damping", "lower_bound", "passed",
                      "row_col_ratio", "ratio_ok"], damp_rows)
    identity_ok = max_rel <= 1e-8

    artifacts = {"identity": ("diagnostics/identity.tsv", n1),
                 "damping": ("diagnostics/damping.tsv", n2)}
    keyvals = {"max_rel_error": max_rel, "gaps_ok": gaps_ok,
               "damping_ok": damping_ok}
    series_ok = True
    if h_table is not None:
        series_n = [int(v) for v in _get(cfg, "diagnostics.series_n_list",
                                         [64, 128, 256, 512])]
        series_paths = int(_get(cfg, "diagnostics.series_paths", 100_000))
        series_a = float(_get(cfg, "diagnostics.series_a", -LN2))
        x = project(np.ones(model.p))
        st = diagnostics.conditioned_series_partial(
            model, x, series_a, series_n, sp1, h_table, series_paths,
            substream(seed, "diagnostics", 1))
        inc = {n: v for n, v in st.increments}
        n3 = write_table(out / "series.tsv",
                         ["n", "partial_sum", "se", "rel_increment"],
                         [(r.n, r.partial_sum, r.se, inc.get(r.n, np.nan))
                          for r in st.rows])
        artifacts["series"] = ("diagnostics/series.tsv", n3)
        keyvals["series_final_increment"] = st.final_increment
        series_ok = st.flattening
    status = "pass" if (identity_ok and gaps_ok and damping_ok and series_ok) else "fail"
    return StageResult(status=status, artifacts=artifacts, keyvals=keyvals)


# ---------------------------------------------------------------------------
# run orchestration
# ---------------------------------------------------------------------------


def run(config_path: str | Path, subcommand: str, seed: Optional[int] = None,
        out_dir: Optional[str | Path] = None, workers: int = 1) -> RunRecord:
    """Execute one subcommand (or the full pipeline) and persist artifacts."""
    if subcommand not in STAGES + ("all",):
        raise ConfigError(f"unknown subcommand {subcommand!r}")
    cfg = load_config(config_path)
    digest = config_digest(cfg)
    cfg_seed = validate_run_section(cfg)
    seed = int(seed) if seed is not None else cfg_seed
    base = Path(out_dir) if out_dir is not None else Path(_get(cfg, "run.out_dir", "runs"))
    out_root = base / digest
    out_root.mkdir(parents=True, exist_ok=True)
    record = RunRecord(digest=digest, seed=seed, out_dir=out_root)

    wanted = list(STAGES) if subcommand == "all" else [subcommand]

    # model construction: a declared-delta violation is a check failure for
    # the conditions stage, an error otherwise
    try:
        model = build_model(cfg)
    except DeltaBoundError as exc:
        if "conditions" in wanted:
            out = out_root / "conditions"
            n = write_table(out / "report.tsv",
                            ["check", "passed", "value", "threshold", "note"],
                            [("entry_ratio", False, np.inf,
                              _get(cfg, "model.declared_delta", np.nan), str(exc))])
            record.stages["conditions"] = StageResult(
                status="fail",
                artifacts={"report": ("conditions/report.tsv", n)},
                keyvals={"note": str(exc)})
            record.write_manifest()
            return record
        raise

    if bool(_get(cfg, "model.calibrate_first", False)):
        cal = spectral.calibrate(model, grid=_grid_for(cfg, model),
                                 h_theta=float(_get(cfg, "spectral.h_theta", 1e-3)),
                                 **_spectral_kwargs(cfg))
        model = cal.model

    sp1 = None
    h_table = None

    def tilt_solution():
        nonlocal sp1
        if sp1 is None:
            sp1 = spectral.solve_eigen(1.0, model, _grid_for(cfg, model),
                                       **_spectral_kwargs(cfg))
        return sp1

    for stage in wanted:
        out = out_root / stage.replace("-", "_")
        started = time.monotonic()
        try:
            if stage == "conditions":
                res = stage_conditions(cfg, model, seed, out, workers)
            elif stage == "lyapunov":
                res = stage_lyapunov(cfg, model, seed, out, workers)
            elif stage == "calibrate":
                res = stage_calibrate(cfg, model, seed, out, workers)
            elif stage == "survival":
                res = stage_survival(cfg, model, seed, out, workers, tilt_solution())
            elif stage == "mu-tail":
                res = stage_mu_tail(cfg, model, seed, out, workers, tilt_solution())
            elif stage == "harmonic":
                if h_table is None and model.p <= 2:
                    h_table = _build_h_table(cfg, model, seed, tilt_solution())
                res = stage_harmonic(cfg, model, seed, out, workers,
                                     tilt_solution(), h_table)
            elif stage == "diagnostics":
                if h_table is None and model.p <= 2:
                    h_table = _build_h_table(cfg, model, seed, tilt_solution())
                res = stage_diagnostics(cfg, model, seed, out, workers,
                                        tilt_solution(), h_table)
            res.seconds = time.monotonic() - started
        except BPRELabError as exc:
            res = StageResult(status="error", keyvals={"error": str(exc)},
                              seconds=time.monotonic() - started)
        record.stages[stage] = res
    record.write_manifest()
    return record


def main(argv: Optional[list[str]] = None) -> int:
    parser = argparse.ArgumentParser(
        prog="bpre-lab",
        description="Survival-asymptotics lab for branching processes in "
                    "i.i.d. random environment")
    sub = parser.add_subparsers(dest="subcommand", required=True)
    for name in STAGES + ("all",):
        sp = sub.add_parser(name)
        sp.add_argument("--config", required=True)
        sp.add_argument("--seed", type=int, default=None)
        sp.add_argument("--out", default=None)
        sp.add_argument("--workers", type=int, default=1)
    args = parser.parse_args(argv)
    try:
        record = run(args.config, args.subcommand, seed=args.seed,
                     out_dir=args.out, workers=args.workers)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except BPRELabError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    for stage, res in record.stages.items():
        print(f"{stage}: {res.status} ({res.seconds:.1f}s)")
    print(f"run {record.digest}: {record.status} -> {record.out_dir}")
    return record.exit_code


if __name__ == "__main__":
    raise SystemExit(main())