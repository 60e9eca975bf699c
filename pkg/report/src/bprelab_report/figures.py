"""The five run-summary figures.

Each build function reads its input tables, draws one PNG and returns the
output path; a missing or malformed input raises ArtifactError and the
caller records a skip note instead of a figure.  Rendering is deterministic:
fixed figure geometry, no timestamps in the PNG metadata.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .artifacts import ArtifactError, read_table, stage_artifact

PNG_METADATA = {"Software": "bpre-lab-render"}

FIGURE_KINDS = ("lyapunov-curve", "survival-band", "mu-tail",
                "variance-comparison", "harmonic-table")


@dataclass
class FigureSpec:
    kind: str
    inputs: list[Path]
    output: Path


def _save(fig, output: Path) -> Path:
    output.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(output, dpi=110, metadata=PNG_METADATA)
    plt.close(fig)
    return output


def build_lyapunov_curve(run_dir: Path, manifest, out_dir: Path) -> Path:
    curve = read_table(stage_artifact(run_dir, manifest, "lyapunov", "curve"))
    slopes = read_table(stage_artifact(run_dir, manifest, "lyapunov", "slopes"))
    thetas = np.array(curve.floats("theta"))
    log_lam = np.array(curve.floats("log_lam"))
    slope = dict(zip(slopes.column("point"), slopes.floats("slope")))

    fig, ax = plt.subplots(figsize=(6.0, 4.2))
    ax.plot(thetas, log_lam, "o-", color="tab:blue", label="log growth rate")
    ax.axhline(0.0, color="0.7", lw=0.8)
    span = 0.25 * (thetas.max() - thetas.min() + 1e-9)
    for point, theta0 in (("zero", 0.0), ("one", 1.0)):
        if point in slope and thetas.min() - 1e-9 <= theta0 <= thetas.max() + 1e-9:
            base = float(np.interp(theta0, thetas, log_lam))
            ts = np.linspace(theta0 - span, theta0 + span, 2)
            ax.plot(ts, base + slope[point] * (ts - theta0), "--",
                    color="tab:red", lw=1.2)
            ax.annotate(f"slope({theta0:g}) = {slope[point]:+.4f}",
                        xy=(theta0, base), xytext=(theta0, base + 0.05),
                        fontsize=8, color="tab:red")
    ax.set_xlabel("moment order")
    ax.set_ylabel("log growth rate")
    ax.set_title("Moment growth curve with slopes at 0 and 1")
    ax.legend(loc="best", fontsize=8)
    fig.tight_layout()
    return _save(fig, out_dir / "lyapunov_curve.png")


def build_survival_band(run_dir: Path, manifest, out_dir: Path) -> Path:
    band = read_table(stage_artifact(run_dir, manifest, "survival", "band"))
    ns = np.array(band.floats("n"))
    a_n = np.array(band.floats("a_n"))
    starts = band.column("start_type")

    fig, ax = plt.subplots(figsize=(6.0, 4.2))
    for start in sorted(set(starts)):
        mask = np.array([s == start for s in starts])
        order = np.argsort(ns[mask])
        ax.plot(ns[mask][order], a_n[mask][order], "o-",
                label=f"start type {start}")
    lo, hi = a_n.min(), a_n.max()
    ax.axhspan(lo, hi, color="tab:green", alpha=0.15,
               label=f"band [{lo:.3f}, {hi:.3f}]")
    ax.set_xscale("log", base=2)
    ax.set_xlabel("generations")
    ax.set_ylabel("survival x growth^-n x sqrt(n)")
    ax.set_title("Scaled survival statistic (flat band = predicted decay)")
    ax.legend(loc="best", fontsize=8)
    fig.tight_layout()
    return _save(fig, out_dir / "survival_band.png")


def build_mu_tail(run_dir: Path, manifest, out_dir: Path) -> Path:
    table = read_table(stage_artifact(run_dir, manifest, "mu-tail", "table"))
    ns = np.array(table.floats("n"))
    scaled = np.array(table.floats("sqrt_n_p"))
    levels = np.array(table.floats("a"))

    # reference plateau 2 h(a) / (sigma sqrt(2 pi)) from the harmonic stage
    reference: dict[float, float] = {}
    try:
        h_tab = read_table(stage_artifact(run_dir, manifest, "harmonic", "table"))
        sigma_tab = read_table(stage_artifact(run_dir, manifest, "harmonic", "sigma"))
        sigma = sigma_tab.floats("sigma")[0]
        h_levels = np.array(h_tab.floats("a"))
        h_vals = np.array(h_tab.floats("h"))
        for a in sorted(set(levels)):
            near = np.abs(h_levels - a) < 1e-9
            if near.any() and sigma > 0:
                reference[a] = 2.0 * float(h_vals[near].mean()) \
                    / (sigma * math.sqrt(2 * math.pi))
    except ArtifactError:
        pass

    fig, ax = plt.subplots(figsize=(6.0, 4.2))
    for a in sorted(set(levels)):
        mask = levels == a
        order = np.argsort(ns[mask])
        line, = ax.plot(ns[mask][order], scaled[mask][order], "o-",
                        label=f"start level {a:.3f}")
        if a in reference:
            ax.axhline(reference[a], color=line.get_color(), ls="--", lw=1.0)
    ax.set_xscale("log", base=2)
    ax.set_xlabel("steps")
    ax.set_ylabel("sqrt(n) x P(no crossing by n)")
    ax.set_title("First-passage tail flattening (dashed: 2h / sigma sqrt(2 pi))")
    ax.legend(loc="best", fontsize=8)
    fig.tight_layout()
    return _save(fig, out_dir / "mu_tail.png")


def build_variance_comparison(run_dir: Path, manifest, out_dir: Path) -> Path:
    est = read_table(stage_artifact(run_dir, manifest, "survival", "estimates"))
    ns = np.array(est.floats("n"))
    ses = np.array(est.floats("se"))
    vals = np.array(est.floats("estimate"))
    methods = est.column("method")

    fig, ax = plt.subplots(figsize=(6.0, 4.2))
    for method, color in (("direct", "tab:orange"), ("is", "tab:blue")):
        mask = np.array([m == method for m in methods]) & (vals > 0) & (ses > 0)
        if not mask.any():
            continue
        order = np.argsort(ns[mask])
        ax.plot(ns[mask][order], (ses[mask] / vals[mask])[order], "o-",
                color=color, label=f"{method} sampling")
    ax.set_xscale("log", base=2)
    ax.set_yscale("log")
    ax.set_xlabel("generations")
    ax.set_ylabel("relative standard error")
    ax.set_title("Direct vs tilted importance sampling at equal budgets")
    ax.legend(loc="best", fontsize=8)
    fig.tight_layout()
    return _save(fig, out_dir / "variance_comparison.png")


def build_harmonic_table(run_dir: Path, manifest, out_dir: Path) -> Path:
    table = read_table(stage_artifact(run_dir, manifest, "harmonic", "table"))
    fit = read_table(stage_artifact(run_dir, manifest, "harmonic", "fit"))
    levels = np.array(table.floats("a"))
    h = np.array(table.floats("h"))
    se = np.array(table.floats("se"))
    params = table.column("direction_param")
    r_fit = fit.floats("r_fit")[0]
    c_fit = fit.floats("c_fit")[0]

    fig, ax = plt.subplots(figsize=(6.0, 4.2))
    depth = np.abs(levels)
    for param in sorted(set(params)):
        mask = np.array([p == param for p in params])
        order = np.argsort(depth[mask])
        ax.errorbar(depth[mask][order], h[mask][order], yerr=3 * se[mask][order],
                    fmt="o-", ms=4, capsize=2, label=f"direction {param}")
    grid = np.linspace(0.0, depth.max() * 1.1 + 0.1, 100)
    ax.plot(grid, c_fit * (1 + grid), "--", color="0.4",
            label=f"upper C(1+|a|), C={c_fit:.2f}")
    ax.plot(grid, np.maximum(1 / c_fit, grid - r_fit), ":", color="0.4",
            label=f"lower max(1/C, |a|-R), R={r_fit:.2f}")
    ax.set_xlabel("depth |a|")
    ax.set_ylabel("harmonic value")
    ax.set_title("Harmonic function with fitted linear envelopes")
    ax.legend(loc="best", fontsize=8)
    fig.tight_layout()
    return _save(fig, out_dir / "harmonic_table.png")


BUILDERS = {
    "lyapunov-curve": build_lyapunov_curve,
    "survival-band": build_survival_band,
    "mu-tail": build_mu_tail,
    "variance-comparison": build_variance_comparison,
    "harmonic-table": build_harmonic_table,
}
