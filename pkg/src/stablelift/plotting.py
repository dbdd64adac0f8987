"""SVG figures for run directories."""
from __future__ import annotations

import csv
import json
import os
import warnings

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .stablelaw import StableParams, stable_cdf  # noqa: E402

# fixed ids and no date stamp, so identical data give identical files
plt.rcParams.update({"svg.hashsalt": "stablelift", "svg.fonttype": "path",
                     "font.size": 9, "axes.labelsize": 9, "legend.fontsize": 8,
                     "figure.figsize": (5.0, 3.4)})
_META = {"Date": None, "Creator": None}


def _read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata=_META)
    plt.close(fig)
    return path


def ensemble_plot(csv_path, fit_path, out):
    rows = _read_csv(csv_path)
    if not rows:
        raise ValueError("empty ensemble")
    v = np.array([float(r["scaled"]) for r in rows])
    v = v[np.isfinite(v)]
    lo, hi = np.quantile(v, [0.005, 0.995])
    fig, ax = plt.subplots()
    ax.hist(v[(v >= lo) & (v <= hi)], bins=80, density=True, color="0.75", label="scaled sums")
    if fit_path and os.path.exists(fit_path):
        with open(fit_path) as fh:
            p = StableParams.from_dict(json.load(fh)["fit"])
        z = np.linspace(lo, hi, 400)
        # density proxy: centered differences of the fitted CDF
        h = (hi - lo) / 2000
        dens = (stable_cdf(p, z + h) - stable_cdf(p, z - h)) / (2 * h)
        ax.plot(z, dens, "k-", lw=1.2, label=f"stable fit, alpha={p.alpha:.3f}")
    ax.set_xlabel("scaled Birkhoff sum")
    ax.set_ylabel("density")
    ax.legend(frameon=False)
    return _save(fig, out)


def phase_plot(csv_path, out):
    rows = _read_csv(csv_path)
    if not rows:
        raise ValueError("empty sweep")
    gs = sorted({float(r["gamma"]) for r in rows})
    al = sorted({float(r["alpha"]) for r in rows})
    grid = np.full((len(al), len(gs)), np.nan)
    for r in rows:
        grid[al.index(float(r["alpha"])), gs.index(float(r["gamma"]))] = float(r["fitted_index"])
    fig, ax = plt.subplots()
    im = ax.imshow(grid, origin="lower", aspect="auto", vmin=0.5, vmax=2.0, cmap="viridis",
                   extent=(-0.5, len(gs) - 0.5, -0.5, len(al) - 0.5))
    ax.set_xticks(range(len(gs)), [f"{g:g}" for g in gs])
    ax.set_yticks(range(len(al)), [f"{a:g}" for a in al])
    ax.set_xlabel("gamma")
    ax.set_ylabel("alpha")
    fig.colorbar(im, ax=ax, label="fitted index")
    return _save(fig, out)


def trend_plot(csv_path, out):
    rows = _read_csv(csv_path)
    if not rows:
        raise ValueError("empty trend matrix")
    fig, ax = plt.subplots()
    for n in sorted({int(r["n"]) for r in rows}):
        rs = sorted((r for r in rows if int(r["n"]) == n), key=lambda r: float(r["eps"]))
        e = [float(r["eps"]) for r in rs]
        s = [float(r["statistic"]) for r in rs]
        se = [float(r["stderr"]) for r in rs]
        ax.errorbar(e, s, yerr=[2 * x for x in se], marker="o", capsize=2, label=f"n={n:g}")
    ax.set_xscale("log")
    ax.set_xlabel("epsilon")
    ax.set_ylabel("small-jump statistic")
    ax.legend(frameon=False)
    return _save(fig, out)


def density_plot(csv_path, out):
    rows = _read_csv(csv_path)
    if not rows:
        raise ValueError("empty density")
    lo = np.array([float(r["bin_left"]) for r in rows])
    hi = np.array([float(r["bin_right"]) for r in rows])
    h = np.array([float(r["mass"]) for r in rows]) / (hi - lo)
    fig, ax = plt.subplots()
    ax.step(lo, h, where="post", color="k", lw=0.8)
    ax.set_yscale("log")
    ax.set_xlabel("x")
    ax.set_ylabel("invariant density")
    return _save(fig, out)


def exceedance_plot(csv_path, out):
    rows = _read_csv(csv_path)
    if not rows:
        raise ValueError("no exceedances")
    j = np.array([int(r["j"]) for r in rows])
    v = np.array([float(r["value"]) for r in rows])
    fig, ax = plt.subplots()
    ax.plot(j, np.abs(v), "k.", ms=2)
    ax.set_yscale("log")
    ax.set_xlabel("time index j")
    ax.set_ylabel("|phi| at exceedance")
    return _save(fig, out)


PLOTS = [
    ("ensemble.csv", "ensemble.svg", lambda d, c, o: ensemble_plot(c, os.path.join(d, "fit.json"), o)),
    ("sweep.csv", "phase.svg", lambda d, c, o: phase_plot(c, o)),
    ("trend.csv", "trend.svg", lambda d, c, o: trend_plot(c, o)),
    ("density.csv", "density.svg", lambda d, c, o: density_plot(c, o)),
    ("exceedances.csv", "exceedances.svg", lambda d, c, o: exceedance_plot(c, o)),
]


def emit_plots(run_dir, only=None):
    """Write one SVG per recognised CSV; missing or empty inputs are skipped with a warning."""
    made = []
    for csv_name, svg_name, fn in PLOTS:
        if only is not None and csv_name not in only:
            continue
        path = os.path.join(run_dir, csv_name)
        if not os.path.exists(path):
            if only is not None:
                warnings.warn(f"{csv_name} missing; plot skipped", stacklevel=2)
            continue
        try:
            made.append(fn(run_dir, path, os.path.join(run_dir, svg_name)))
        except (ValueError, KeyError) as exc:
            warnings.warn(f"{csv_name}: {exc}; plot skipped", stacklevel=2)
    return made
