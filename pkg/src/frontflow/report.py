"""Figure rendering for inversion outputs.

The summarize command writes PNG heatmaps of the posterior field statistics,
scalar marginal histograms and predictive interval plots next to the
delimited exports, so a run directory is browsable without extra tooling.
"""

import csv
import json
from pathlib import Path

import matplotlib
import numpy as np

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402  (backend must be pinned first)

from . import fields as flds  # noqa: E402

_SCALAR_TEX = {
    "K_nom": r"$K_{nom}$ [m$^2$]", "phi_T": r"$\phi_T$", "phi_B": r"$\phi_B$",
    "phi_nom": r"$\phi_{nom}$", "phi_def": r"$\phi_{def}$", "mu": r"$\mu$ [Pa s]",
    "P_I": r"$P_I$ [Pa]", "lam": r"$\lambda$", "beta": r"$\beta$", "chi": r"$\chi$",
}


def _heatmap(ax, values, grid, title, cmap="viridis", vmin=None, vmax=None):
    im = ax.imshow(values, origin="lower", extent=(0, grid.Dx, 0, grid.Dy),
                   cmap=cmap, vmin=vmin, vmax=vmax, aspect="equal")
    ax.set_title(title, fontsize=9)
    ax.set_xlabel("x [m]", fontsize=8)
    ax.set_ylabel("y [m]", fontsize=8)
    ax.tick_params(labelsize=7)
    return im


def render_field_stats(mean_fp: flds.FieldPair, std_fp: flds.FieldPair,
                       prob_fp: flds.FieldPair, out_path: Path) -> None:
    """Six-panel summary: mean/STD of log K and porosity, defect and strip
    probabilities."""
    grid = mean_fp.grid
    fig, axes = plt.subplots(2, 3, figsize=(11, 6.2), constrained_layout=True)
    panels = [
        (mean_fp.log_K, "posterior mean log K", "viridis", None, None),
        (std_fp.log_K, "posterior STD log K", "magma", None, None),
        (prob_fp.log_K, "P(central defect)", "inferno", 0.0, 1.0),
        (mean_fp.phi, "posterior mean porosity", "viridis", None, None),
        (std_fp.phi, "posterior STD porosity", "magma", None, None),
        (prob_fp.phi, "P(edge strip)", "inferno", 0.0, 1.0),
    ]
    for ax, (vals, title, cmap, vmin, vmax) in zip(axes.ravel(), panels):
        im = _heatmap(ax, vals, grid, title, cmap, vmin, vmax)
        fig.colorbar(im, ax=ax, shrink=0.85)
    fig.savefig(out_path, dpi=140)
    plt.close(fig)


def render_scalar_histograms(scalar_samples: np.ndarray, out_path: Path,
                             truth: dict | None = None) -> None:
    fig, axes = plt.subplots(2, 5, figsize=(13, 5), constrained_layout=True)
    for k, (name, ax) in enumerate(zip(flds.SCALAR_NAMES, axes.ravel())):
        ax.hist(scalar_samples[:, k], bins=30, color="steelblue", alpha=0.85)
        if truth and name in truth:
            ax.axvline(truth[name], color="crimson", lw=1.5)
        ax.set_title(_SCALAR_TEX.get(name, name), fontsize=9)
        ax.tick_params(labelsize=7)
    fig.savefig(out_path, dpi=140)
    plt.close(fig)


def render_predictive(predictive: np.ndarray, data: np.ndarray, out_path: Path,
                      n_panels: int = 6) -> None:
    """Predictive bands vs observed data for a few measurement indices spread
    over the record."""
    mn = data.size
    idx = np.unique(np.linspace(0, mn - 1, n_panels).astype(int))
    fig, axes = plt.subplots(1, idx.size, figsize=(2.4 * idx.size, 2.8),
                             constrained_layout=True)
    axes = np.atleast_1d(axes)
    for ax, i in zip(axes, idx):
        ax.hist(predictive[:, i], bins=25, color="steelblue", alpha=0.8, density=True)
        ax.axvline(data[i], color="crimson", lw=1.5)
        ax.set_title(f"entry {i}", fontsize=8)
        ax.tick_params(labelsize=7)
    fig.savefig(out_path, dpi=140)
    plt.close(fig)


def render_misfit_history(manifest: dict, out_path: Path) -> None:
    fig, ax = plt.subplots(figsize=(4.2, 3.0), constrained_layout=True)
    ax.semilogy(np.arange(1, len(manifest["misfits"]) + 1), manifest["misfits"], "o-")
    ax.set_xlabel("iteration")
    ax.set_ylabel("mean data misfit")
    fig.savefig(out_path, dpi=140)
    plt.close(fig)


def write_summary_csv(summary_rows: list, path: Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["scalar", "posterior_mean", "posterior_sd", "q05", "q50", "q95"])
        writer.writerows(summary_rows)


def summarize_run(run_dir, out_dir) -> list:
    """Render figures and summary CSV from an inversion output directory.
    Returns the list of files written."""
    run_dir = Path(run_dir)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []

    mean_fp = flds.read_field_pair(run_dir / "posterior_mean.fld")
    std_fp = flds.read_field_pair(run_dir / "posterior_std.fld")
    prob_fp = flds.read_field_pair(run_dir / "defect_probability.fld")
    fig1 = out_dir / "posterior_fields.png"
    render_field_stats(mean_fp, std_fp, prob_fp, fig1)
    written.append(fig1)

    samples = np.genfromtxt(run_dir / "scalar_samples.csv", delimiter=",", names=True)
    scalar_samples = np.column_stack([samples[name] for name in flds.SCALAR_NAMES])
    fig2 = out_dir / "scalar_histograms.png"
    render_scalar_histograms(scalar_samples, fig2)
    written.append(fig2)

    with open(run_dir / "manifest.json", encoding="utf-8") as fh:
        manifest = json.load(fh)
    if manifest.get("misfits"):
        fig3 = out_dir / "misfit_history.png"
        render_misfit_history(manifest, fig3)
        written.append(fig3)

    pred_path = run_dir / "predictive_samples.csv"
    data_path = run_dir / "data_used.csv"
    if pred_path.exists() and data_path.exists():
        predictive = np.loadtxt(pred_path, delimiter=",", skiprows=1)
        data = np.loadtxt(data_path, delimiter=",", skiprows=1)
        fig4 = out_dir / "predictive_checks.png"
        render_predictive(np.atleast_2d(predictive), np.atleast_1d(data), fig4)
        written.append(fig4)

    rows = []
    for k, name in enumerate(flds.SCALAR_NAMES):
        col = scalar_samples[:, k]
        rows.append([name, f"{col.mean():.17g}", f"{col.std(ddof=1):.17g}",
                     f"{np.quantile(col, 0.05):.17g}", f"{np.quantile(col, 0.5):.17g}",
                     f"{np.quantile(col, 0.95):.17g}"])
    csv_path = out_dir / "scalar_summary.csv"
    write_summary_csv(rows, csv_path)
    written.append(csv_path)
    return written
