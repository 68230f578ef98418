"""SVG figures for report bundles. Every figure has a sibling CSV holding its numbers."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

plt.rcParams.update({
    "svg.hashsalt": "focal",
    "svg.fonttype": "none",
    "font.size": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
})

SCENARIO_LABELS = {1: "correct", 2: "mu misspecified", 3: "pi misspecified", 4: "both misspecified"}


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def fate_figure(path, t, curves: dict, lower=None, upper=None, truth=None, title="FATE"):
    fig, ax = plt.subplots(figsize=(5, 3.2))
    if lower is not None and upper is not None:
        ax.fill_between(t, lower, upper, color="0.85", lw=0, label="95% band")
    for label, y in curves.items():
        ax.plot(t, y, lw=1.4, label=label)
    if truth is not None:
        ax.plot(t, truth, color="k", ls="--", lw=1, label="truth")
    ax.axhline(0, color="0.6", lw=0.5)
    ax.set_xlabel("t")
    ax.set_ylabel("treatment effect")
    ax.set_title(title)
    ax.legend(frameon=False, fontsize=7)
    _save(fig, path)


def armse_boxplot(path, by_scenario: dict):
    keys = sorted(by_scenario)
    fig, ax = plt.subplots(figsize=(5, 3.2))
    ax.boxplot([by_scenario[k] for k in keys], showfliers=True)
    ax.set_xticks(range(1, len(keys) + 1))
    ax.set_xticklabels([f"{k}\n{SCENARIO_LABELS.get(k, '')}" for k in keys], fontsize=7)
    ax.set_ylabel("ARMSE")
    _save(fig, path)


def surface_heatmap(path, xvals, t, Z, xlabel="x"):
    """``Z[i, j]`` is the effect at covariate value ``xvals[i]`` and time ``t[j]``."""
    Z = np.asarray(Z, dtype=float)
    fig, ax = plt.subplots(figsize=(5, 3.4))
    lim = float(np.max(np.abs(Z))) or 1.0
    if len(xvals) > 2:
        mesh = ax.pcolormesh(t, xvals, Z, cmap="RdBu_r", vmin=-lim, vmax=lim, shading="nearest")
    else:
        mesh = ax.imshow(Z, aspect="auto", cmap="RdBu_r", vmin=-lim, vmax=lim,
                         extent=(t[0], t[-1], -0.5, len(xvals) - 0.5), origin="lower")
        ax.set_yticks(range(len(xvals)))
        ax.set_yticklabels([f"{v:g}" for v in xvals])
    fig.colorbar(mesh, ax=ax, label="theta(x)(t)")
    ax.set_xlabel("t")
    ax.set_ylabel(xlabel)
    _save(fig, path)
