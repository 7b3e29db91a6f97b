"""SVG figures: level decay, cost comparison and quantile fans."""
from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

_SVG_META = {"Date": None}


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata=_SVG_META)
    plt.close(fig)


def plot_decay(path, levels, mean_level, mean_diff, var_level, var_diff, rates=None, title=""):
    """log4 |E| and log4 V of g_l and g_l - g_{l-1} against the level."""
    levels = np.asarray(levels)
    fig, axes = plt.subplots(1, 2, figsize=(9, 3.6))
    l4 = lambda v: np.log(np.abs(np.asarray(v, dtype=float))) / np.log(4.0)  # noqa: E731
    axes[0].plot(levels, l4(mean_level), "o-", label="g_l")
    axes[0].plot(levels[1:], l4(mean_diff)[1:], "s--", label="g_l - g_{l-1}")
    axes[1].plot(levels, l4(var_level), "o-", label="g_l")
    axes[1].plot(levels[1:], l4(var_diff)[1:], "s--", label="g_l - g_{l-1}")
    if rates is not None:
        x = levels[levels >= 1]
        axes[0].plot(x, rates.zeta1 - rates.alpha * x, ":", label=f"alpha={rates.alpha:.2f}")
        axes[1].plot(x, rates.zeta2 - rates.beta * x, ":", label=f"beta={rates.beta:.2f}")
    axes[0].set_ylabel("log4 |mean|")
    axes[1].set_ylabel("log4 variance")
    for ax in axes:
        ax.set_xlabel("level")
        ax.legend(fontsize=8)
    if title:
        fig.suptitle(title)
    _save(fig, path)


def plot_costs(path, rows):
    eps = np.array([r["epsilon"] for r in rows])
    fig, ax = plt.subplots(figsize=(5, 3.8))
    ax.loglog(eps, [r["S"] for r in rows], "o-", label="MLMC")
    ax.loglog(eps, [r["S_MC"] for r in rows], "s-", label="MC")
    if rows:
        k = rows[0]["mlmc_exponent"]
        ref = rows[0]["S"] * (eps / eps[0]) ** (-k)
        ax.loglog(eps, ref, ":", label=f"eps^-{k:.2f}")
        ax.loglog(eps, rows[0]["S"] * (eps / eps[0]) ** -2.0, "--", label="eps^-2")
    ax.set_xlabel("epsilon")
    ax.set_ylabel("cost (s)")
    ax.legend(fontsize=8)
    _save(fig, path)


def plot_quantiles(path, times, fan, name):
    fig, ax = plt.subplots(figsize=(6, 3.6))
    for k, style in enumerate([":", ":", "-", ":", ":"][:len(fan)]):
        ax.plot(times, fan[k], style, color="k" if style == "-" else "tab:blue")
    ax.set_xlabel("t (s)")
    ax.set_ylabel(name)
    _save(fig, path)
