"""Static SVG figures written next to the CSV output.

Output is byte-stable: the SVG id salt is fixed and no date is embedded.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

_RC = {"svg.hashsalt": "retrocede", "svg.fonttype": "none", "figure.figsize": (6.0, 4.0)}


def _save(fig, path):
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def plot_treaties(curves, path, reference=None, title="Optimal ceded amounts"):
    """Ceded amount against loss, one line per risk.

    ``curves`` and ``reference`` are lists of ``(label, x, z)``; reference
    curves are drawn dashed.
    """
    with plt.rc_context(_RC):
        fig, ax = plt.subplots()
        for label, x, z in curves:
            ax.plot(x, z, label=label)
        for label, x, z in reference or ():
            ax.plot(x, z, linestyle="--", label=label)
        lim = max(float(np.max(x)) for _, x, _ in curves)
        ax.plot([0, lim], [0, lim], color="0.7", linewidth=0.8, label="full cession")
        ax.set_xlabel("loss x")
        ax.set_ylabel("ceded Z(x)")
        ax.set_title(title)
        ax.legend()
        _save(fig, path)


def plot_utility(cycles, path):
    """Expected utility after each outer cycle."""
    with plt.rc_context(_RC):
        fig, ax = plt.subplots()
        k = [c["cycle"] for c in cycles]
        ax.plot(k, [c["utility"] for c in cycles], marker="o")
        ax.set_xlabel("cycle")
        ax.set_ylabel("expected utility")
        _save(fig, path)
