"""Figures written next to the delimited CLI reports (non-interactive backend)."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {"figure.figsize": (6.4, 4.0), "axes.grid": True, "grid.alpha": 0.3,
         "axes.spines.top": False, "axes.spines.right": False, "font.size": 9}


def _save(fig, path, meta: dict | None):
    # PNG text chunks carry the replay triple alongside the pixels
    info = {"Software": "semrank"}
    if meta:
        info["Description"] = str(meta)
    fig.savefig(path, dpi=120, bbox_inches="tight", metadata=info)
    plt.close(fig)
    return str(path)


def bench_figure(rows: list, path, meta=None):
    """Throughput and FLOPs per scoring mode."""
    with plt.rc_context(STYLE):
        fig, (ax1, ax2) = plt.subplots(1, 2)
        modes = [r["mode"] for r in rows]
        ax1.bar(modes, [r["items_per_s"] for r in rows], color="tab:blue")
        ax1.set_ylabel("items / s")
        ax2.bar(modes, [r["attention_flops"] + r["linear_flops"] for r in rows], color="tab:orange")
        ax2.set_ylabel("flop units")
        for ax in (ax1, ax2):
            ax.tick_params(axis="x", rotation=30)
        fig.tight_layout()
        return _save(fig, path, meta)


def simulation_figure(metrics, path, meta=None):
    """Latency percentiles per reporting window and the depth trace."""
    with plt.rc_context(STYLE):
        fig, (ax1, ax2) = plt.subplots(2, 1, sharex=True, figsize=(6.4, 5.0))
        for cls, color in (("sensitive", "tab:red"), ("insensitive", "tab:blue")):
            recs = [r for r in metrics.records if r["class"] == cls]
            t = [r["t"] for r in recs]
            ax1.plot(t, [r["p99"] for r in recs], color=color, label=f"{cls} p99")
            ax1.plot(t, [r["p50"] for r in recs], color=color, ls="--", label=f"{cls} p50")
        ax1.set_ylabel("latency (ms)")
        ax1.legend(fontsize=7)
        if metrics.depth_trace:
            tr = np.array(metrics.depth_trace)
            ax2.step(tr[:, 0], tr[:, 1], where="post", color="k")
        ax2.set_ylabel("scoring depth")
        ax2.set_xlabel("simulated time (s)")
        fig.tight_layout()
        return _save(fig, path, meta)


def reliability_figure(head, pairs, path, meta=None, n_bins: int = 10):
    """Calibrated probability against observed rate, binned by calibrated score."""
    from .calibration import calibrate

    arr = np.asarray(pairs, dtype=float).reshape(-1, 2)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        if arr.size:
            pred = np.atleast_1d(calibrate(head, arr[:, 0]))
            edges = np.quantile(pred, np.linspace(0, 1, n_bins + 1))
            which = np.clip(np.searchsorted(edges, pred, side="right") - 1, 0, n_bins - 1)
            xs, ys = [], []
            for b in range(n_bins):
                sel = which == b
                if sel.any():
                    xs.append(pred[sel].mean())
                    ys.append(arr[sel, 1].mean())
            ax.plot(xs, ys, "o-", label="observed")
        ax.plot([0, 1], [0, 1], color="0.6", ls=":", label="ideal")
        ax.set_xlabel("calibrated probability")
        ax.set_ylabel("observed rate")
        ax.legend()
        return _save(fig, path, meta)


def metric_figure(table: list, path, meta=None):
    """Bar chart of the scalar metrics in an eval table."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        labels = [f"{r['metric']}@{r['k']}" if r["k"] is not None else r["metric"] for r in table]
        ax.barh(labels, [r["value"] for r in table], color="tab:green")
        ax.set_xlim(0, max(1.0, max((r["value"] for r in table), default=1.0)))
        fig.tight_layout()
        return _save(fig, path, meta)


def loss_figure(history: list, path, meta=None):
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        ax.plot(np.arange(len(history)), history)
        ax.set_xlabel("epoch")
        ax.set_ylabel("RAR loss")
        return _save(fig, path, meta)
