"""Report figures written next to the CSV outputs of the CLI."""

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "figure.figsize": (6.4, 4.0),
    "figure.dpi": 100,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "legend.frameon": False,
    "font.size": 10,
}


def _finish(fig, path):
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path


def plot_frame_psnr(rows, path, title=None):
    """``rows`` are (frame, psnr_degraded, psnr_filtered, ctus_on) tuples."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        frames = [r[0] for r in rows]
        ax.plot(frames, [r[1] for r in rows], "o-", color="0.5", label="degraded")
        ax.plot(frames, [r[2] for r in rows], "s-", color="C3", label="filtered")
        ax.set_xlabel("frame")
        ax.set_ylabel("luma PSNR (dB)")
        if title:
            ax.set_title(title)
        ax.legend()
        return _finish(fig, path)


def plot_flag_map(flags, grid, path):
    """Per-frame CTU on/off maps side by side."""
    n = len(flags)
    cols = min(n, 5)
    rows = -(-n // cols)
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(rows, cols, squeeze=False,
                                 figsize=(2.0 * cols, 2.0 * rows * grid.rows / max(grid.cols, 1) + 0.6))
        for k, ax in enumerate(axes.ravel()):
            ax.axis("off")
            if k < n:
                ax.imshow(np.array(flags[k], float).reshape(grid.rows, grid.cols),
                          cmap="Greys", vmin=0, vmax=1, interpolation="nearest")
                ax.set_title(f"frame {k}", fontsize=8)
        return _finish(fig, path)


def plot_rd_curves(anchor, test, path, bd=None):
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        for points, label, style in ((anchor, "anchor", "o-"), (test, "test", "s--")):
            pts = sorted(points)
            ax.plot([p[0] for p in pts], [p[1] for p in pts], style, label=label)
        ax.set_xscale("log")
        ax.set_xlabel("rate")
        ax.set_ylabel("PSNR (dB)")
        if bd is not None:
            ax.set_title(f"BD-rate {bd:+.2f}%")
        ax.legend()
        return _finish(fig, path)


def plot_loss(log, path):
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        ax.semilogy([it for it, _ in log], [v for _, v in log], color="C0")
        ax.set_xlabel("iteration")
        ax.set_ylabel("mean batch loss")
        return _finish(fig, path)


def plot_timing(baseline, modified, path):
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.0, 3.2))
        ax.bar(["T", "T'"], [baseline, modified], color=["0.6", "C3"])
        ax.set_ylabel("seconds")
        ax.set_title(f"T'/T = {100 * modified / baseline:.1f}%")
        return _finish(fig, path)
