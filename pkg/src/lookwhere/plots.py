"""Report figures, rendered headless to PNG files next to the metric tables."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "figure.figsize": (4.8, 3.2),
    "figure.dpi": 120,
    "font.size": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "legend.frameon": False,
}


def _save(fig, path: Path) -> Path:
    fig.tight_layout()
    # fixed metadata keeps repeated renders byte-stable
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)
    return path


def _numeric(rows: list[dict], key: str) -> list[dict]:
    return [r for r in rows if isinstance(r.get(key), (int, float)) and not isinstance(r.get(key), bool)]


def accuracy_vs_k(rows: list[dict], path: Path, metric: str = "accuracy") -> Path | None:
    """One line per selection strategy."""
    rows = _numeric(rows, metric)
    if not rows:
        return None
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        for sel in sorted({r["selection"] for r in rows}):
            pts = sorted((r["k"], r[metric]) for r in rows if r["selection"] == sel)
            ax.plot(*zip(*pts), marker="o", label=sel)
        ax.set_xlabel("selected patches k")
        ax.set_ylabel(metric.replace("_", " "))
        ax.set_ylim(0, 1.02)
        ax.legend()
        return _save(fig, path)


def flops_vs_k(rows: list[dict], path: Path) -> Path | None:
    sel = sorted((r["k"], r["gflops"]) for r in _numeric(rows, "gflops") if r["selection"] == "selector")
    full = [r["gflops"] for r in _numeric(rows, "gflops") if r["selection"] == "teacher-full"]
    if not sel:
        return None
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        ax.plot(*zip(*sel), marker="o", label="selector + extractor")
        if full:
            ax.axhline(full[0], color="k", linestyle="--", linewidth=1, label="full ViT")
        ax.set_xlabel("selected patches k")
        ax.set_ylabel("GFLOPs")
        ax.legend()
        return _save(fig, path)


def map_panel(image: np.ndarray, maps: dict[str, np.ndarray], path: Path,
              selected: np.ndarray | None = None) -> Path:
    """Input image beside each score map; selected cells are outlined on the first map."""
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, 1 + len(maps), figsize=(2.2 * (1 + len(maps)), 2.4))
        axes = np.atleast_1d(axes)
        axes[0].imshow(image[..., 0] if image.ndim == 3 else image, cmap="gray")
        axes[0].set_title("input")
        for ax, (name, m) in zip(axes[1:], maps.items()):
            ax.imshow(m, cmap="magma")
            ax.set_title(name)
        if selected is not None and maps:
            n = next(iter(maps.values())).shape[0]
            for idx in np.asarray(selected).reshape(-1):
                r, c = divmod(int(idx), n)
                axes[1].add_patch(plt.Rectangle((c - 0.5, r - 0.5), 1, 1, fill=False, edgecolor="cyan", lw=1))
        for ax in axes:
            ax.set_xticks([])
            ax.set_yticks([])
            ax.grid(False)
        return _save(fig, path)


def loss_curves(history: list[dict], path: Path) -> Path | None:
    if not history:
        return None
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        for key in ("cls", "pat", "map"):
            if key in history[0]:
                ax.plot([h["epoch"] for h in history], [float(h[key]) for h in history], label=key)
        ax.set_yscale("log")
        ax.set_xlabel("epoch")
        ax.set_ylabel("mean loss")
        ax.legend()
        return _save(fig, path)
