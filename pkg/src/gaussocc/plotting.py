"""PNG figures for CLI reports (matplotlib, Agg backend)."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .core import VoxelGrid  # noqa: E402

DPI = 100


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    # a fixed creation date keeps the PNG bytes stable between runs
    fig.savefig(path, dpi=DPI, bbox_inches="tight", metadata={"Software": None})
    plt.close(fig)
    return path


def top_down(grid: VoxelGrid) -> np.ndarray:
    """Bird's-eye label map: the highest nonempty label in each column, else C."""
    lab = grid.labels  # (nx, ny, nz)
    occ = lab != grid.empty_label
    any_occ = occ.any(axis=2)
    top = lab.shape[2] - 1 - np.argmax(occ[:, :, ::-1], axis=2)
    bev = np.take_along_axis(lab, top[:, :, None], axis=2)[:, :, 0]
    return np.where(any_occ, bev, grid.empty_label)


def _label_colors(C, palette=None):
    if palette is None:
        cmap = plt.get_cmap("tab10")
        palette = np.array([cmap(i % 10)[:3] for i in range(C)])
    palette = np.asarray(palette, dtype=float)[:C]
    return np.vstack([palette, [[1.0, 1.0, 1.0]]])


def plot_occupancy(pred: VoxelGrid, gt: VoxelGrid, path, palette=None, names=None):
    """Side-by-side bird's-eye views of ground truth and prediction."""
    colors = _label_colors(gt.class_count, palette)
    fig, axes = plt.subplots(1, 2, figsize=(9, 4.5))
    ext = [gt.origin[0], gt.origin[0] + gt.dims[0] * gt.voxel_size[0], gt.origin[1], gt.origin[1] + gt.dims[1] * gt.voxel_size[1]]
    for ax, grid, title in ((axes[0], gt, "ground truth"), (axes[1], pred, "prediction")):
        img = colors[top_down(grid)].transpose(1, 0, 2)
        ax.imshow(img, origin="lower", extent=ext, interpolation="nearest")
        ax.set_title(title)
        ax.set_xlabel("x [m]")
    axes[0].set_ylabel("y [m]")
    if names:
        handles = [plt.Rectangle((0, 0), 1, 1, color=colors[i]) for i in range(len(names))]
        fig.legend(handles, names, loc="lower center", ncol=len(names), frameon=False)
    return _save(fig, path)


def plot_curves(curves: dict, path, ylabel="loss"):
    """One line per named curve; each curve is a list of {"step", key} rows."""
    fig, ax = plt.subplots(figsize=(6, 3.5))
    for name, rows in curves.items():
        if not rows:
            continue
        ax.plot([r["step"] for r in rows], [r["loss"] for r in rows], label=name, lw=1.2)
    ax.set_xlabel("step")
    ax.set_ylabel(ylabel)
    ax.set_yscale("log")
    ax.grid(alpha=0.3)
    ax.legend(frameon=False)
    return _save(fig, path)


def plot_bench(report: dict, path):
    fig, ax = plt.subplots(figsize=(5, 3.5))
    x = np.arange(2)
    naive = [report["naive_fwd_ms"], report["naive_bwd_ms"]]
    blocked = [report["blocked_fwd_ms"], report["blocked_bwd_ms"]]
    ax.bar(x - 0.2, naive, 0.4, label="naive")
    ax.bar(x + 0.2, blocked, 0.4, label="blocked")
    ax.set_xticks(x, ["forward", "backward"])
    ax.set_ylabel("median time [ms]")
    ax.set_title(f"{report['gaussians']} Gaussians, {'x'.join(map(str, report['grid']))} voxels, {report['threads']} thread(s)")
    ax.legend(frameon=False)
    return _save(fig, path)


def plot_stream(rows: list, path):
    fig, ax = plt.subplots(figsize=(6, 3.5))
    frames = [r["frame"] for r in rows]
    for key in ("iou", "miou", "rayiou"):
        ax.plot(frames, [r[key] for r in rows], marker="o", label=key)
    ax.set_xlabel("frame")
    ax.set_ylim(0, 1)
    ax.grid(alpha=0.3)
    ax.legend(frameon=False)
    return _save(fig, path)
