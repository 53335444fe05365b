"""Artifact writers: config-stamped CSVs, PNM image grids, figures, dumps.

Every artifact embeds the resolved run configuration, either inline as `#`
comment lines (CSV, PNM) or as a `<path>.config` sidecar (binary formats), so
any output file describes the run that produced it.  Figures are rendered
with the Agg backend and stripped of software metadata so identical runs give
identical bytes.
"""

from __future__ import annotations

import math
import os

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from .errors import UsageError
from .runconfig import RunConfig, config_to_text

LOSS_CSV_HEADER = "step,l_simple,l_vlb"


def _config_comment(rc: RunConfig) -> str:
    return "".join(f"# {line}\n" for line in config_to_text(rc).splitlines())


def write_csv(path: str, rc: RunConfig, body: str) -> None:
    """Write a CSV whose leading # comments carry the resolved config."""
    with open(path, "w", encoding="utf-8") as f:
        f.write(_config_comment(rc))
        f.write(body)


def write_config_sidecar(artifact_path: str, rc: RunConfig) -> str:
    sidecar = artifact_path + ".config"
    with open(sidecar, "w", encoding="utf-8") as f:
        f.write(config_to_text(rc))
    return sidecar


def loss_history_csv(history) -> str:
    lines = [LOSS_CSV_HEADER]
    lines += [f"{step},{simple!r},{vlb!r}" for step, simple, vlb in history]
    return "\n".join(lines) + "\n"


# -- image grids -------------------------------------------------------------------


def tile_grid(images: np.ndarray, cols: int = 0) -> np.ndarray:
    """Tile (n, c, h, w) images row-major into one (c, H, W) canvas."""
    if images.ndim != 4:
        raise UsageError(f"expected (n, c, h, w) images, got shape {images.shape}")
    n, c, h, w = images.shape
    if cols <= 0:
        cols = max(1, math.isqrt(n))
    rows = (n + cols - 1) // cols
    canvas = np.zeros((c, rows * h, cols * w), images.dtype)
    for i in range(n):
        r, q = divmod(i, cols)
        canvas[:, r * h : (r + 1) * h, q * w : (q + 1) * w] = images[i]
    return canvas


def to_uint8(x: np.ndarray) -> np.ndarray:
    """Map [-1, 1] floats to [0, 255] bytes, clipping out-of-range values."""
    return np.clip(np.rint((np.asarray(x, np.float64) + 1.0) * 127.5), 0, 255).astype(np.uint8)


def write_pnm_grid(path: str, images: np.ndarray, rc: RunConfig, cols: int = 0) -> None:
    """Write a P5 (1-channel) or P6 (3-channel) binary grid of [-1, 1] images.

    The resolved config rides along as # comment lines after the magic.
    """
    canvas = to_uint8(tile_grid(images, cols))
    c, height, width = canvas.shape
    if c == 1:
        magic, pixels = b"P5", canvas[0]
    elif c == 3:
        magic, pixels = b"P6", canvas.transpose(1, 2, 0)
    else:
        raise UsageError(f"PNM grids need 1 or 3 channels, got {c}")
    with open(path, "wb") as f:
        f.write(magic + b"\n")
        f.write(_config_comment(rc).encode("utf-8"))
        f.write(f"{width} {height}\n255\n".encode("ascii"))
        f.write(pixels.tobytes())


def save_samples_npy(path: str, images: np.ndarray, rc: RunConfig) -> None:
    np.save(path, images)
    write_config_sidecar(path, rc)


# -- figures -----------------------------------------------------------------------

_FIG_METADATA = {"Software": None}  # drop the version stamp for stable bytes


def _finish(fig, path: str) -> None:
    fig.tight_layout()
    fig.savefig(path, metadata=_FIG_METADATA)
    plt.close(fig)


def save_loss_figure(path: str, history) -> None:
    steps = [h[0] for h in history]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(steps, [h[1] for h in history], label="l_simple")
    ax.plot(steps, [h[2] for h in history], label="l_vlb")
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    ax.legend()
    _finish(fig, path)


def save_cost_figure(path: str, report, top: int = 20) -> None:
    rows = sorted(report.rows, key=lambda r: r.macs, reverse=True)[:top]
    fig, ax = plt.subplots(figsize=(7, max(3, 0.3 * len(rows))))
    ax.barh([r.name for r in rows][::-1], [r.macs for r in rows][::-1])
    ax.set_xlabel("MACs")
    ax.set_title(f"{report.target}: {report.total_macs:,} MACs, {report.total_params:,} params")
    _finish(fig, path)


def save_bench_figure(path: str, rows) -> None:
    labels = sorted({f"{r.n_tokens}x{r.width}" for r in rows})
    blocks = sorted({r.block for r in rows})
    x = np.arange(len(labels), dtype=np.float64)
    width = 0.8 / max(1, len(blocks))
    fig, ax = plt.subplots(figsize=(7, 4))
    for i, block in enumerate(blocks):
        med = {f"{r.n_tokens}x{r.width}": r.median_us for r in rows if r.block == block}
        ax.bar(x + i * width, [med.get(lab, 0.0) for lab in labels], width, label=block)
    ax.set_xticks(x + 0.4 - width / 2, labels)
    ax.set_xlabel("tokens x width")
    ax.set_ylabel("median us per forward")
    ax.set_yscale("log")
    ax.legend()
    _finish(fig, path)


def save_activation_figure(path: str, reports: dict) -> None:
    """Bar chart of per-channel activation scores, one series per label."""
    fig, ax = plt.subplots(figsize=(7, 4))
    width = 0.8 / max(1, len(reports))
    for i, (label, rep) in enumerate(sorted(reports.items())):
        idx = np.arange(rep.scores.shape[0], dtype=np.float64)
        ax.bar(idx + i * width, rep.scores, width, label=label)
    ax.set_xlabel("channel")
    ax.set_ylabel("mean activation")
    ax.legend()
    _finish(fig, path)


def figure_path_for(csv_path: str) -> str:
    stem, _ = os.path.splitext(csv_path)
    return stem + ".png"
