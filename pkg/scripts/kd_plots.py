#!/usr/bin/env python3
"""
Diagnostic Figures
Static PNG renders of the logits-gap CDF, the correlation-difference
matrix and the per-step loss curves from a metrics stream.
"""

from pathlib import Path
from typing import Dict, List, Sequence, Tuple, Union

import jsonlines
import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from kd_logging import get_logger  # noqa: E402

logger = get_logger(__name__)

LOSS_SERIES = ("ce", "fl", "logits_kl", "total")


def _save(fig, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    logger.info("figure_written", path=str(path))
    return path


def render_cdf(points: Sequence[Tuple[float, float]], path: Union[str, Path], label: str = "student") -> Path:
    xs = [x for x, _ in points]
    ys = [y for _, y in points]
    fig, ax = plt.subplots(figsize=(5, 4))
    ax.step(xs, ys, where="post", label=label)
    ax.set_xlabel("|teacher logit - student logit|")
    ax.set_ylabel("cumulative fraction")
    ax.set_ylim(0.0, 1.02)
    ax.grid(alpha=0.3)
    ax.legend(loc="lower right")
    return _save(fig, path)


def render_corr_diff(matrix: np.ndarray, path: Union[str, Path]) -> Path:
    fig, ax = plt.subplots(figsize=(5, 4.5))
    image = ax.imshow(matrix, cmap="viridis", vmin=0.0, vmax=max(float(matrix.max()), 1e-12))
    ax.set_xlabel("class")
    ax.set_ylabel("class")
    ax.set_title("|corr teacher - corr student|")
    fig.colorbar(image, ax=ax, fraction=0.046, pad=0.04)
    return _save(fig, path)


def read_step_records(metrics_path: Union[str, Path]) -> List[Dict[str, float]]:
    """Per-step records only; epoch summaries carry val_top1"""
    with jsonlines.open(metrics_path) as reader:
        return [record for record in reader if "val_top1" not in record]


def render_loss_curves(metrics_path: Union[str, Path], path: Union[str, Path]) -> Path:
    records = read_step_records(metrics_path)
    if not records:
        raise ValueError(f"{metrics_path} holds no per-step records")
    steps = [record["step"] for record in records]
    fig, ax = plt.subplots(figsize=(6, 4))
    for name in LOSS_SERIES:
        ax.plot(steps, [record[name] for record in records], label=name, linewidth=1.2)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_yscale("symlog", linthresh=1e-3)
    ax.grid(alpha=0.3)
    ax.legend()
    return _save(fig, path)
