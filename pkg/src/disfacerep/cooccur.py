"""Component co-occurrence statistics over image-level labels.

These statistics quantify the bias that makes image-level supervision weak
for faces: a handful of components show up in nearly every image, so a
classifier never sees them absent.  The dominant set (high-frequency AND
maskable) is what the detection-guided masking stage suppresses.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import yaml

from .schema import ComponentSchema


@dataclass(frozen=True)
class CooccurrenceReport:
    schema: ComponentSchema
    n_samples: int
    frequency: np.ndarray  # (K,) fraction of images containing each component
    pair_matrix: np.ndarray  # (K, K) P(j present | i present), rows indexed by i
    dominance_threshold: float
    dominant: tuple[int, ...]  # maskable components at/above the threshold


def compute_cooccurrence(
    labels: Sequence[np.ndarray] | np.ndarray,
    schema: ComponentSchema,
    dominance_threshold: float = 0.9,
) -> CooccurrenceReport:
    Y = np.asarray(labels, dtype=np.float64)
    if Y.ndim != 2 or Y.shape[0] == 0:
        raise ValueError(f"need a non-empty (n, K) label array, got shape {Y.shape}")
    if Y.shape[1] != schema.K:
        raise ValueError(f"labels have {Y.shape[1]} columns, schema has {schema.K} components")
    n = Y.shape[0]
    counts = Y.sum(axis=0)
    frequency = counts / n
    joint = Y.T @ Y  # joint[i][j] = number of images containing both i and j
    with np.errstate(invalid="ignore", divide="ignore"):
        pair = np.where(counts[:, None] > 0, joint / counts[:, None], 0.0)
    frequency.setflags(write=False)
    pair.setflags(write=False)
    report = CooccurrenceReport(schema, n, frequency, pair, dominance_threshold, ())
    dominant = select_dominant(report, dominance_threshold)
    return CooccurrenceReport(schema, n, frequency, pair, dominance_threshold, dominant)


def select_dominant(report: CooccurrenceReport, threshold: float) -> tuple[int, ...]:
    """Maskable components whose image frequency reaches the threshold."""
    if not 0.0 < threshold <= 1.0:
        raise ValueError(f"threshold must be in (0, 1], got {threshold}")
    maskable = set(report.schema.maskable_indices())
    return tuple(
        k for k in range(report.schema.K) if k in maskable and report.frequency[k] >= threshold
    )


def save_report(report: CooccurrenceReport, path: str | Path) -> None:
    names = list(report.schema.names)
    payload = {
        "n_samples": report.n_samples,
        "dominance_threshold": report.dominance_threshold,
        "frequency": {n: float(f) for n, f in zip(names, report.frequency)},
        "pair_matrix": {
            names[i]: {names[j]: float(report.pair_matrix[i, j]) for j in range(len(names))}
            for i in range(len(names))
        },
        "dominant": [names[k] for k in report.dominant],
    }
    Path(path).write_text(yaml.safe_dump(payload, sort_keys=True))


def plot_frequency(report: CooccurrenceReport, path: str | Path) -> None:
    """Bar chart of per-component image frequency with the dominance line."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    names = list(report.schema.names)
    fig, ax = plt.subplots(figsize=(max(6, 0.6 * len(names)), 4))
    colors = ["tab:red" if k in report.dominant else "tab:blue" for k in range(len(names))]
    ax.bar(range(len(names)), report.frequency, color=colors)
    ax.axhline(report.dominance_threshold, color="black", linestyle="--", linewidth=1)
    ax.set_xticks(range(len(names)))
    ax.set_xticklabels(names, rotation=45, ha="right")
    ax.set_ylabel("image frequency")
    ax.set_ylim(0, 1.05)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
