"""Component-level F1 scoring and cross-dataset label remapping.

F1 is micro-aggregated: TP/FP/FN pixel counts are pooled over the whole
dataset per class, then F1_k = 2TP/(2TP+FP+FN).  The mean excludes the
background class always, and by default also excludes classes whose pooled
counts are all zero (no support in either prediction or ground truth) —
pass ``score_empty=True`` to count those as 0 instead.

Remap tables are two-column text files in *file index* convention
(0 = background), with source/target class name lists in the header used
to cross-check the table against the schemas it claims to translate.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .errors import DataError
from .schema import ComponentSchema, SegMask

DROP = "DROP"

# dataset pairs sometimes name the same region differently
_NAME_ALIASES = {
    ("mouth", "i_mouth"),
    ("i_mouth", "mouth"),
}


@dataclass(frozen=True)
class F1Report:
    schema: ComponentSchema
    per_class: np.ndarray  # (K,) F1 per component, 0.0 where undefined
    mean_f1: float
    confusion: np.ndarray  # (K, 3) pooled (TP, FP, FN) pixel counts
    included: tuple[int, ...]  # component indices contributing to the mean


def f1_report(
    preds: Sequence[SegMask],
    gts: Sequence[SegMask],
    schema: ComponentSchema,
    score_empty: bool = False,
) -> F1Report:
    if len(preds) != len(gts):
        raise ValueError(f"got {len(preds)} predictions for {len(gts)} ground truths")
    if not preds:
        raise ValueError("nothing to score")
    K = schema.K
    confusion = np.zeros((K, 3), dtype=np.int64)
    for i, (p, g) in enumerate(zip(preds, gts)):
        if p.labels.shape != g.labels.shape:
            raise ValueError(
                f"sample {i}: prediction shape {p.labels.shape} != ground truth {g.labels.shape}"
            )
        for k in range(K):
            pk = p.labels == k
            gk = g.labels == k
            confusion[k, 0] += np.count_nonzero(pk & gk)
            confusion[k, 1] += np.count_nonzero(pk & ~gk)
            confusion[k, 2] += np.count_nonzero(~pk & gk)
    per_class = np.zeros(K, dtype=np.float64)
    included = []
    for k in range(K):
        tp, fp, fn = confusion[k]
        denom = 2 * tp + fp + fn
        if denom == 0:
            if score_empty:
                included.append(k)
            continue
        per_class[k] = 2.0 * tp / denom
        included.append(k)
    mean = float(per_class[included].mean()) if included else 0.0
    per_class.setflags(write=False)
    confusion.setflags(write=False)
    return F1Report(schema, per_class, mean, confusion, tuple(included))


@dataclass(frozen=True)
class LabelRemap:
    """File-index translation between two dataset label conventions."""

    source_names: tuple[str, ...]  # index 0 is the background name
    target_names: tuple[str, ...]
    mapping: Mapping[int, int | None]  # source file index -> target file index, None = drop

    def __post_init__(self) -> None:
        targets = [t for t in self.mapping.values() if t is not None]
        if len(set(targets)) != len(targets):
            raise DataError("remap is not injective on mapped entries")
        for s, t in self.mapping.items():
            if not 0 <= s < len(self.source_names):
                raise DataError(f"source index {s} out of range")
            if t is not None and not 0 <= t < len(self.target_names):
                raise DataError(f"target index {t} out of range")

    def lut(self, drop_to: int = 0) -> np.ndarray:
        """Dense lookup table over source file indices; unmapped slots are -1."""
        table = np.full(len(self.source_names), -1, dtype=np.int64)
        for s, t in self.mapping.items():
            table[s] = drop_to if t is None else t
        return table

    def inverse(self) -> "LabelRemap":
        inv = {t: s for s, t in self.mapping.items() if t is not None}
        return LabelRemap(self.target_names, self.source_names, inv)


def parse_remap(path: str | Path) -> LabelRemap:
    source_names: tuple[str, ...] | None = None
    target_names: tuple[str, ...] | None = None
    mapping: dict[int, int | None] = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.strip()
        if not line:
            continue
        if line.startswith("#"):
            body = line[1:].strip()
            if body.startswith("source_names:"):
                source_names = tuple(n.strip() for n in body.split(":", 1)[1].split(","))
            elif body.startswith("target_names:"):
                target_names = tuple(n.strip() for n in body.split(":", 1)[1].split(","))
            continue
        parts = line.split()
        if len(parts) != 2:
            raise DataError(f"{path}:{lineno}: expected 'source target', got {line!r}")
        src = int(parts[0])
        tgt = None if parts[1] == DROP else int(parts[1])
        if src in mapping:
            raise DataError(f"{path}:{lineno}: duplicate source index {src}")
        mapping[src] = tgt
    if source_names is None or target_names is None:
        raise DataError(f"{path}: missing source_names/target_names header")
    return LabelRemap(source_names, target_names, mapping)


def validate_remap(
    remap: LabelRemap, source: ComponentSchema, target: ComponentSchema
) -> None:
    """Cross-check the table against schemas by name, not just by index."""

    def names_match(a: str, b: str) -> bool:
        return a == b or (a, b) in _NAME_ALIASES

    src_names = ("bg",) + source.names
    tgt_names = ("bg",) + target.names
    if remap.source_names != src_names:
        raise DataError(
            f"remap source names {remap.source_names} do not match schema {src_names}"
        )
    if remap.target_names != tgt_names:
        raise DataError(
            f"remap target names {remap.target_names} do not match schema {tgt_names}"
        )
    for s, t in remap.mapping.items():
        if t is None or s == 0:
            continue
        if not names_match(remap.source_names[s], remap.target_names[t]):
            raise DataError(
                f"remap sends {remap.source_names[s]!r} (index {s}) to "
                f"{remap.target_names[t]!r} (index {t}): name mismatch"
            )


def remap_masks(
    masks: Sequence[SegMask],
    remap: LabelRemap,
    source: ComponentSchema,
    target: ComponentSchema,
) -> list[SegMask]:
    """Translate masks between schema conventions via the file-index table.

    Dropped classes land in the target background; a pixel whose class has
    no table entry at all is an error.
    """
    lut = remap.lut(drop_to=0)
    out = []
    for i, mask in enumerate(masks):
        file_vals = np.where(mask.labels == mask.num_components, 0, mask.labels + 1)
        if file_vals.max(initial=0) >= lut.shape[0]:
            raise DataError(f"mask {i}: class index beyond remap table")
        mapped = lut[file_vals]
        if (mapped < 0).any():
            missing = sorted(np.unique(file_vals[mapped < 0]).tolist())
            raise DataError(f"mask {i}: no remap entry for source indices {missing}")
        labels = np.where(mapped == 0, target.K, mapped - 1)
        out.append(SegMask(labels.astype(np.int64), target.K))
    return out


def default_remap_path() -> Path:
    return Path(__file__).parent / "data" / "celebamask_hq_to_lapa.txt"


def ablation_table(
    runs: Mapping[str, F1Report], columns: Sequence[str] | None = None
) -> str:
    """Fixed-width comparison table; rows follow the given run order."""
    if not runs:
        raise ValueError("no runs to tabulate")
    reports = list(runs.values())
    schema = reports[0].schema
    for r in reports[1:]:
        if r.schema.names != schema.names:
            raise ValueError("ablation runs use different schemas")
    cols = list(columns) if columns is not None else list(schema.names)
    for c in cols:
        schema.index_of(c)
    header = ["run"] + cols + ["mean_f1"]
    rows = [header]
    for name, rep in runs.items():
        row = [name]
        row += [f"{rep.per_class[schema.index_of(c)] * 100:.2f}" for c in cols]
        row += [f"{rep.mean_f1 * 100:.2f}"]
        rows.append(row)
    widths = [max(len(r[i]) for r in rows) for i in range(len(header))]
    lines = ["  ".join(cell.ljust(w) for cell, w in zip(row, widths)).rstrip() for row in rows]
    return "\n".join(lines) + "\n"
