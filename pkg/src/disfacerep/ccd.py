"""Co-occurrence suppression by detection-guided masking.

Dominant components are randomly selected per image, located with an
open-set detection client, filtered with a multi-threshold laterality rule,
and zeroed out of the pixels; image-level labels are cleared for masked
components.  The filter encodes the photographic mirror convention: the
subject's right-side components lie left of the image midline, so a
right-laterality box must have its horizontal center in the left image
half, and vice versa.  Central components pass on confidence alone.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .config import PipelineConfig
from .detection import Detection, DetectionClient, image_to_png_bytes
from .errors import DetectorTransportError
from .rng import substream
from .schema import ComponentSchema, LabeledFace

logger = logging.getLogger("disfacerep")


@dataclass(frozen=True)
class MaskPlan:
    """Accepted boxes to zero; at most one box per component."""

    boxes: tuple[Detection, ...]

    def __post_init__(self) -> None:
        names = [d.component for d in self.boxes]
        if len(set(names)) != len(names):
            raise ValueError(f"multiple boxes for one component: {names}")

    @property
    def masked_components(self) -> tuple[str, ...]:
        return tuple(d.component for d in self.boxes)

    def union(self, height: int, width: int) -> np.ndarray:
        """Boolean (H, W) union of all boxes, clipped to bounds."""
        m = np.zeros((height, width), dtype=bool)
        for d in self.boxes:
            h1, w1, h2, w2 = d.box
            m[max(h1, 0) : min(h2, height), max(w1, 0) : min(w2, width)] = True
        return m


def detect(
    face: LabeledFace,
    components: Sequence[str],
    client: DetectionClient,
    schema: ComponentSchema,
) -> list[Detection]:
    """Query the client for the given components and normalize the response."""
    if not components:
        raise ValueError("components must be non-empty")
    for name in components:
        schema.index_of(name)  # raises on unknown names
    phrase_to_name = {schema.phrase(n): n for n in components}
    raw = client.detect(image_to_png_bytes(face.pixels), list(phrase_to_name))
    H = W = face.pixels.shape[0]
    out: list[Detection] = []
    for phrase, box, conf in raw:
        key = phrase.strip()
        name = phrase_to_name.get(key, key)
        if name not in schema.names:
            logger.warning("dropping detection for unknown component %r", phrase)
            continue
        h1, w1, h2, w2 = box
        h1, h2 = int(np.clip(h1, 0, H)), int(np.clip(h2, 0, H))
        w1, w2 = int(np.clip(w1, 0, W)), int(np.clip(w2, 0, W))
        out.append(Detection(name, (h1, w1, h2, w2), float(np.clip(conf, 0.0, 1.0))))
    return out


def filter_boxes(
    dets: Sequence[Detection],
    image_width: int,
    conf_thresholds: Sequence[float],
    schema: ComponentSchema,
) -> list[Detection]:
    """Keep at most one geometrically consistent box per component.

    Thresholds are walked from highest to lowest; at each level the
    highest-confidence candidate satisfying the laterality condition wins
    and the walk stops for that component.
    """
    if image_width <= 0:
        raise ValueError(f"image_width must be positive, got {image_width}")
    thresholds = list(conf_thresholds)
    if not thresholds or any(b >= a for a, b in zip(thresholds, thresholds[1:])):
        raise ValueError(f"conf_thresholds must be non-empty and strictly decreasing: {thresholds}")
    half = image_width / 2.0
    by_component: dict[str, list[Detection]] = {}
    for d in dets:
        by_component.setdefault(d.component, []).append(d)
    accepted: list[Detection] = []
    for name in schema.names:
        cands = by_component.get(name)
        if not cands:
            continue
        side = schema.side(name)
        for t in thresholds:
            eligible = [d for d in cands if d.confidence >= t and _geometry_ok(d, side, half)]
            if eligible:
                accepted.append(max(eligible, key=lambda d: d.confidence))
                break
    return accepted


def _geometry_ok(d: Detection, side: str | None, half: float) -> bool:
    if side == "right":
        return d.center_w < half
    if side == "left":
        return d.center_w > half
    return True


def plan_mask(accepted: Sequence[Detection], schema: ComponentSchema) -> MaskPlan:
    maskable = schema.maskable
    for d in accepted:
        if d.component not in maskable:
            raise ValueError(f"component {d.component!r} is not maskable")
    return MaskPlan(tuple(accepted))


def check_overlap(plan: MaskPlan) -> list[tuple[str, str]]:
    """Pairs of distinct components with intersecting boxes (should be empty)."""
    pairs = []
    for i, a in enumerate(plan.boxes):
        for b in plan.boxes[i + 1 :]:
            ah1, aw1, ah2, aw2 = a.box
            bh1, bw1, bh2, bw2 = b.box
            if max(ah1, bh1) < min(ah2, bh2) and max(aw1, bw1) < min(aw2, bw2):
                pairs.append((a.component, b.component))
    return pairs


def apply_mask(face: LabeledFace, plan: MaskPlan, schema: ComponentSchema) -> LabeledFace:
    """Zero the union of planned boxes and clear labels of masked components."""
    if not plan.boxes:
        return face
    H, W = face.pixels.shape[:2]
    m = plan.union(H, W)
    pixels = face.pixels.copy()
    pixels[m] = 0.0
    label = face.label.copy()
    for name in plan.masked_components:
        label[schema.index_of(name)] = 0
    return LabeledFace(pixels, label, id=face.id)


@dataclass
class CcdReport:
    n_images: int = 0
    n_masked_images: int = 0
    masked_counts: dict[str, int] = field(default_factory=dict)
    present_counts: dict[str, int] = field(default_factory=dict)
    overlap_warnings: int = 0
    errors: list[tuple[str, str]] = field(default_factory=list)
    plans: list[dict] = field(default_factory=list)  # one record per masked image

    def masking_rate(self, name: str) -> float:
        present = self.present_counts.get(name, 0)
        return self.masked_counts.get(name, 0) / present if present else 0.0


def build_debiased_set(
    dataset: Sequence[LabeledFace],
    config: PipelineConfig,
    client: DetectionClient,
    schema: ComponentSchema,
    dominant: Sequence[str] | None = None,
) -> tuple[list[LabeledFace], CcdReport]:
    """Mask each dominant-and-present component independently with
    probability ``config.mask_prob`` per image.

    ``dominant`` defaults to every maskable component.  Selection draws come
    from a per-image substream keyed on (seed, sample id), so the result is
    identical regardless of processing order.  Client failures skip masking
    for that image and are recorded, not raised.
    """
    if dominant is None:
        dominant = [schema.names[k] for k in schema.maskable_indices()]
    report = CcdReport(n_images=len(dataset))
    out: list[LabeledFace] = []
    for face in dataset:
        rng = substream(config.seed, f"ccd:{face.id}")
        draws = rng.random(len(dominant))
        selected = []
        for name, u in zip(dominant, draws):
            if not face.label[schema.index_of(name)]:
                continue
            report.present_counts[name] = report.present_counts.get(name, 0) + 1
            if u < config.mask_prob:
                selected.append(name)
        if not selected:
            out.append(face)
            continue
        try:
            dets = detect(face, selected, client, schema)
        except DetectorTransportError as exc:
            report.errors.append((face.id, str(exc)))
            out.append(face)
            continue
        accepted = filter_boxes(dets, face.pixels.shape[1], config.conf_thresholds, schema)
        plan = plan_mask(accepted, schema)
        if check_overlap(plan):
            report.overlap_warnings += 1
            logger.warning("overlapping accepted boxes on sample %s", face.id)
        for name in plan.masked_components:
            report.masked_counts[name] = report.masked_counts.get(name, 0) + 1
        masked = apply_mask(face, plan, schema)
        if plan.boxes:
            report.n_masked_images += 1
            report.plans.append(
                {
                    "id": face.id,
                    "boxes": [
                        {"component": d.component, "box": list(d.box), "confidence": d.confidence}
                        for d in plan.boxes
                    ],
                }
            )
        out.append(masked)
    return out, report


def masking_rates(report: CcdReport) -> Mapping[str, float]:
    return {name: report.masking_rate(name) for name in sorted(report.present_counts)}
