"""Procedural face-like corpus with controlled component co-occurrence.

Each component is an axis-aligned ellipse drawn at a jittered prior position;
left/right pairs share color and mirror their priors about the vertical
midline, so the pair is visually identical and only position tells them
apart.  Occurrence is controlled by per-component marginals plus optional
pairwise conditionals, which lets a corpus reproduce the dominant-component
and mirrored-pair biases of real face datasets at desk scale.

The subject's right-side components sit left of the image midline, as in a
photograph.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator, Mapping

import numpy as np

from .errors import ConfigValidationError
from .schema import ComponentSchema, LabeledFace, SegMask, pair_stem, synthetic_face_schema


@dataclass(frozen=True)
class ShapeSpec:
    """Ellipse prior in unit canvas coordinates."""

    center: tuple[float, float]  # (y, x)
    radii: tuple[float, float]  # (ry, rx)
    color: tuple[float, float, float]
    position_jitter: float = 0.02
    radius_jitter: float = 0.08
    color_jitter: float = 0.05


@dataclass(frozen=True)
class SyntheticFaceSpec:
    schema: ComponentSchema
    canvas: int
    shapes: Mapping[str, ShapeSpec]
    occurrence: Mapping[str, float]
    coupling: Mapping[tuple[str, str], float] = field(default_factory=dict)
    background_noise: float = 0.08

    def __post_init__(self) -> None:
        if self.canvas < 8:
            raise ConfigValidationError("canvas", "canvas must be at least 8 pixels")
        missing = set(self.schema.names) - set(self.shapes)
        if missing:
            raise ConfigValidationError("shapes", f"no shape for components: {sorted(missing)}")
        for name, p in self.occurrence.items():
            if name not in self.schema.names:
                raise ConfigValidationError("occurrence", f"unknown component {name!r}")
            if not 0.0 <= p <= 1.0:
                raise ConfigValidationError("occurrence", f"{name}: probability {p} outside [0, 1]")
        self._check_coupling()
        self._check_mirror_symmetry()

    def _check_coupling(self) -> None:
        order = {n: i for i, n in enumerate(self.schema.names)}
        seen: set[str] = set()
        for (first, second), cond in self.coupling.items():
            key = f"coupling[{first},{second}]"
            if first not in order or second not in order:
                raise ConfigValidationError(key, "unknown component")
            if order[first] >= order[second]:
                raise ConfigValidationError(key, "conditioned component must come later in the schema")
            if second in seen:
                raise ConfigValidationError(key, f"{second} already has a coupling entry")
            seen.add(second)
            if not 0.0 <= cond <= 1.0:
                raise ConfigValidationError(key, f"conditional probability {cond} outside [0, 1]")
            # P(second) = cond * P(first) + q * (1 - P(first)) must be solvable with q in [0, 1]
            p_first = self.prob(first)
            p_second = self.prob(second)
            if p_first == 1.0:
                if abs(cond - p_second) > 1e-9:
                    raise ConfigValidationError(
                        key, f"first component is certain, so conditional must equal marginal {p_second}"
                    )
                continue
            q = (p_second - cond * p_first) / (1.0 - p_first)
            if not -1e-9 <= q <= 1.0 + 1e-9:
                raise ConfigValidationError(
                    key, f"marginal {p_second} unreachable: implied P({second}|not {first}) = {q:.4f}"
                )

    def _check_mirror_symmetry(self) -> None:
        for name in self.schema.names:
            if self.schema.side(name) != "left":
                continue
            stem = pair_stem(name)
            partner = next(
                (n for n in self.schema.names if n != name and pair_stem(n) == stem), None
            )
            if partner is None:
                continue
            a, b = self.shapes[name], self.shapes[partner]
            if abs((a.center[1] + b.center[1]) - 1.0) > 1e-6 or abs(a.center[0] - b.center[0]) > 1e-6:
                raise ConfigValidationError(
                    f"shapes[{name}]", f"prior not mirrored against {partner} about the midline"
                )

    def prob(self, name: str) -> float:
        return float(self.occurrence.get(name, 1.0))


def default_synthetic_spec(canvas: int = 64) -> SyntheticFaceSpec:
    """The bundled corpus: a near-certain mirrored pair plus looser components.

    The eyes appear in ~99.8% of faces and almost always together, so
    image-level labels alone cannot say which side is which; the brows
    mirror each other the same way at lower frequency.  That built-in
    ambiguity is what the masking and text-alignment stages are meant to
    resolve.
    """
    schema = synthetic_face_schema()
    shapes = {
        "skin": ShapeSpec((0.52, 0.50), (0.38, 0.30), (0.85, 0.66, 0.50), 0.02, 0.05, 0.04),
        "nose": ShapeSpec((0.55, 0.50), (0.09, 0.05), (0.90, 0.30, 0.20)),
        "mouth": ShapeSpec((0.72, 0.50), (0.045, 0.11), (0.80, 0.05, 0.45)),
        "r_eye": ShapeSpec((0.42, 0.32), (0.04, 0.07), (0.15, 0.35, 0.90)),
        "l_eye": ShapeSpec((0.42, 0.68), (0.04, 0.07), (0.15, 0.35, 0.90)),
        "r_brow": ShapeSpec((0.28, 0.32), (0.055, 0.11), (0.10, 0.85, 0.15)),
        "l_brow": ShapeSpec((0.28, 0.68), (0.055, 0.11), (0.10, 0.85, 0.15)),
    }
    occurrence = {
        "skin": 0.97,
        "nose": 0.85,
        "mouth": 0.80,
        "l_eye": 0.998,
        "r_eye": 0.998,
        "l_brow": 0.70,
        "r_brow": 0.70,
    }
    # Eyes nearly always appear together (the dominant co-occurring pair);
    # brows also pair up tightly but stay below the dominance threshold.
    coupling = {("l_eye", "r_eye"): 0.999, ("l_brow", "r_brow"): 0.99}
    return SyntheticFaceSpec(schema, canvas, shapes, occurrence, coupling)


def sample_presence(spec: SyntheticFaceSpec, rng: np.random.Generator) -> np.ndarray:
    """Draw one multi-hot presence vector honoring marginals and couplings."""
    schema = spec.schema
    by_second = {second: (first, cond) for (first, second), cond in spec.coupling.items()}
    y = np.zeros(schema.K, dtype=np.uint8)
    for i, name in enumerate(schema.names):
        p = spec.prob(name)
        if name in by_second:
            first, cond = by_second[name]
            p_first = spec.prob(first)
            if p_first == 1.0:
                p = cond
            elif y[schema.index_of(first)]:
                p = cond
            else:
                p = (p - cond * p_first) / (1.0 - p_first)
        y[i] = 1 if rng.random() < p else 0
    return y


def _render(
    spec: SyntheticFaceSpec, presence: np.ndarray, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray]:
    s = spec.canvas
    schema = spec.schema
    image = rng.uniform(0.0, spec.background_noise, size=(s, s, 3)).astype(np.float32)
    labels = np.full((s, s), schema.background_id, dtype=np.int64)
    ys, xs = np.mgrid[0:s, 0:s]
    ys = ys + 0.5
    xs = xs + 0.5
    for i, name in enumerate(schema.names):
        shape = spec.shapes[name]
        # draw the jitters even for absent components so that the stream
        # consumed per sample does not depend on the presence pattern
        dpos = rng.uniform(-shape.position_jitter, shape.position_jitter, size=2)
        drad = rng.uniform(-shape.radius_jitter, shape.radius_jitter, size=2)
        dcol = rng.uniform(-shape.color_jitter, shape.color_jitter, size=3)
        if not presence[i]:
            continue
        cy = (shape.center[0] + dpos[0]) * s
        cx = (shape.center[1] + dpos[1]) * s
        ry = max(shape.radii[0] * (1.0 + drad[0]) * s, 1.0)
        rx = max(shape.radii[1] * (1.0 + drad[1]) * s, 1.0)
        inside = ((ys - cy) / ry) ** 2 + ((xs - cx) / rx) ** 2 <= 1.0
        color = np.clip(np.asarray(shape.color) + dcol, 0.0, 1.0).astype(np.float32)
        image[inside] = color
        labels[inside] = i
    return image, labels


def iter_synthetic(
    spec: SyntheticFaceSpec, n: int, rng: np.random.Generator
) -> Iterator[tuple[LabeledFace, SegMask]]:
    if n < 1:
        raise ValueError(f"need n >= 1, got {n}")
    for i in range(n):
        presence = sample_presence(spec, rng)
        image, labels = _render(spec, presence, rng)
        mask = SegMask(labels, spec.schema.K)
        face = LabeledFace(image, mask.multi_hot(), id=f"synth_{i:06d}")
        yield face, mask


def generate_synthetic(
    spec: SyntheticFaceSpec, n: int, rng: np.random.Generator
) -> list[tuple[LabeledFace, SegMask]]:
    """Materialize n samples; empirical frequencies converge to the spec."""
    return list(iter_synthetic(spec, n, rng))


def spec_to_dict(spec: SyntheticFaceSpec) -> dict:
    return {
        "schema": {
            "names": list(spec.schema.names),
            "laterality": dict(spec.schema.laterality),
            "maskable": sorted(spec.schema.maskable),
            "phrases": dict(spec.schema.phrases),
        },
        "canvas": spec.canvas,
        "background_noise": spec.background_noise,
        "shapes": {
            name: {
                "center": list(s.center),
                "radii": list(s.radii),
                "color": list(s.color),
                "position_jitter": s.position_jitter,
                "radius_jitter": s.radius_jitter,
                "color_jitter": s.color_jitter,
            }
            for name, s in spec.shapes.items()
        },
        "occurrence": dict(spec.occurrence),
        "coupling": [[a, b, p] for (a, b), p in spec.coupling.items()],
    }


def spec_from_dict(d: dict) -> SyntheticFaceSpec:
    sd = d["schema"]
    schema = ComponentSchema(
        names=tuple(sd["names"]),
        laterality=dict(sd.get("laterality", {})),
        maskable=frozenset(sd.get("maskable", [])),
        phrases=dict(sd.get("phrases", {})),
    )
    shapes = {
        name: ShapeSpec(
            center=tuple(s["center"]),
            radii=tuple(s["radii"]),
            color=tuple(s["color"]),
            position_jitter=s.get("position_jitter", 0.02),
            radius_jitter=s.get("radius_jitter", 0.08),
            color_jitter=s.get("color_jitter", 0.05),
        )
        for name, s in d["shapes"].items()
    }
    coupling = {(a, b): p for a, b, p in d.get("coupling", [])}
    return SyntheticFaceSpec(
        schema=schema,
        canvas=int(d["canvas"]),
        shapes=shapes,
        occurrence=dict(d["occurrence"]),
        coupling=coupling,
        background_noise=float(d.get("background_noise", 0.08)),
    )


def save_spec(spec: SyntheticFaceSpec, path) -> None:
    import yaml

    with open(path, "w") as fh:
        yaml.safe_dump(spec_to_dict(spec), fh, sort_keys=True)


def load_spec(path) -> SyntheticFaceSpec:
    import yaml

    with open(path) as fh:
        return spec_from_dict(yaml.safe_load(fh))
