"""Domain types shared by every stage of the pipeline.

A :class:`ComponentSchema` fixes the universe of K facial components, their
left/right/central laterality and which of them are eligible for
detector-guided masking.  Images travel as :class:`LabeledFace` (pixels plus a
multi-hot presence vector) and dense labels as :class:`SegMask` (integer map
over component indices, with ``K`` reserved for background).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

LATERALITIES = ("left", "right", "central")


def _frozen_array(arr: np.ndarray) -> np.ndarray:
    out = np.ascontiguousarray(arr)
    if out is arr:
        out = arr.copy()
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class ComponentSchema:
    """Ordered label set with laterality and masking metadata.

    Component index = position in ``names``.  ``background_id`` is ``K``, one
    past the last component, and is never itself a component.
    """

    names: tuple[str, ...]
    laterality: Mapping[str, str]
    maskable: frozenset[str]
    phrases: Mapping[str, str] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if len(set(self.names)) != len(self.names):
            raise ValueError("component names must be unique")
        if not self.names:
            raise ValueError("schema needs at least one component")
        unknown = set(self.laterality) - set(self.names)
        if unknown:
            raise ValueError(f"laterality entries for unknown components: {sorted(unknown)}")
        for name in self.names:
            side = self.laterality.get(name, "central")
            if side not in LATERALITIES:
                raise ValueError(f"{name}: laterality must be one of {LATERALITIES}")
        bad_mask = self.maskable - set(self.names)
        if bad_mask:
            raise ValueError(f"maskable components not in schema: {sorted(bad_mask)}")
        self._check_pairs()
        # fill phrase defaults ("l_eye" -> "left eye") for components without one
        phrases = dict(self.phrases)
        for name in self.names:
            phrases.setdefault(name, default_phrase(name))
        object.__setattr__(self, "phrases", phrases)
        object.__setattr__(self, "maskable", frozenset(self.maskable))
        object.__setattr__(self, "names", tuple(self.names))

    def _check_pairs(self) -> None:
        stems: dict[str, set[str]] = {}
        for name in self.names:
            side = self.side(name)
            if side in ("left", "right"):
                stems.setdefault(pair_stem(name), set()).add(side)
        for stem, sides in stems.items():
            if sides != {"left", "right"}:
                raise ValueError(f"lateral component group '{stem}' is missing its mirror")

    @property
    def K(self) -> int:
        return len(self.names)

    @property
    def background_id(self) -> int:
        return len(self.names)

    def side(self, name: str) -> str:
        return self.laterality.get(name, "central")

    def index_of(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise KeyError(f"unknown component: {name!r}") from None

    def phrase(self, name: str) -> str:
        if name not in self.phrases:
            raise KeyError(f"no prompt phrase for component {name!r}")
        return self.phrases[name]

    def maskable_indices(self) -> tuple[int, ...]:
        return tuple(i for i, n in enumerate(self.names) if n in self.maskable)


def pair_stem(name: str) -> str:
    """Shared stem of a left/right pair: 'l_eye' and 'r_eye' -> 'eye'."""
    for prefix in ("l_", "r_", "left_", "right_"):
        if name.startswith(prefix):
            return name[len(prefix):]
    return name


def default_phrase(name: str) -> str:
    words = name.split("_")
    if words[0] == "l":
        words[0] = "left"
    elif words[0] == "r":
        words[0] = "right"
    return " ".join(words)


@dataclass(frozen=True)
class LabeledFace:
    """An image with its image-level multi-hot component label."""

    pixels: np.ndarray  # H x W x C, float32 in [0, 1]
    label: np.ndarray  # length K, values in {0, 1}
    id: str

    def __post_init__(self) -> None:
        px = np.asarray(self.pixels)
        if px.ndim != 3:
            raise ValueError(f"pixels must be H x W x C, got shape {px.shape}")
        if px.shape[0] != px.shape[1]:
            raise ValueError(f"expected a square image, got {px.shape[0]}x{px.shape[1]}")
        if px.dtype not in (np.float32, np.float64):
            px = px.astype(np.float32)
        lo, hi = float(px.min(initial=0.0)), float(px.max(initial=0.0))
        if lo < 0.0 or hi > 1.0:
            raise ValueError(f"pixel values outside [0, 1]: min={lo}, max={hi}")
        lab = np.asarray(self.label)
        if lab.ndim != 1:
            raise ValueError("label must be a flat multi-hot vector")
        if not np.isin(lab, (0, 1)).all():
            raise ValueError("label entries must be 0 or 1")
        object.__setattr__(self, "pixels", _frozen_array(px))
        object.__setattr__(self, "label", _frozen_array(lab.astype(np.uint8)))

    @property
    def size(self) -> int:
        return self.pixels.shape[0]

    def present(self) -> tuple[int, ...]:
        return tuple(int(k) for k in np.flatnonzero(self.label))


@dataclass(frozen=True)
class SegMask:
    """Dense H x W map over component indices; ``num_components`` codes background."""

    labels: np.ndarray
    num_components: int

    def __post_init__(self) -> None:
        lab = np.asarray(self.labels)
        if lab.ndim != 2:
            raise ValueError("mask must be 2-D")
        if lab.size and (lab.min() < 0 or lab.max() > self.num_components):
            raise ValueError(
                f"mask values must lie in [0, {self.num_components}], "
                f"got [{lab.min()}, {lab.max()}]"
            )
        object.__setattr__(self, "labels", _frozen_array(lab.astype(np.int64)))

    @property
    def background_id(self) -> int:
        return self.num_components

    @property
    def shape(self) -> tuple[int, int]:
        return self.labels.shape  # type: ignore[return-value]

    def multi_hot(self) -> np.ndarray:
        """y_k = 1 iff component k occupies at least one pixel."""
        y = np.zeros(self.num_components, dtype=np.uint8)
        present = np.unique(self.labels)
        present = present[present < self.num_components]
        y[present] = 1
        return y

    def bounding_box(self, k: int) -> tuple[int, int, int, int] | None:
        """Half-open pixel box [h1, w1, h2, w2) of component k, or None if absent."""
        rows, cols = np.nonzero(self.labels == k)
        if rows.size == 0:
            return None
        return int(rows.min()), int(cols.min()), int(rows.max()) + 1, int(cols.max()) + 1


def synthetic_face_schema() -> ComponentSchema:
    """Seven-part schema used by the procedural corpus."""
    return ComponentSchema(
        names=("skin", "nose", "mouth", "l_eye", "r_eye", "l_brow", "r_brow"),
        laterality={
            "l_eye": "left",
            "r_eye": "right",
            "l_brow": "left",
            "r_brow": "right",
        },
        maskable=frozenset({"nose", "mouth", "l_eye", "r_eye", "l_brow", "r_brow"}),
        phrases={"l_brow": "left eyebrow", "r_brow": "right eyebrow"},
    )


def celebamask_hq_schema() -> ComponentSchema:
    """CelebAMask-HQ's 18 foreground classes, in the dataset's index order.

    In the dataset's own files index 0 is background and components start at 1;
    loaders shift by one so that component indices here are 0-based and
    background is ``K``.  Note 'l_lip' is the lower lip, 'ear_r' an earring and
    'neck_l' a necklace, none of which are lateral.
    """
    return ComponentSchema(
        names=(
            "skin", "nose", "eye_g", "l_eye", "r_eye", "l_brow", "r_brow",
            "l_ear", "r_ear", "mouth", "u_lip", "l_lip", "hair", "hat",
            "ear_r", "neck_l", "neck", "cloth",
        ),
        laterality={
            "l_eye": "left",
            "r_eye": "right",
            "l_brow": "left",
            "r_brow": "right",
            "l_ear": "left",
            "r_ear": "right",
        },
        maskable=frozenset(
            {"nose", "l_eye", "r_eye", "l_brow", "r_brow", "l_ear", "r_ear", "mouth"}
        ),
        phrases={
            "eye_g": "eyeglasses",
            "l_brow": "left eyebrow",
            "r_brow": "right eyebrow",
            "u_lip": "upper lip",
            "l_lip": "lower lip",
            "ear_r": "earring",
            "neck_l": "necklace",
            "cloth": "clothing",
        },
    )


def lapa_schema() -> ComponentSchema:
    """LaPa's 10 foreground classes, in the dataset's index order."""
    return ComponentSchema(
        names=(
            "skin", "l_brow", "r_brow", "l_eye", "r_eye", "nose",
            "u_lip", "i_mouth", "l_lip", "hair",
        ),
        laterality={
            "l_eye": "left",
            "r_eye": "right",
            "l_brow": "left",
            "r_brow": "right",
        },
        maskable=frozenset({"nose", "l_eye", "r_eye", "l_brow", "r_brow", "i_mouth"}),
        phrases={
            "l_brow": "left eyebrow",
            "r_brow": "right eyebrow",
            "u_lip": "upper lip",
            "i_mouth": "inner mouth",
            "l_lip": "lower lip",
        },
    )


BUILTIN_SCHEMAS = {
    "synthetic": synthetic_face_schema,
    "celebamask_hq": celebamask_hq_schema,
    "lapa": lapa_schema,
}


def get_schema(name: str) -> ComponentSchema:
    try:
        return BUILTIN_SCHEMAS[name]()
    except KeyError:
        raise KeyError(
            f"unknown schema {name!r}; available: {sorted(BUILTIN_SCHEMAS)}"
        ) from None
