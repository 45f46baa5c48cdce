"""Dataset ingestion for CelebAMask-HQ-style folders and corpus writing.

Directory layout::

    root/
      images/<id>.png            (or .jpg)
      masks/<id>.png             combined indexed mask, 0 = background,
                                 v >= 1 = schema component v-1
      masks/<id>_<component>.png per-component binary masks (0/255),
                                 used when no combined mask exists
      <split>.txt                one sample id per line

Image-level labels are derived from the mask: a component is labeled
present iff it occupies at least one pixel after resizing.  Samples whose
mask is entirely background are excluded from the returned set and counted
in the load report.
"""

from __future__ import annotations

import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence, TypeVar

import numpy as np
from PIL import Image

from .errors import DataError
from .schema import ComponentSchema, LabeledFace, SegMask

T = TypeVar("T")


@dataclass(frozen=True)
class SampleEntry:
    id: str
    image: Path
    combined_mask: Path | None = None
    component_masks: tuple[tuple[str, Path], ...] = ()


@dataclass(frozen=True)
class DatasetManifest:
    root: Path
    split: str
    schema: ComponentSchema
    samples: tuple[SampleEntry, ...]


@dataclass
class LoadReport:
    """Aggregated outcome of a load pass; safe to update from worker threads."""

    n_requested: int = 0
    n_loaded: int = 0
    n_excluded_empty: int = 0
    errors: list[tuple[str, str]] = field(default_factory=list)
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False, compare=False)

    def record_error(self, sample_id: str, message: str) -> None:
        with self._lock:
            self.errors.append((sample_id, message))

    def record_empty(self, sample_id: str) -> None:
        with self._lock:
            self.n_excluded_empty += 1

    def record_loaded(self) -> None:
        with self._lock:
            self.n_loaded += 1

    def summary(self) -> str:
        return (
            f"requested={self.n_requested} loaded={self.n_loaded} "
            f"excluded_empty={self.n_excluded_empty} errors={len(self.errors)}"
        )


def discover_manifest(root: str | Path, split: str, schema: ComponentSchema) -> DatasetManifest:
    """Build a manifest from a split file, resolving mask layout per sample."""
    root = Path(root)
    split_file = root / f"{split}.txt"
    if not split_file.is_file():
        raise DataError(f"split file not found: {split_file}")
    ids = [line.strip() for line in split_file.read_text().splitlines() if line.strip()]
    if not ids:
        raise DataError(f"split {split!r} is empty: {split_file}")
    images_dir = root / "images"
    masks_dir = root / "masks"
    entries = []
    for sid in ids:
        image = None
        for ext in (".png", ".jpg", ".jpeg"):
            cand = images_dir / f"{sid}{ext}"
            if cand.is_file():
                image = cand
                break
        if image is None:
            raise DataError(f"no image found for sample {sid!r} under {images_dir}")
        combined = masks_dir / f"{sid}.png"
        if combined.is_file():
            entries.append(SampleEntry(sid, image, combined_mask=combined))
            continue
        parts = []
        for name in schema.names:
            cand = masks_dir / f"{sid}_{name}.png"
            if cand.is_file():
                parts.append((name, cand))
        if not parts:
            raise DataError(f"no mask files found for sample {sid!r} under {masks_dir}")
        entries.append(SampleEntry(sid, image, component_masks=tuple(parts)))
    return DatasetManifest(root, split, schema, tuple(entries))


def load_image(path: str | Path, size: int | None = None) -> np.ndarray:
    with Image.open(path) as im:
        im = im.convert("RGB")
        if size is not None and im.size != (size, size):
            im = im.resize((size, size), Image.BILINEAR)
        return np.asarray(im, dtype=np.float32) / 255.0


def load_mask_indexed(path: str | Path, size: int | None = None) -> np.ndarray:
    """Raw file values as int64; resizing is nearest-neighbor to keep labels intact."""
    with Image.open(path) as im:
        im = im.convert("L")
        if size is not None and im.size != (size, size):
            im = im.resize((size, size), Image.NEAREST)
        return np.asarray(im, dtype=np.int64)


def save_image(path: str | Path, pixels: np.ndarray) -> None:
    arr = np.clip(np.asarray(pixels, dtype=np.float64) * 255.0 + 0.5, 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path, format="PNG")


def save_mask_indexed(path: str | Path, mask: SegMask) -> None:
    """File convention: 0 = background, component k stored as k+1."""
    if mask.num_components > 254:
        raise DataError("indexed mask files support at most 254 components")
    file_vals = np.where(
        mask.labels == mask.num_components, 0, mask.labels + 1
    ).astype(np.uint8)
    Image.fromarray(file_vals, mode="L").save(path, format="PNG")


def save_component_mask(path: str | Path, binary: np.ndarray) -> None:
    Image.fromarray(np.where(binary, 255, 0).astype(np.uint8), mode="L").save(path, format="PNG")


def compose_component_masks(
    parts: Sequence[tuple[str, np.ndarray]], schema: ComponentSchema
) -> np.ndarray:
    """Merge binary masks into an index map; schema order wins at overlaps
    (later-listed components overwrite earlier ones)."""
    if not parts:
        raise DataError("no component masks to compose")
    shape = parts[0][1].shape
    labels = np.full(shape, schema.background_id, dtype=np.int64)
    by_name = dict(parts)
    for i, name in enumerate(schema.names):
        if name not in by_name:
            continue
        binary = by_name[name]
        if binary.shape != shape:
            raise DataError(f"component mask {name!r} has shape {binary.shape}, expected {shape}")
        labels[binary > 0] = i
    return labels


def _load_entry(
    entry: SampleEntry, schema: ComponentSchema, size: int | None
) -> tuple[LabeledFace, SegMask] | None:
    pixels = load_image(entry.image, size)
    if entry.combined_mask is not None:
        file_vals = load_mask_indexed(entry.combined_mask, size)
        if file_vals.max(initial=0) > schema.K:
            raise DataError(
                f"mask value {int(file_vals.max())} exceeds component count {schema.K}"
            )
        labels = np.where(file_vals == 0, schema.K, file_vals - 1)
    else:
        parts = [
            (name, load_mask_indexed(path, size) > 127) for name, path in entry.component_masks
        ]
        labels = compose_component_masks(parts, schema)
    mask = SegMask(labels, schema.K)
    label = mask.multi_hot()
    if not label.any():
        return None
    face = LabeledFace(pixels, label, id=entry.id)
    return face, mask


def load_dataset(
    manifest: DatasetManifest,
    input_size: int | None = None,
    workers: int = 1,
) -> tuple[list[tuple[LabeledFace, SegMask]], LoadReport]:
    """Load every manifest entry; per-sample failures land in the report
    instead of aborting the pass."""
    if not manifest.samples:
        raise DataError(f"manifest for split {manifest.split!r} lists no samples")
    report = LoadReport(n_requested=len(manifest.samples))

    def worker(entry: SampleEntry) -> tuple[str, tuple[LabeledFace, SegMask] | None]:
        try:
            loaded = _load_entry(entry, manifest.schema, input_size)
        except Exception as exc:  # noqa: BLE001 - collected per sample
            report.record_error(entry.id, str(exc))
            return entry.id, None
        if loaded is None:
            report.record_empty(entry.id)
            return entry.id, None
        report.record_loaded()
        return entry.id, loaded

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(worker, manifest.samples))
    else:
        results = [worker(e) for e in manifest.samples]
    return [loaded for _, loaded in results if loaded is not None], report


def save_labels(path: str | Path, faces: Sequence[LabeledFace]) -> None:
    """Image-level labels as id<TAB>bitstring, one sample per line.

    Written after masking so cleared labels survive a round trip through
    disk (they are no longer derivable from the ground-truth masks).
    """
    lines = "".join(f"{f.id}\t{''.join(str(int(b)) for b in f.label)}\n" for f in faces)
    Path(path).write_text(lines)


def load_labels(path: str | Path, num_components: int) -> dict[str, np.ndarray]:
    out: dict[str, np.ndarray] = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        if not line.strip():
            continue
        try:
            sid, bits = line.split("\t")
        except ValueError:
            raise DataError(f"{path}:{lineno}: expected id<TAB>bits") from None
        if len(bits) != num_components or set(bits) - {"0", "1"}:
            raise DataError(f"{path}:{lineno}: bad label bitstring {bits!r}")
        out[sid] = np.array([int(b) for b in bits], dtype=np.uint8)
    return out


def apply_label_overrides(
    faces: Sequence[LabeledFace], overrides: dict[str, np.ndarray]
) -> list[LabeledFace]:
    out = []
    for f in faces:
        if f.id in overrides:
            out.append(LabeledFace(f.pixels, overrides[f.id], id=f.id))
        else:
            out.append(f)
    return out


def split_subset(samples: Sequence[T], k: int, rng: np.random.Generator) -> list[T]:
    """Uniform sample of k items without replacement; k = len gives a permutation."""
    if k > len(samples):
        raise ValueError(f"cannot draw {k} items from {len(samples)}")
    order = rng.permutation(len(samples))[:k]
    return [samples[int(i)] for i in order]


def write_corpus(
    root: str | Path,
    samples: Sequence[tuple[LabeledFace, SegMask]],
    schema: ComponentSchema,
    split: str = "train",
) -> DatasetManifest:
    """Persist samples in the standard layout and return a loadable manifest."""
    root = Path(root)
    images_dir = root / "images"
    masks_dir = root / "masks"
    images_dir.mkdir(parents=True, exist_ok=True)
    masks_dir.mkdir(parents=True, exist_ok=True)
    ids = []
    for face, mask in samples:
        save_image(images_dir / f"{face.id}.png", face.pixels)
        save_mask_indexed(masks_dir / f"{face.id}.png", mask)
        ids.append(face.id)
    if len(set(ids)) != len(ids):
        raise DataError("duplicate sample ids in corpus")
    (root / f"{split}.txt").write_text("".join(f"{sid}\n" for sid in ids))
    entries = tuple(
        SampleEntry(sid, images_dir / f"{sid}.png", combined_mask=masks_dir / f"{sid}.png")
        for sid in ids
    )
    return DatasetManifest(root, split, schema, entries)
