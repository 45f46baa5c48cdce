"""Component activation maps and pseudo segmentation masks.

A component's activation map fuses two trained signals: the attention its
class token pays to each patch (averaged over the last two backbone
layers) and the patch-attention channel for that class.  The fused map is
min-max normalized per present class, upsampled to pixel resolution with
nearest-neighbor, and thresholded into a pseudo mask: a pixel takes the
highest-scoring present class at or above the threshold, lowest index on
ties, background when no class clears it.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
from PIL import Image

from .errors import DataError
from .models import ModelSet, face_to_tensor
from .schema import LabeledFace, SegMask

FusionFn = Callable[[torch.Tensor, torch.Tensor], torch.Tensor]


@dataclass(frozen=True)
class FCAMStack:
    """Per-class activation maps in [0, 1]; absent classes are all-zero."""

    maps: np.ndarray  # (K, H, W) float32
    present: np.ndarray  # (K,) uint8

    def __post_init__(self) -> None:
        if self.maps.ndim != 3:
            raise ValueError(f"maps must be (K, H, W), got {self.maps.shape}")
        if self.present.shape != (self.maps.shape[0],):
            raise ValueError("present vector does not match map count")
        if self.maps.min() < 0.0 or self.maps.max() > 1.0:
            raise ValueError("activation maps must lie in [0, 1]")
        for k in range(self.maps.shape[0]):
            if not self.present[k] and self.maps[k].any():
                raise ValueError(f"absent class {k} has nonzero activations")


def attention_times_p(attn: torch.Tensor, P: torch.Tensor) -> torch.Tensor:
    """Default fusion: element-wise product at patch resolution."""
    return attn * P


def minmax_norm(channel: np.ndarray) -> np.ndarray:
    """Scale to [0, 1]; a constant channel collapses to all-zero."""
    lo = float(channel.min())
    hi = float(channel.max())
    if hi - lo <= 0.0:
        return np.zeros_like(channel)
    return (channel - lo) / (hi - lo)


def extract_fcam(
    face: LabeledFace,
    y: np.ndarray,
    models: ModelSet,
    out_size: int | None = None,
    fusion: FusionFn = attention_times_p,
) -> FCAMStack:
    """Activation maps for one image under its image-level label ``y``."""
    models.eval()
    dtype = next(models.backbone.parameters()).dtype
    H = W = face.pixels.shape[0] if out_size is None else out_size
    with torch.no_grad():
        x = face_to_tensor(face, dtype).unsqueeze(0)
        bundle = models.backbone(x)
        P = models.patch_head(bundle.F_pat, bundle.patch_grid)[0]  # (K, g, g)
        layers = bundle.cls2pat[-2:] if len(bundle.cls2pat) >= 2 else bundle.cls2pat
        attn = torch.stack([a[0] for a in layers]).mean(dim=0)  # (K, N)
        rows, cols = bundle.patch_grid
        attn = attn.reshape(-1, rows, cols)
        fused = fusion(attn, P)  # (K, g, g)
        up = torch.nn.functional.interpolate(
            fused.unsqueeze(0), size=(H, W), mode="nearest"
        )[0]
    maps = up.to(torch.float32).cpu().numpy()
    K = maps.shape[0]
    out = np.zeros((K, H, W), dtype=np.float32)
    for k in range(K):
        if y[k]:
            out[k] = minmax_norm(maps[k])
    out.setflags(write=False)
    return FCAMStack(out, np.asarray(y, dtype=np.uint8))


def pseudo_mask(stack: FCAMStack, theta: float) -> SegMask:
    """Threshold-and-argmax over present classes; empty pixels go background."""
    if not 0.0 < theta < 1.0:
        raise ValueError(f"theta must be in (0, 1), got {theta}")
    K, H, W = stack.maps.shape
    eligible = stack.maps >= theta  # (K, H, W)
    eligible &= stack.present.astype(bool)[:, None, None]
    scores = np.where(eligible, stack.maps, -1.0)
    best = scores.argmax(axis=0)  # argmax returns the lowest index on ties
    labels = np.where(eligible.any(axis=0), best, K).astype(np.int64)
    return SegMask(labels, K)


def save_pseudo_mask(path: str | Path, mask: SegMask) -> None:
    """Single-channel indexed file: pixel value = class index, background = K."""
    if mask.num_components > 255:
        raise DataError("pseudo-mask files support at most 255 components")
    Image.fromarray(mask.labels.astype(np.uint8), mode="L").save(path, format="PNG")


def load_pseudo_mask(path: str | Path, num_components: int) -> SegMask:
    with Image.open(path) as im:
        labels = np.asarray(im.convert("L"), dtype=np.int64)
    return SegMask(labels, num_components)


def write_pseudo_labels(
    dataset: Sequence[tuple[LabeledFace, np.ndarray]],
    models: ModelSet,
    theta: float,
    out_dir: str | Path,
    out_size: int | None = None,
) -> tuple[list[tuple[str, str]], list[tuple[str, str]]]:
    """Write one indexed pseudo mask per sample.

    ``dataset`` pairs each face with the image-level label to condition on.
    Returns (manifest, errors); the manifest lists (id, relative path)
    sorted by sample id and is also written to ``pseudo_manifest.txt``.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest: list[tuple[str, str]] = []
    errors: list[tuple[str, str]] = []
    for face, y in dataset:
        rel = f"{face.id}.png"
        try:
            stack = extract_fcam(face, y, models, out_size=out_size)
            save_pseudo_mask(out_dir / rel, pseudo_mask(stack, theta))
        except OSError as exc:
            errors.append((face.id, str(exc)))
            continue
        manifest.append((face.id, rel))
    manifest.sort()
    lines = "".join(f"{sid}\t{rel}\n" for sid, rel in manifest)
    (out_dir / "pseudo_manifest.txt").write_text(lines)
    return manifest, errors


def read_pseudo_manifest(out_dir: str | Path) -> list[tuple[str, str]]:
    path = Path(out_dir) / "pseudo_manifest.txt"
    if not path.is_file():
        raise DataError(f"pseudo-label manifest not found: {path}")
    out = []
    for line in path.read_text().splitlines():
        if not line.strip():
            continue
        sid, rel = line.split("\t")
        out.append((sid, rel))
    return out
