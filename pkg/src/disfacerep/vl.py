"""Frozen vision-language encoder pair and the region/prompt encoders.

The pipeline never trains these: image and text encoders are fixed maps
into a shared embedding space, and gradients flow *through* the image
encoder into the trainable attention maps without touching its weights.
Reference stubs keep everything deterministic and desk-scale:

* ``AvgPoolImageEncoder`` — global average pool then a fixed linear map;
  simple enough to hand-compute in oracle tests.
* ``GridPoolImageEncoder`` — average pool over a coarse spatial grid then a
  fixed linear map; the default, because it can distinguish mirrored
  components that only differ by position.
* ``OrthogonalTextEncoder`` — assigns each distinct prompt the next basis
  vector (exact pairwise orthogonality).
* ``PrototypeTextEncoder`` — renders a canonical image of the component
  named in the prompt and encodes it with the image encoder, so text and
  image embeddings share geometry.

Adapters for real pretrained encoders implement the same two-method
surface (``encode_image``/``encode_text``) plus a width handshake.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Protocol

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .rng import torch_generator
from .schema import ComponentSchema, pair_stem

PROMPT_TEMPLATE = "a photo of a face with {component}"


def component_prompt(schema: ComponentSchema, name: str) -> str:
    return PROMPT_TEMPLATE.format(component=schema.phrase(name))


class ImageEncoder(Protocol):
    def encode_image(self, images: Tensor) -> Tensor:
        """(B, 3, S, S) -> (B, e)"""
        ...


class TextEncoder(Protocol):
    def encode_text(self, prompt: str) -> Tensor:
        """prompt -> (e,)"""
        ...


def _as_pixel_mean(pixel_mean, dtype: torch.dtype) -> Tensor:
    """Validated (3,) input-normalization constant; zeros when unset."""
    if pixel_mean is None:
        return torch.zeros(3, dtype=dtype)
    mean = torch.as_tensor(np.asarray(pixel_mean, dtype=np.float32), dtype=dtype).reshape(-1)
    if mean.numel() != 3:
        raise ValueError(f"pixel_mean must have 3 entries, got {mean.numel()}")
    return mean


class AvgPoolImageEncoder(nn.Module):
    """Global average pool per channel, then a fixed linear map to width e.

    ``pixel_mean`` is subtracted from every pixel first — the stub analog
    of the input normalization every pretrained image tower applies.
    """

    def __init__(
        self,
        out_dim: int,
        seed: int = 0,
        pixel_mean=None,
        dtype: torch.dtype = torch.float32,
    ) -> None:
        super().__init__()
        gen = torch_generator(seed)
        w = torch.randn(3, out_dim, generator=gen, dtype=torch.float32) / np.sqrt(3.0)
        self.register_buffer("weight", w.to(dtype))
        self.register_buffer("pixel_mean", _as_pixel_mean(pixel_mean, dtype))

    def encode_image(self, images: Tensor) -> Tensor:
        shifted = images - self.pixel_mean.view(1, 3, 1, 1)
        pooled = shifted.mean(dim=(2, 3))  # (B, 3)
        return pooled.to(self.weight.dtype) @ self.weight

    forward = encode_image


class GridPoolImageEncoder(nn.Module):
    """Average pool over a grid_size x grid_size spatial grid, concatenate
    per-cell channel means, then a fixed linear map to width e.

    ``pixel_mean`` is subtracted from every pixel first — the stub analog
    of the input normalization every pretrained image tower applies.
    """

    def __init__(
        self,
        out_dim: int,
        grid_size: int = 4,
        seed: int = 0,
        pixel_mean=None,
        dtype: torch.dtype = torch.float32,
    ) -> None:
        super().__init__()
        self.grid_size = grid_size
        gen = torch_generator(seed)
        in_dim = 3 * grid_size * grid_size
        w = torch.randn(in_dim, out_dim, generator=gen, dtype=torch.float32) / np.sqrt(in_dim)
        self.register_buffer("weight", w.to(dtype))
        self.register_buffer("pixel_mean", _as_pixel_mean(pixel_mean, dtype))

    def encode_image(self, images: Tensor) -> Tensor:
        if images.shape[-1] % self.grid_size or images.shape[-2] % self.grid_size:
            raise ValueError(
                f"image size {tuple(images.shape[-2:])} not divisible by grid {self.grid_size}"
            )
        shifted = images - self.pixel_mean.view(1, 3, 1, 1)
        pooled = F.adaptive_avg_pool2d(shifted, self.grid_size)  # (B, 3, g, g)
        flat = pooled.flatten(1).to(self.weight.dtype)
        return flat @ self.weight

    forward = encode_image


class OrthogonalTextEncoder:
    """Each distinct prompt gets the next canonical basis vector."""

    def __init__(self, out_dim: int, dtype: torch.dtype = torch.float32) -> None:
        self.out_dim = out_dim
        self.dtype = dtype
        self._assigned: dict[str, int] = {}

    def encode_text(self, prompt: str) -> Tensor:
        if prompt not in self._assigned:
            if len(self._assigned) >= self.out_dim:
                raise ValueError(f"more than {self.out_dim} distinct prompts requested")
            self._assigned[prompt] = len(self._assigned)
        v = torch.zeros(self.out_dim, dtype=self.dtype)
        v[self._assigned[prompt]] = 1.0
        return v


class PrototypeTextEncoder:
    """Encodes a prompt by rendering the named component at its prior
    position and passing that through the image encoder.

    The render is drawn on a canvas filled with the image encoder's
    ``pixel_mean``, so after the encoder's input normalization the prompt
    embedding carries exactly the component's own (mean-relative) color at
    its prior location and nothing anywhere else.  This gives text
    embeddings that point at the spatial/color statistics of the component,
    which is what makes the region-text alignment losses informative on
    the reference stubs.

    ``pair_blend`` mixes each left/right prompt with its mirror.  Phrases
    that differ only in a left/right word land nearly parallel in a
    sentence-level embedding space, which is exactly why prompt
    supervision alone under-determines laterality; the blend reproduces
    that, leaving side identity to the detector-masking and
    region-pooling paths.
    """

    def __init__(
        self,
        schema: ComponentSchema,
        shapes: Mapping[str, object],  # name -> ShapeSpec-like (center, radii, color)
        image_encoder: ImageEncoder,
        canvas: int,
        pair_blend: float = 0.15,
        dtype: torch.dtype = torch.float32,
    ) -> None:
        if not 0.0 <= pair_blend < 0.5:
            raise ValueError(f"pair_blend must be in [0, 0.5), got {pair_blend}")
        self.schema = schema
        self.shapes = shapes
        self.image_encoder = image_encoder
        self.canvas = canvas
        self.pair_blend = pair_blend
        self.dtype = dtype
        self._phrase_to_name = {schema.phrase(n): n for n in schema.names}
        self._fallback = OrthogonalTextEncoder(self._width(), dtype=dtype)

    def _width(self) -> int:
        probe = torch.zeros(1, 3, self.canvas, self.canvas, dtype=self.dtype)
        return int(self.image_encoder.encode_image(probe).shape[-1])

    def _canvas_fill(self) -> np.ndarray:
        mean = getattr(self.image_encoder, "pixel_mean", None)
        if mean is None:
            return np.zeros(3, dtype=np.float32)
        return np.asarray(torch.as_tensor(mean).detach().cpu(), dtype=np.float32)

    def _inside(self, shape, size: int) -> np.ndarray:
        ys, xs = np.mgrid[0:size, 0:size]
        cy, cx = shape.center[0] * size, shape.center[1] * size
        ry = max(shape.radii[0] * size, 1.0)
        rx = max(shape.radii[1] * size, 1.0)
        return ((ys + 0.5 - cy) / ry) ** 2 + ((xs + 0.5 - cx) / rx) ** 2 <= 1.0

    def _render_prototype(self, name: str) -> Tensor:
        shape = self.shapes[name]
        s = self.canvas
        img = np.empty((s, s, 3), dtype=np.float32)
        img[:] = self._canvas_fill()
        inside = self._inside(shape, s)
        img[inside] = np.asarray(shape.color, dtype=np.float32)
        # A component's prompt stands for that component alone.  Where
        # another component's prior sits wholly inside this one (inner
        # parts on the skin region), those pixels belong to the inner
        # class, never to this one, so they are cut back to the canvas
        # fill.  Without the cut-out, the enclosing class's prompt
        # correlates with every inner component's region embedding, and
        # the push-apart region losses can only lower that correlation by
        # eroding the inner component's own activation map.
        own_area = shape.radii[0] * shape.radii[1]
        for other_name, other in self.shapes.items():
            if other_name == name or other.radii[0] * other.radii[1] >= own_area:
                continue
            ocy = int(other.center[0] * s)
            ocx = int(other.center[1] * s)
            if inside[min(ocy, s - 1), min(ocx, s - 1)]:
                img[self._inside(other, s)] = self._canvas_fill()
        return torch.from_numpy(img).permute(2, 0, 1).unsqueeze(0).to(self.dtype)

    def _mirror(self, name: str) -> str | None:
        side = self.schema.side(name)
        if side not in ("left", "right"):
            return None
        stem = pair_stem(name)
        for other in self.schema.names:
            if other != name and pair_stem(other) == stem and other in self.shapes:
                if self.schema.side(other) in ("left", "right"):
                    return other
        return None

    def _embed(self, name: str) -> Tensor:
        with torch.no_grad():
            return self.image_encoder.encode_image(self._render_prototype(name))[0]

    def encode_text(self, prompt: str) -> Tensor:
        matched = None
        for phrase, name in self._phrase_to_name.items():
            if phrase in prompt and (matched is None or len(phrase) > len(self.schema.phrase(matched))):
                matched = name
        if matched is None or matched not in self.shapes:
            return self._fallback.encode_text(prompt)
        emb = self._embed(matched)
        mirror = self._mirror(matched) if self.pair_blend > 0.0 else None
        if mirror is not None:
            emb = (1.0 - self.pair_blend) * emb + self.pair_blend * self._embed(mirror)
        return emb


@dataclass
class VLEncoderPair:
    image_encoder: ImageEncoder
    text_encoder: TextEncoder
    frozen: bool = True
    _prompt_cache: dict[tuple[str, ...], Tensor] = field(default_factory=dict, repr=False)

    def __post_init__(self) -> None:
        if self.frozen and isinstance(self.image_encoder, nn.Module):
            for p in self.image_encoder.parameters():
                p.requires_grad_(False)

    def parameter_snapshot(self) -> list[Tensor]:
        if isinstance(self.image_encoder, nn.Module):
            state = list(self.image_encoder.parameters()) + list(self.image_encoder.buffers())
            return [t.detach().clone() for t in state]
        return []


def encode_components(images: Tensor, P: Tensor, vl: VLEncoderPair) -> tuple[Tensor, Tensor]:
    """Foreground/background region embeddings per class.

    ``P`` is (B, K, rows, cols) at patch resolution; it is upsampled to the
    image resolution with nearest-neighbor (preserving its open-interval
    range), multiplied into the pixels, and encoded.  Suppressed pixels are
    blended toward the encoder's mean pixel value rather than black — the
    usual convention when feeding masked crops to a pretrained tower, so
    that after input normalization the suppressed area reads as "nothing"
    instead of as a large dark region whose direction swamps the content.
    """
    if images.ndim != 4 or P.ndim != 4:
        raise ValueError(f"expected 4-D images and P, got {images.ndim}-D / {P.ndim}-D")
    B, K = P.shape[:2]
    S = images.shape[-1]
    P_up = F.interpolate(P, size=(S, S), mode="nearest")  # (B, K, S, S)
    fill = getattr(vl.image_encoder, "pixel_mean", None)
    fill = torch.zeros(3, dtype=images.dtype) if fill is None else torch.as_tensor(fill)
    fill = fill.to(images.dtype).view(1, 3, 1, 1)
    ffc, bfc = [], []
    for k in range(K):
        weight = P_up[:, k : k + 1]  # (B, 1, S, S) broadcasting over channels
        try:
            ffc.append(vl.image_encoder.encode_image(images * weight + fill * (1.0 - weight)))
            bfc.append(vl.image_encoder.encode_image(images * (1.0 - weight) + fill * weight))
        except Exception as exc:
            raise RuntimeError(f"image encoder failed on component {k}: {exc}") from exc
    return torch.stack(ffc, dim=1), torch.stack(bfc, dim=1)  # (B, K, e)


def encode_prompts(schema: ComponentSchema, vl: VLEncoderPair) -> Tensor:
    """(K, e) text embeddings, computed once per schema and cached."""
    key = schema.names
    cached = vl._prompt_cache.get(key)
    if cached is not None:
        return cached
    vecs = []
    for name in schema.names:
        phrase = schema.phrases.get(name)
        if not phrase:
            raise KeyError(f"component {name!r} has no prompt phrase")
        vecs.append(vl.text_encoder.encode_text(component_prompt(schema, name)))
    out = torch.stack(vecs).detach()
    vl._prompt_cache[key] = out
    return out
