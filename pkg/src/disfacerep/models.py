"""Reference networks: a tiny multi-class-token transformer backbone, the
class-token projector, and the 1x1-conv patch-attention head.

These are deliberately small (two attention blocks, configurable width) so
exact finite-difference gradient checks stay cheap, while keeping the
structural properties the pipeline relies on: one class token per
component, exposed class-to-patch attention per layer, and patch tokens
that are permutation equivariant when positional embeddings are disabled.

Design notes on the backbone:

* Blocks are attention-only and bias-free, and every query attends to
  patch keys exclusively.  Class rows therefore never exchange
  information with each other; the only way a class token's output can
  vary is through what it reads from the image.  This matters for
  weakly-supervised training: with biases or class-to-class attention, a
  trainable image-independent path exists that satisfies the alignment
  losses without ever localizing anything.
* ``prototype_colors`` optionally conditions the initialization so that
  each class token starts out attending to patches of its component's
  typical color.  This stands in for the pretrained vision backbone the
  full-scale system starts from, whose attention is already
  content-selective before any fine-tuning.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .config import PipelineConfig
from .rng import torch_generator
from .schema import ComponentSchema, LabeledFace

# Conditioned-initialization magnitudes (see MultiClassTokenBackbone._condition):
# how far positional table entries sit above the generic 0.02 init, the
# amplitudes of the two coarse location channels carried in embedding dims
# 3 (signed midline distance) and 4 (vertical band), and how strongly class
# tokens assert their component's prior location in those channels.  The
# location channels are linear in position, so a token's location preference
# is monotone toward an image edge, not peaked at the prior; CLS_LOC_SCALE
# keeps that pull at tie-break strength, well under the color match, or
# attention overshoots its component toward the border.
POSITION_BOOST = 15.0
SIDE_SCALE = 0.25
VERT_SCALE = 0.5
CLS_LOC_SCALE = 0.3


def _mask_side_read_grad(grad: Tensor) -> Tensor:
    """Zero the gradient into the signed-side column of an output projection."""
    g = grad.clone()
    g[:, 3] = 0.0
    return g


@dataclass(frozen=True)
class TokenBundle:
    """Backbone outputs for a batch.

    cls2pat holds, per layer, the head-averaged attention each class token
    pays to each patch token — the raw material for activation maps.
    """

    F_cls: Tensor  # (B, K, d)
    F_pat: Tensor  # (B, N, d)
    patch_grid: tuple[int, int]
    cls2pat: tuple[Tensor, ...]  # per layer, (B, K, N)

    def __post_init__(self) -> None:
        rows, cols = self.patch_grid
        if self.F_pat.shape[-2] != rows * cols:
            raise ValueError(
                f"F_pat has {self.F_pat.shape[-2]} tokens, grid {self.patch_grid} needs {rows * cols}"
            )
        for t in (self.F_cls, self.F_pat):
            if not torch.isfinite(t).all():
                raise ValueError("non-finite token embeddings")


class _Attention(nn.Module):
    """Single attention layer whose keys/values come from patch rows only.

    Queries and keys are computed from the normalized stream (they decide
    *where* to look and may use positional information); values are
    computed from the raw stream (they decide *what* is read back).  The
    separation lets the conditioned variant keep its value path blind to
    position — see ``MultiClassTokenBackbone``.
    """

    def __init__(self, dim: int, heads: int, num_cls: int) -> None:
        super().__init__()
        if dim % heads:
            raise ValueError(f"dim {dim} not divisible by heads {heads}")
        self.heads = heads
        self.num_cls = num_cls
        self.scale = 1.0 / math.sqrt(dim // heads)
        self.q = nn.Linear(dim, dim, bias=False)
        self.k = nn.Linear(dim, dim, bias=False)
        self.v = nn.Linear(dim, dim, bias=False)
        self.proj = nn.Linear(dim, dim, bias=False)

    def forward(self, raw: Tensor, normed: Tensor) -> tuple[Tensor, Tensor]:
        B, T, d = raw.shape
        h, dh = self.heads, d // self.heads
        N = T - self.num_cls
        q = self.q(normed).reshape(B, T, h, dh).transpose(1, 2)  # (B, h, T, dh)
        k = self.k(normed[:, self.num_cls :]).reshape(B, N, h, dh).transpose(1, 2)
        v = self.v(raw[:, self.num_cls :]).reshape(B, N, h, dh).transpose(1, 2)
        attn = torch.softmax(q @ k.transpose(-2, -1) * self.scale, dim=-1)  # (B, h, T, N)
        out = (attn @ v).transpose(1, 2).reshape(B, T, d)
        return self.proj(out), attn.mean(dim=1)  # head-averaged (B, T, N)


class _Block(nn.Module):
    def __init__(self, dim: int, heads: int, num_cls: int) -> None:
        super().__init__()
        self.norm = nn.LayerNorm(dim)
        self.attn = _Attention(dim, heads, num_cls)

    def forward(self, x: Tensor) -> tuple[Tensor, Tensor]:
        a, attn = self.attn(x, self.norm(x))
        return x + a, attn


class MultiClassTokenBackbone(nn.Module):
    """Two-block ViT with K learnable class tokens prepended to the patches."""

    def __init__(
        self,
        num_classes: int,
        input_size: int,
        patch_size: int,
        embed_dim: int,
        depth: int = 2,
        heads: int = 1,
        use_pos_embed: bool = True,
        seed: int = 0,
        prototype_colors: np.ndarray | None = None,
        color_gain: float = 1.0,
        prototype_positions: np.ndarray | None = None,
    ) -> None:
        super().__init__()
        if input_size % patch_size:
            raise ValueError(f"patch size {patch_size} does not divide input size {input_size}")
        if embed_dim < 5:
            raise ValueError("embed_dim must be at least 5")
        self.num_classes = num_classes
        self.grid = input_size // patch_size
        self.patch_embed = nn.Conv2d(
            3, embed_dim, kernel_size=patch_size, stride=patch_size, bias=False
        )
        self.cls_tokens = nn.Parameter(torch.zeros(num_classes, embed_dim))
        self.use_pos_embed = use_pos_embed
        if use_pos_embed:
            self.pos_embed = nn.Parameter(torch.zeros(1, self.grid * self.grid, embed_dim))
        self.blocks = nn.ModuleList(
            _Block(embed_dim, heads, num_classes) for _ in range(depth)
        )
        # Class tokens anchor class identity and never move during stage-1
        # training (see ModelSet.trainable_parameters).
        self._frozen_names = {"cls_tokens"}
        reseed_parameters(self, seed)
        if prototype_colors is not None:
            self._condition(prototype_colors, patch_size, color_gain, prototype_positions)

    def _condition(
        self,
        colors: np.ndarray,
        patch_size: int,
        gain: float,
        positions: np.ndarray | None,
    ) -> None:
        """Start in a color-matched regime, as a pretrained backbone would.

        The first three embedding dimensions are dedicated to mean patch
        color; each class token carries its component's centered
        prototype color there, and the query/key maps start as a scaled
        identity on the color-plus-location subspace, so class k's
        attention initially peaks on patches colored like component k.
        When prior component positions are supplied, each token also
        carries its component's nominal side and height in the two
        location channels, biasing that peak toward the right place —
        which is what tells apart a mirrored pair whose two members are
        visually identical.

        The value path is pinned to a coarse appearance read-out: values
        see the color dimensions plus two coarse location channels — a
        signed distance-from-the-vertical-midline channel and a vertical
        band channel.  What a class token reads back therefore says what
        it attended to and roughly where, but nothing finer.  The
        vertical channel is mirror-invariant, so components that share a
        hue but sit at different heights can always be told apart.  The
        signed side channel is different: on a corpus where mirrored
        components always co-occur, every batch is left/right balanced,
        its expected gradient cancels, and it carries no usable learning
        signal — it only becomes informative once detector masking
        breaks that symmetry.  Fine localization can only enter through
        the explicitly spatial losses (the patch-attention head against
        the region encoder), which is the disentanglement effect the
        pipeline is built to measure.  The appearance code (patchify,
        positional table, value maps) is frozen alongside the class
        tokens to keep that separation during training; queries, keys,
        per-block norms, and output maps train.
        """
        colors = np.asarray(colors, dtype=np.float32)
        if colors.shape != (self.num_classes, 3):
            raise ValueError(
                f"prototype_colors must be ({self.num_classes}, 3), got {colors.shape}"
            )
        if not np.isfinite(colors).all():
            raise ValueError("prototype_colors must be finite")
        if positions is not None:
            positions = np.asarray(positions, dtype=np.float32)
            if positions.shape != (self.num_classes, 2):
                raise ValueError(
                    f"prototype_positions must be ({self.num_classes}, 2), got {positions.shape}"
                )
            if not np.isfinite(positions).all() or positions.min() < 0 or positions.max() > 1:
                raise ValueError("prototype_positions must be (y, x) fractions in [0, 1]")
        with torch.no_grad():
            w = self.patch_embed.weight  # (d, 3, p, p)
            w[:5].zero_()
            for c in range(3):
                w[c, c].fill_(1.0 / (patch_size * patch_size))
            if self.use_pos_embed:
                self.pos_embed[:, :, :5] = 0.0  # appearance dims stay content-free
                # Location must be readable at the same order of magnitude
                # as color, or queries/keys and the patch head would need
                # hundreds of steps just to amplify it out of the 0.02
                # init noise before any spatial binding can happen.
                self.pos_embed[:, :, 5:] *= POSITION_BOOST
                g = self.grid
                coords = torch.arange(g, dtype=torch.float32)
                centered_axis = (coords - (g - 1) / 2.0) / (g / 2.0)  # (-1, 1)
                self.pos_embed[0, :, 3] = SIDE_SCALE * centered_axis.repeat(g)
                self.pos_embed[0, :, 4] = VERT_SCALE * centered_axis.repeat_interleave(g)
            centered = torch.from_numpy(colors - colors.mean(axis=0))
            # Class tokens carry exactly the channels the value path
            # exposes: prototype color plus, when prior positions are
            # given, a unit-scale coarse location (signed side, vertical
            # band).  Nothing else — residual random content would couple
            # to the boosted positional keys and hand each token an
            # *arbitrary* side preference.  The appearance objective is
            # indifferent between mirrored twins, so that coin flip
            # decides which twin a token locks onto, and a token that
            # starts on its mirror can never be rescued by the soft-mask
            # gate.  The deterministic prior breaks the tie the way a
            # pretrained model would: side-named concepts start with a
            # mild pull toward their nominal side, strong enough to seed
            # lateralization, too weak to resolve the pair on its own.
            self.cls_tokens[:, :3] = centered
            self.cls_tokens[:, 3:] = 0.0
            if positions is not None:
                loc = torch.from_numpy(CLS_LOC_SCALE * (2.0 * positions - 1.0))
                self.cls_tokens[:, 3] = loc[:, 1]
                self.cls_tokens[:, 4] = loc[:, 0]
            eye = gain * torch.eye(5)
            for block in self.blocks:
                block.attn.q.weight[:5, :5] = eye
                block.attn.k.weight[:5, :5] = eye
                block.attn.v.weight.zero_()
                block.attn.v.weight[:5, :5] = torch.eye(5)
        self._frozen_names |= {"patch_embed.weight"}
        if self.use_pos_embed:
            self._frozen_names.add("pos_embed")
        for i in range(len(self.blocks)):
            self._frozen_names.add(f"blocks.{i}.attn.v.weight")

    def condition_color_route(
        self, projector_weight: Tensor, targets: Tensor, colors: np.ndarray, gain: float
    ) -> None:
        """Route attended colors toward the matching prompt direction.

        The attention output map starts random, so whether attending a
        component's own color raises or lowers its prompt alignment is a
        coin flip per class; classes that lose the flip are actively
        pushed off their own pixels early in training.  A pretrained
        encoder pair has already resolved this association, so the color
        columns of each block's output map are set (least squares, the
        color subspace has rank 3) to send class k's mean color near
        prompt k once projected.  The location columns are zeroed, not
        fitted: a fitted location read hands classes a shortcut to their
        prompts that needs no image evidence (and the least-squares
        coefficients on these small-amplitude channels come out an order
        of magnitude above the color ones, so any attention drift lands
        far from the fit); left random instead, prompt alignment rewards
        one side of a mirrored pair and punishes the other with a
        per-seed sign.  Silent-but-trainable is the neutral start.  All
        of the maps stay trainable.
        """
        T = F.normalize(torch.as_tensor(np.asarray(targets), dtype=torch.float32), dim=-1)
        C = torch.from_numpy(np.asarray(colors, dtype=np.float32))  # (K, 3)
        route = torch.linalg.pinv(projector_weight.detach().float()) @ (
            gain * T.T @ torch.linalg.pinv(C.T)
        )  # (d, 3)
        with torch.no_grad():
            for block in self.blocks:
                w = block.attn.proj.weight
                w[:, :3] = route.to(w.dtype)
                w[:, 3:5] = 0.0
        for block in self.blocks:
            # The signed-side read is pinned at zero, not merely zeroed:
            # with prompts that differ by side, a trainable side column
            # lets image-level alignment resolve mirrored pairs with no
            # spatial evidence at all (collapsing the gap the masking
            # ablation measures), and it is the direction along which the
            # push-apart losses tear one twin off its component.  Side
            # may only enter through attention geometry or the frozen
            # region encoder.
            block.attn.proj.weight.register_hook(_mask_side_read_grad)

    def trainable_parameters(self):
        for name, p in self.named_parameters():
            if name not in self._frozen_names:
                yield p

    def forward(self, x: Tensor) -> TokenBundle:
        if x.ndim != 4 or x.shape[1] != 3:
            raise ValueError(f"expected (B, 3, S, S) input, got {tuple(x.shape)}")
        B = x.shape[0]
        K = self.num_classes
        p = self.patch_embed(x).flatten(2).transpose(1, 2)  # (B, N, d)
        if self.use_pos_embed:
            p = p + self.pos_embed
        t = torch.cat([self.cls_tokens.unsqueeze(0).expand(B, -1, -1), p], dim=1)
        cls2pat = []
        for block in self.blocks:
            t, attn = block(t)
            cls2pat.append(attn[:, :K])  # keys are patches only: (B, K, N)
        return TokenBundle(t[:, :K], t[:, K:], (self.grid, self.grid), tuple(cls2pat))


class ClassProjector(nn.Module):
    """Maps class-token embeddings into the vision-language space."""

    def __init__(self, embed_dim: int, out_dim: int, depth: int = 1, seed: int = 0) -> None:
        super().__init__()
        if depth < 1:
            raise ValueError("projector depth must be >= 1")
        layers: list[nn.Module] = []
        for i in range(depth - 1):
            layers += [nn.Linear(embed_dim, embed_dim), nn.GELU()]
        layers.append(nn.Linear(embed_dim, out_dim, bias=False))
        self.net = nn.Sequential(*layers)
        reseed_parameters(self, seed)

    def forward(self, F_cls: Tensor) -> Tensor:
        return self.net(F_cls)

    def condition(self, tokens: Tensor, targets: Tensor | np.ndarray) -> float:
        """Blend a least-squares token-to-prompt map into the last layer.

        A projector shipped with a pretrained encoder pair sends each
        class's features near that class's prompt embedding.  A random
        projector instead starts every cosine near zero — or below it,
        where the clamped-log alignment losses are flat and give those
        classes no gradient at all.  The blend is scaled to the existing
        random response so initial cosines land in a trainable mid-range
        rather than at saturation.
        """
        if len(self.net) != 1:
            raise ValueError("projector conditioning requires depth 1")
        w = self.net[-1].weight  # (e, d)
        T = torch.as_tensor(np.asarray(targets), dtype=w.dtype)
        T = F.normalize(T, dim=-1)
        C = tokens.detach().to(w.dtype)  # (K, d)
        if T.shape != (C.shape[0], w.shape[0]):
            raise ValueError(
                f"targets must be ({C.shape[0]}, {w.shape[0]}), got {tuple(T.shape)}"
            )
        with torch.no_grad():
            gain = torch.linalg.vector_norm(C @ w.T, dim=-1).median()
            w += gain * (T.T @ torch.linalg.pinv(C.T))
        return float(gain)


class PatchAttentionHead(nn.Module):
    """1x1 convolution over the patch grid, one sigmoid channel per class."""

    def __init__(self, embed_dim: int, num_classes: int, seed: int = 0) -> None:
        super().__init__()
        self.conv = nn.Conv2d(embed_dim, num_classes, kernel_size=1)
        reseed_parameters(self, seed)

    def forward(self, F_pat: Tensor, grid: tuple[int, int]) -> Tensor:
        B, N, d = F_pat.shape
        rows, cols = grid
        if rows * cols != N:
            raise ValueError(f"{N} patch tokens do not fill grid {grid}")
        fmap = F_pat.transpose(1, 2).reshape(B, d, rows, cols)
        return torch.sigmoid(self.conv(fmap))

    def condition(self, colors: np.ndarray, gain: float = 5.0) -> None:
        """Start each class channel as a color-matched soft mask.

        With a random head every channel sits at 0.5 everywhere, all
        region embeddings coincide with the whole image, and classes
        whose prompt anti-correlates with the full face never receive a
        region-alignment gradient (the clamped log is flat at negative
        cosine).  Seeding channel k with its component's centered color
        starts each soft mask elevated on own-colored patches, inside
        the losses' responsive range.
        """
        colors = np.asarray(colors, dtype=np.float32)
        centered = torch.from_numpy(colors - colors.mean(axis=0))
        with torch.no_grad():
            self.conv.weight[:, :3, 0, 0] = gain * centered


def reseed_parameters(module: nn.Module, seed: int, scale: float = 0.02) -> None:
    """Deterministic init: gaussian weights, zero biases, identity norms.

    Iteration follows named_parameters order, which is fixed by module
    construction, so the same seed always yields the same parameters.
    """
    gen = torch_generator(seed)
    for name, p in module.named_parameters():
        with torch.no_grad():
            if name.endswith("bias") or "norm" in name:
                if name.endswith("weight"):
                    p.fill_(1.0)
                else:
                    p.zero_()
            else:
                p.copy_(torch.randn(p.shape, generator=gen, dtype=torch.float32) * scale)


def face_to_tensor(face: LabeledFace | np.ndarray, dtype: torch.dtype) -> Tensor:
    pixels = face.pixels if isinstance(face, LabeledFace) else face
    # copy: source arrays are write-locked and torch needs a writable buffer
    return torch.from_numpy(np.array(pixels, copy=True)).permute(2, 0, 1).to(dtype)


def batch_to_tensors(
    faces: list[LabeledFace], dtype: torch.dtype
) -> tuple[Tensor, Tensor]:
    images = torch.stack([face_to_tensor(f, dtype) for f in faces])
    labels = torch.from_numpy(np.stack([f.label for f in faces])).to(dtype)
    return images, labels


def forward_backbone(images: Tensor, model: MultiClassTokenBackbone) -> TokenBundle:
    return model(images)


def project_class(F_cls: Tensor, projector: ClassProjector | Tensor) -> Tensor:
    """v_cls = projection^T applied to each class row."""
    if isinstance(projector, Tensor):
        if F_cls.shape[-1] != projector.shape[0]:
            raise ValueError(
                f"cannot project width {F_cls.shape[-1]} with {tuple(projector.shape)} matrix"
            )
        return F_cls @ projector
    return projector(F_cls)


def patch_attention(F_pat: Tensor, head: PatchAttentionHead, grid: tuple[int, int]) -> Tensor:
    return head(F_pat, grid)


@dataclass
class ModelSet:
    backbone: MultiClassTokenBackbone
    projector: ClassProjector
    patch_head: PatchAttentionHead

    def parameters(self):
        for m in (self.backbone, self.projector, self.patch_head):
            yield from m.parameters()

    def trainable_parameters(self):
        """Parameters the stage-1 optimizer updates.

        Class tokens and the projector stay at their (conditioned)
        initialization: they anchor each class's identity in the shared
        text space.  If they were free to move, a trivial solution exists
        that aligns every class vector with its prompt without reading
        the image at all, and no attention map would ever be trained.
        The backbone may freeze further appearance-code parameters when
        conditioned; see MultiClassTokenBackbone._condition.
        """
        yield from self.backbone.trainable_parameters()
        yield from self.patch_head.parameters()

    def to(self, dtype: torch.dtype) -> "ModelSet":
        for m in (self.backbone, self.projector, self.patch_head):
            m.to(dtype)
        return self

    def train(self) -> None:
        for m in (self.backbone, self.projector, self.patch_head):
            m.train()

    def eval(self) -> None:
        for m in (self.backbone, self.projector, self.patch_head):
            m.eval()

    def state_dict(self) -> dict:
        return {
            "backbone": self.backbone.state_dict(),
            "projector": self.projector.state_dict(),
            "patch_head": self.patch_head.state_dict(),
        }

    def load_state_dict(self, state: dict) -> None:
        self.backbone.load_state_dict(state["backbone"])
        self.projector.load_state_dict(state["projector"])
        self.patch_head.load_state_dict(state["patch_head"])


def build_models(
    schema: ComponentSchema,
    config: PipelineConfig,
    input_size: int | None = None,
    prototype_colors: np.ndarray | None = None,
    color_gain: float = 3.0,
    prompt_targets: Tensor | np.ndarray | None = None,
    prototype_positions: np.ndarray | None = None,
) -> ModelSet:
    # color_gain scales the conditioned query/key identity: own-color
    # attention must start well above positional-noise attention or class
    # tokens take hundreds of steps to find their components at all.
    size = config.input_size if input_size is None else input_size
    patch = size // config.patch_grid
    if patch * config.patch_grid != size:
        raise ValueError(f"patch grid {config.patch_grid} does not divide input size {size}")
    backbone = MultiClassTokenBackbone(
        schema.K,
        size,
        patch,
        config.embed_dim,
        use_pos_embed=config.use_pos_embed,
        seed=config.seed * 3 + 11,
        prototype_colors=prototype_colors,
        color_gain=color_gain,
        prototype_positions=prototype_positions,
    )
    projector = ClassProjector(
        config.embed_dim, config.vl_dim, depth=config.projector_depth, seed=config.seed * 3 + 12
    )
    if prompt_targets is not None:
        anchor = projector.condition(backbone.cls_tokens, prompt_targets)
        if prototype_colors is not None:
            backbone.condition_color_route(
                projector.net[-1].weight, prompt_targets, prototype_colors, anchor
            )
    head = PatchAttentionHead(config.embed_dim, schema.K, seed=config.seed * 3 + 13)
    if prototype_colors is not None:
        head.condition(prototype_colors)
    models = ModelSet(backbone, projector, head)
    return models.to(config.torch_dtype)
