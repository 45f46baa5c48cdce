"""Region-text alignment losses and the combined training objective.

All terms are negative-log penalties over clamped cosine similarities:

* positive terms pull each present class's projected token (and its
  foreground region embedding) toward the matching text prompt;
* negative terms push them away from every *other* prompt, and push the
  background region away from the matching prompt;
* a small activation-area term keeps the attention maps sparse.

Similarities are clamped to [eps, 1 - eps] before the log because raw
cosines can be <= 0 or exactly 1.  The total is the exact weighted sum of
the six scalars — tests rely on bit-level decomposition in 64-bit mode.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import Tensor

from .config import PipelineConfig

CLAMP_EPS = 1e-7
NORM_EPS = 1e-12


@dataclass
class LossBreakdown:
    pos_cls: Tensor
    pos_ffc: Tensor
    neg_cls: Tensor
    neg_ffc: Tensor
    neg_bfc: Tensor
    reg: Tensor
    total: Tensor
    per_class: dict[str, Tensor]
    neg_prompt_count: int

    def scalars(self) -> dict[str, float]:
        return {
            "pos_cls": float(self.pos_cls.detach()),
            "pos_ffc": float(self.pos_ffc.detach()),
            "neg_cls": float(self.neg_cls.detach()),
            "neg_ffc": float(self.neg_ffc.detach()),
            "neg_bfc": float(self.neg_bfc.detach()),
            "reg": float(self.reg.detach()),
            "total": float(self.total.detach()),
        }


@dataclass(frozen=True)
class RepresentationBundle:
    """Everything the objective needs for one image (or a batch)."""

    v_cls: Tensor  # (..., K, e)
    P: Tensor  # (..., K, rows, cols)
    v_ffc: Tensor  # (..., K, e)
    v_bfc: Tensor  # (..., K, e)
    v_txt: Tensor  # (K, e)


def cosine_sim(a: Tensor, b: Tensor) -> Tensor:
    """Cosine similarity over the last axis; either norm under 1e-12 gives 0.

    The unsafe branch is masked out of the division entirely so no NaN can
    leak into gradients.
    """
    na = a.norm(dim=-1)
    nb = b.norm(dim=-1)
    dot = (a * b).sum(dim=-1)
    safe = (na >= NORM_EPS) & (nb >= NORM_EPS)
    denom = torch.where(safe, na * nb, torch.ones_like(na))
    return torch.where(safe, dot / denom, torch.zeros_like(dot))


def _clamp(sim: Tensor) -> Tensor:
    return sim.clamp(CLAMP_EPS, 1.0 - CLAMP_EPS)


def _nll(sim: Tensor) -> Tensor:
    return -torch.log(_clamp(sim))


def pos_losses(v_cls: Tensor, v_ffc: Tensor, v_txt: Tensor, y: Tensor) -> tuple[Tensor, Tensor, Tensor, Tensor]:
    """Alignment of class tokens and foreground regions with their prompts.

    Returns (pos_cls, pos_ffc, per_class_cls, per_class_ffc); the per-class
    vectors are label-gated contributions summing to the scalars.
    """
    yw = y.to(v_cls.dtype)
    pc_cls = yw * _nll(cosine_sim(v_cls, v_txt))
    pc_ffc = yw * _nll(cosine_sim(v_ffc, v_txt))
    return pc_cls.sum(), pc_ffc.sum(), _batch_mean(pc_cls), _batch_mean(pc_ffc)


def neg_losses(
    v_cls: Tensor,
    v_ffc: Tensor,
    v_bfc: Tensor,
    v_txt: Tensor,
    y: Tensor,
    present_only: bool = False,
) -> tuple[Tensor, Tensor, Tensor, dict[str, Tensor], int]:
    """Suppression terms.

    For each present class k the non-corresponding prompt set is every other
    component's prompt (all K-1 of them), optionally restricted to
    components present in the label.  The background term penalizes the
    complement region matching its own prompt.
    """
    K = v_txt.shape[0]
    yw = y.to(v_cls.dtype)
    # sims[..., k, l] = similarity between representation k and prompt l
    sims_cls = cosine_sim(v_cls.unsqueeze(-2), v_txt.unsqueeze(-3))
    sims_ffc = cosine_sim(v_ffc.unsqueeze(-2), v_txt.unsqueeze(-3))
    off = 1.0 - torch.eye(K, dtype=v_cls.dtype, device=v_cls.device)
    if present_only:
        other = off * yw.unsqueeze(-2)  # keep prompt l only when component l is present
    else:
        other = off.expand(sims_cls.shape[:-2] + (K, K))
    pc_cls = yw * (other * _nll(1.0 - sims_cls)).sum(dim=-1)
    pc_ffc = yw * (other * _nll(1.0 - sims_ffc)).sum(dim=-1)
    pc_bfc = yw * _nll(1.0 - cosine_sim(v_bfc, v_txt))
    per_class = {
        "neg_cls": _batch_mean(pc_cls),
        "neg_ffc": _batch_mean(pc_ffc),
        "neg_bfc": _batch_mean(pc_bfc),
    }
    return pc_cls.sum(), pc_ffc.sum(), pc_bfc.sum(), per_class, K - 1


def reg_loss(P: Tensor) -> Tensor:
    """Mean activation area: average of each class map's spatial mean."""
    if P.ndim < 3:
        raise ValueError(f"P must be (..., K, rows, cols), got {tuple(P.shape)}")
    per_class_area = P.mean(dim=(-2, -1))  # (..., K)
    return per_class_area.mean(dim=-1).sum()


def _batch_mean(per_class: Tensor) -> Tensor:
    """Collapse any batch dims, keeping the class axis."""
    if per_class.ndim == 1:
        return per_class
    return per_class.reshape(-1, per_class.shape[-1]).mean(dim=0)


def total_loss(
    bundle: RepresentationBundle, y: Tensor, config: PipelineConfig
) -> LossBreakdown:
    """Weighted sum of the six terms; every term is >= 0 by clamping.

    Batched inputs are averaged over the batch so the scale matches the
    single-image contract.
    """
    batch = y.reshape(-1, y.shape[-1]).shape[0] if y.ndim > 1 else 1
    p_cls, p_ffc, pc_pcls, pc_pffc = pos_losses(bundle.v_cls, bundle.v_ffc, bundle.v_txt, y)
    n_cls, n_ffc, n_bfc, pc_neg, L = neg_losses(
        bundle.v_cls,
        bundle.v_ffc,
        bundle.v_bfc,
        bundle.v_txt,
        y,
        present_only=config.neg_prompts_present_only,
    )
    reg = reg_loss(bundle.P)
    inv = 1.0 / batch
    p_cls, p_ffc, n_cls, n_ffc, n_bfc, reg = (
        t * inv for t in (p_cls, p_ffc, n_cls, n_ffc, n_bfc, reg)
    )
    a0, a1, b0, b1, b2, lam = config.weights()
    total = a0 * p_cls + a1 * p_ffc + b0 * n_cls + b1 * n_ffc + b2 * n_bfc + lam * reg
    per_class = {"pos_cls": pc_pcls, "pos_ffc": pc_pffc, **pc_neg}
    return LossBreakdown(p_cls, p_ffc, n_cls, n_ffc, n_bfc, reg, total, per_class, L)
