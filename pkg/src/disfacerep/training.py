"""Stage-1 training: fit the backbone, projector, and patch head under
image-level labels with the region-text alignment objective.

Determinism contract: batches are drawn from a stateless per-step random
substream keyed on (seed, step), so resuming from a checkpoint replays the
exact batch sequence without serializing generator state.  All compute is
CPU torch with fixed seeds; two runs from the same config are bit-identical.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .config import PipelineConfig
from .losses import LossBreakdown, RepresentationBundle, total_loss
from .models import ModelSet, batch_to_tensors, build_models
from .rng import substream
from .schema import ComponentSchema, LabeledFace
from .vl import VLEncoderPair, encode_components, encode_prompts

@dataclass
class TrainResult:
    models: ModelSet
    history: list[dict]  # one scalar record per step

    @property
    def final_total(self) -> float:
        return self.history[-1]["total"] if self.history else float("nan")


def _active_terms(config: PipelineConfig) -> dict[str, bool]:
    a0, a1, b0, b1, b2, lam = config.weights()
    return {
        "pos_cls": a0 != 0.0,
        "pos_ffc": a1 != 0.0,
        "neg_cls": b0 != 0.0,
        "neg_ffc": b1 != 0.0,
        "neg_bfc": b2 != 0.0,
        "reg": lam != 0.0,
    }


def compute_batch_loss(
    models: ModelSet,
    vl: VLEncoderPair,
    images: torch.Tensor,
    labels: torch.Tensor,
    schema: ComponentSchema,
    config: PipelineConfig,
) -> LossBreakdown:
    """Forward pass through every trainable module plus the frozen encoders.

    Region embeddings are skipped (zero constants, zero weight in the sum)
    when no region term is active — they are by far the most expensive part
    of the step.
    """
    bundle = models.backbone(images)
    v_cls = models.projector(bundle.F_cls)
    P = models.patch_head(bundle.F_pat, bundle.patch_grid)
    v_txt = encode_prompts(schema, vl).to(images.dtype)
    active = _active_terms(config)
    if active["pos_ffc"] or active["neg_ffc"] or active["neg_bfc"]:
        v_ffc, v_bfc = encode_components(images, P, vl)
    else:
        B, K = v_cls.shape[0], schema.K
        v_ffc = torch.zeros(B, K, v_txt.shape[-1], dtype=images.dtype)
        v_bfc = torch.zeros_like(v_ffc)
    rep = RepresentationBundle(v_cls=v_cls, P=P, v_ffc=v_ffc, v_bfc=v_bfc, v_txt=v_txt)
    return total_loss(rep, labels, config)


def _step_record(step: int, breakdown: LossBreakdown, active: dict[str, bool]) -> dict:
    rec = {"step": step}
    for name, value in breakdown.scalars().items():
        if name != "total" and not active.get(name, True):
            rec[name] = 0.0  # term disabled: not part of the objective
        else:
            rec[name] = value
    rec["neg_prompt_count"] = breakdown.neg_prompt_count
    rec["per_class"] = {k: [float(v) for v in t.detach()] for k, t in breakdown.per_class.items()}
    return rec


def save_checkpoint(
    path: str | Path, step: int, models: ModelSet, optimizer: torch.optim.Optimizer
) -> None:
    torch.save(
        {"step": step, "models": models.state_dict(), "optimizer": optimizer.state_dict()},
        path,
    )


def load_checkpoint(
    path: str | Path, models: ModelSet, optimizer: torch.optim.Optimizer
) -> int:
    state = torch.load(path, map_location="cpu", weights_only=False)
    models.load_state_dict(state["models"])
    optimizer.load_state_dict(state["optimizer"])
    return int(state["step"])


def train_stage1(
    dataset: Sequence[LabeledFace],
    schema: ComponentSchema,
    config: PipelineConfig,
    vl: VLEncoderPair,
    models: ModelSet | None = None,
    input_size: int | None = None,
    log_path: str | Path | None = None,
    checkpoint_path: str | Path | None = None,
    resume: bool = False,
) -> TrainResult:
    if not dataset:
        raise ValueError("cannot train on an empty dataset")
    size = dataset[0].pixels.shape[0] if input_size is None else input_size
    if models is None:
        models = build_models(schema, config, input_size=size)
    models.train()
    torch.set_num_threads(max(1, torch.get_num_threads()))
    trainable = list(models.trainable_parameters())
    optimizer = torch.optim.AdamW(trainable, lr=config.lr, weight_decay=config.weight_decay)
    start_step = 0
    if resume:
        if checkpoint_path is None or not Path(checkpoint_path).is_file():
            raise FileNotFoundError(f"no checkpoint to resume from: {checkpoint_path}")
        start_step = load_checkpoint(checkpoint_path, models, optimizer)
    frozen_before = vl.parameter_snapshot()
    dtype = config.torch_dtype
    images_all, labels_all = batch_to_tensors(list(dataset), dtype)
    n = images_all.shape[0]
    active = _active_terms(config)
    history: list[dict] = []
    log_file = open(log_path, "a" if resume else "w") if log_path else None
    try:
        for step in range(start_step, config.steps):
            rng = substream(config.seed, f"batch:{step}")
            take = min(config.batch_size, n)
            idx = rng.choice(n, size=take, replace=False)
            images = images_all[torch.from_numpy(np.ascontiguousarray(idx))]
            labels = labels_all[torch.from_numpy(np.ascontiguousarray(idx))]
            optimizer.zero_grad()
            # Negative terms ramp in over the first neg_warmup_steps.  Mirrored
            # components share appearance, so their class tokens start with
            # near-equal similarity to both prompts of the pair; full-strength
            # push-apart pressure at that point eradicates one token of the
            # pair before masked-batch gradients can lateralise its attention.
            ramp = 1.0
            if config.neg_warmup_steps > 0:
                ramp = min(1.0, (step + 1) / config.neg_warmup_steps)
            step_cfg = config if ramp >= 1.0 else config.replace(
                beta0=config.beta0 * ramp,
                beta1=config.beta1 * ramp,
                beta2=config.beta2 * ramp,
            )
            breakdown = compute_batch_loss(models, vl, images, labels, schema, step_cfg)
            breakdown.total.backward()
            # -log(sim) terms have 1/sim gradients: a class whose region
            # similarity transits near zero fires a spike orders of magnitude
            # above the typical step and wrecks the shared backbone.
            torch.nn.utils.clip_grad_norm_(trainable, config.grad_clip)
            optimizer.step()
            record = _step_record(step, breakdown, active)
            history.append(record)
            if log_file:
                log_file.write(json.dumps(record) + "\n")
    finally:
        if log_file:
            log_file.close()
    if checkpoint_path is not None:
        save_checkpoint(checkpoint_path, config.steps, models, optimizer)
    for before, after in zip(frozen_before, vl.parameter_snapshot()):
        if not torch.equal(before, after):
            raise RuntimeError("frozen encoder parameters changed during training")
    models.eval()
    return TrainResult(models, history)
