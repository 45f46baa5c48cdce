"""Desk-scale end-to-end experiments on the synthetic corpus.

These wire the full weak-supervision loop — corpus generation, optional
detection-guided masking, stage-1 training, activation-map extraction,
pseudo-mask scoring — into named variants so ablation trends can be
reproduced quickly on CPU:

* ``base``      — train on the raw corpus with the class-alignment term only
* ``ccd``       — same loss, but train on the masked (debiased) corpus
* ``ccd_tcd``   — masked corpus plus the full disentanglement objective

plus the cumulative loss-term ladder used for the loss ablation.  Within a
seed every variant shares the same corpus, detector, and evaluation slice,
so differences isolate the treatment.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .ccd import build_debiased_set
from .config import PipelineConfig
from .cooccur import compute_cooccurrence, select_dominant
from .detection import StubDetectionClient
from .evaluation import F1Report, f1_report
from .fcam import extract_fcam, pseudo_mask
from .models import ModelSet, build_models
from .rng import seeded_rng
from .schema import ComponentSchema, LabeledFace, SegMask
from .synthetic import SyntheticFaceSpec, default_synthetic_spec, generate_synthetic
from .training import TrainResult, train_stage1
from .vl import GridPoolImageEncoder, PrototypeTextEncoder, VLEncoderPair, encode_prompts

# cumulative loss-term ladder: each stage enables one more weight
LOSS_STAGES: tuple[str, ...] = ("pos_cls", "pos_ffc", "neg_cls", "neg_ffc", "neg_bfc", "reg")
_STAGE_FIELDS: tuple[str, ...] = ("alpha0", "alpha1", "beta0", "beta1", "beta2", "lambda_reg")


def stage_config(config: PipelineConfig, stage: int) -> PipelineConfig:
    """Zero every loss weight beyond the given 1-based cumulative stage."""
    if not 1 <= stage <= len(LOSS_STAGES):
        raise ValueError(f"stage must be in [1, {len(LOSS_STAGES)}], got {stage}")
    overrides = {f: 0.0 for f in _STAGE_FIELDS[stage:]}
    return config.replace(**overrides)


def desk_config(**overrides) -> PipelineConfig:
    """Defaults sized for the 64-px synthetic corpus and CPU budgets."""
    base = dict(
        input_size=64,
        patch_count=64,
        embed_dim=64,
        vl_dim=32,
        encoder_grid=8,
        steps=300,
        batch_size=16,
        lr=2e-3,
        weight_decay=1e-2,
    )
    base.update(overrides)
    return PipelineConfig(**base)


def spec_colors(schema: ComponentSchema, spec: SyntheticFaceSpec) -> np.ndarray:
    """Prototype color per component, in schema order, for conditioned init."""
    return np.array([spec.shapes[name].color for name in schema.names], dtype=np.float32)


def spec_positions(schema: ComponentSchema, spec: SyntheticFaceSpec) -> np.ndarray:
    """Prior (y, x) center per component, in schema order, for conditioned init."""
    return np.array([spec.shapes[name].center for name in schema.names], dtype=np.float32)


def make_vl_pair(
    schema: ComponentSchema, spec: SyntheticFaceSpec, config: PipelineConfig
) -> VLEncoderPair:
    """Frozen encoder pair whose text embeddings live in the image space:
    prompts are encoded by rendering the named component at its prior.

    The image tower normalizes inputs by the palette mean, so region crops
    and prompt renders compare in the same mean-relative color space."""
    image_enc = GridPoolImageEncoder(
        config.vl_dim,
        grid_size=config.encoder_grid,
        seed=9001,
        pixel_mean=spec_colors(schema, spec).mean(axis=0),
        dtype=config.torch_dtype,
    )
    text_enc = PrototypeTextEncoder(
        schema, spec.shapes, image_enc, canvas=spec.canvas, dtype=config.torch_dtype
    )
    return VLEncoderPair(image_enc, text_enc, frozen=True)


def pseudo_mask_report(
    models: ModelSet,
    eval_set: Sequence[tuple[LabeledFace, SegMask]],
    schema: ComponentSchema,
    config: PipelineConfig,
) -> F1Report:
    """Score pseudo masks extracted from the trained model against ground truth."""
    preds, gts = [], []
    for face, gt in eval_set:
        stack = extract_fcam(face, face.label, models)
        preds.append(pseudo_mask(stack, config.theta))
        gts.append(gt)
    return f1_report(preds, gts, schema)


@dataclass
class VariantResult:
    name: str
    seed: int
    report: F1Report
    train: TrainResult

    @property
    def mean_f1(self) -> float:
        return self.report.mean_f1


def run_variant(
    name: str,
    corpus: Sequence[tuple[LabeledFace, SegMask]],
    schema: ComponentSchema,
    spec: SyntheticFaceSpec,
    config: PipelineConfig,
    use_ccd: bool,
    stage: int,
    eval_count: int = 200,
) -> VariantResult:
    """Train one variant and score its pseudo masks on the evaluation slice
    (the first ``eval_count`` original, unmasked images)."""
    faces = [face for face, _ in corpus]
    if use_ccd:
        client = StubDetectionClient(schema, seed=config.seed)
        for face, mask in corpus:
            client.register(face, mask)
        labels = np.stack([f.label for f in faces])
        stats = compute_cooccurrence(labels, schema, config.dominance_threshold)
        dominant = [schema.names[k] for k in select_dominant(stats, config.dominance_threshold)]
        train_faces, _ = build_debiased_set(faces, config, client, schema, dominant=dominant)
    else:
        train_faces = list(faces)
    cfg = stage_config(config, stage)
    vl = make_vl_pair(schema, spec, cfg)
    models = build_models(
        schema,
        cfg,
        input_size=spec.canvas,
        prototype_colors=spec_colors(schema, spec),
        prompt_targets=encode_prompts(schema, vl),
        prototype_positions=spec_positions(schema, spec),
    )
    result = train_stage1(train_faces, schema, cfg, vl, models=models, input_size=spec.canvas)
    eval_slice = list(corpus)[: min(eval_count, len(corpus))]
    report = pseudo_mask_report(result.models, eval_slice, schema, cfg)
    return VariantResult(name, config.seed, report, result)


def module_ablation(
    seeds: Sequence[int],
    n_train: int = 500,
    eval_count: int = 200,
    config: PipelineConfig | None = None,
    spec: SyntheticFaceSpec | None = None,
    include_loss_ladder: bool = False,
) -> dict[str, list[VariantResult]]:
    """Run base / ccd / ccd_tcd (and optionally the full loss ladder) per seed.

    Returns variant name -> per-seed results.  The ladder's first and last
    rungs coincide with ``ccd`` and ``ccd_tcd``, so those runs are shared.
    """
    spec = spec or default_synthetic_spec()
    base_cfg = config or desk_config()
    results: dict[str, list[VariantResult]] = {}
    for seed in seeds:
        cfg = base_cfg.replace(seed=seed)
        corpus = generate_synthetic(spec, n_train, seeded_rng(seed * 7919 + 1))
        runs: dict[str, VariantResult] = {}
        runs["base"] = run_variant("base", corpus, spec.schema, spec, cfg, False, 1, eval_count)
        runs["ccd"] = run_variant("ccd", corpus, spec.schema, spec, cfg, True, 1, eval_count)
        runs["ccd_tcd"] = run_variant(
            "ccd_tcd", corpus, spec.schema, spec, cfg, True, len(LOSS_STAGES), eval_count
        )
        if include_loss_ladder:
            runs["loss_1"] = runs["ccd"]
            runs[f"loss_{len(LOSS_STAGES)}"] = runs["ccd_tcd"]
            for stage in range(2, len(LOSS_STAGES)):
                runs[f"loss_{stage}"] = run_variant(
                    f"loss_{stage}", corpus, spec.schema, spec, cfg, True, stage, eval_count
                )
        for name, res in runs.items():
            results.setdefault(name, []).append(res)
    return results


def mean_f1_by_variant(results: Mapping[str, list[VariantResult]]) -> dict[str, float]:
    return {name: float(np.mean([r.mean_f1 for r in runs])) for name, runs in results.items()}
