"""Command-line entry point wiring the two-stage pipeline end to end.

Subcommands::

    synth        generate a synthetic corpus on disk
    analyze      co-occurrence report + frequency bar chart
    ccd          detection-guided masking -> debiased training set
    train        stage-1 training (backbone/projector/patch head)
    pseudolabel  activation maps -> pseudo masks
    trainparser  stage-2 segmentation training on pseudo masks
    eval         component-level F1, optionally through a label remap

Every config key is also a flag (``--mask-prob 0.3``); precedence is
flags > config file > environment > defaults.  Each run writes a
``manifest.yaml`` with the config snapshot, inputs, timing, and artifact
checksums.  Exit codes: 0 success, 1 usage/config error, 2 data error,
3 external-client error.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import shutil
import sys
import time
from pathlib import Path

import numpy as np
import torch
import yaml

from .ccd import build_debiased_set
from .config import PipelineConfig, load_config, save_config
from .cooccur import compute_cooccurrence, plot_frequency, save_report, select_dominant
from .data import (
    apply_label_overrides,
    discover_manifest,
    load_dataset,
    load_labels,
    save_labels,
    write_corpus,
)
from .detection import HttpDetectionClient, StubDetectionClient
from .errors import (
    ConfigParseError,
    ConfigValidationError,
    DataError,
    DetectorTransportError,
)
from .evaluation import (
    ablation_table,
    f1_report,
    parse_remap,
    remap_masks,
    validate_remap,
)
from .fcam import load_pseudo_mask, read_pseudo_manifest, write_pseudo_labels
from .models import build_models
from .rng import seeded_rng
from .schema import BUILTIN_SCHEMAS, ComponentSchema, get_schema
from .segnet import SegNet, predict, train_parser
from .synthetic import default_synthetic_spec, generate_synthetic, load_spec, save_spec
from .training import train_stage1
from .vl import GridPoolImageEncoder, OrthogonalTextEncoder, PrototypeTextEncoder, VLEncoderPair


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str) -> None:  # noqa: D401 - argparse hook
        raise UsageError(message)


_CONFIG_FIELDS = dataclasses.fields(PipelineConfig)


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", default=None, help="YAML config file")
    for f in _CONFIG_FIELDS:
        p.add_argument(f"--{f.name.replace('_', '-')}", dest=f"cfg_{f.name}", default=None)


def _parse_flag(name: str, typ: str, raw: str):
    try:
        if typ == "int":
            return int(raw)
        if typ == "float":
            return float(raw)
        if typ == "bool":
            low = raw.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if typ == "tuple[float, ...]":
            return tuple(float(v) for v in raw.split(","))
        return raw
    except ValueError:
        raise UsageError(f"--{name.replace('_', '-')}: cannot parse {raw!r} as {typ}") from None


def _resolve_config(args: argparse.Namespace) -> PipelineConfig:
    overrides = {}
    for f in _CONFIG_FIELDS:
        raw = getattr(args, f"cfg_{f.name}", None)
        if raw is not None:
            overrides[f.name] = _parse_flag(f.name, f.type, raw)
    return load_config(getattr(args, "config", None), overrides=overrides)


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_manifest(
    out_dir: Path,
    subcommand: str,
    config: PipelineConfig,
    inputs: dict,
    started: float,
) -> None:
    checksums = {}
    for path in sorted(out_dir.rglob("*")):
        if path.is_file() and path.name != "manifest.yaml":
            checksums[str(path.relative_to(out_dir))] = _sha256(path)
    manifest = {
        "subcommand": subcommand,
        "seed": config.seed,
        "config": config.to_dict(),
        "inputs": {k: str(v) for k, v in inputs.items()},
        "timing": {"started": started, "seconds": time.time() - started},
        "checksums": checksums,
    }
    (out_dir / "manifest.yaml").write_text(yaml.safe_dump(manifest, sort_keys=True))


def _resolve_schema(args: argparse.Namespace, data_dir: Path | None) -> ComponentSchema:
    if getattr(args, "schema", None):
        return get_schema(args.schema)
    if data_dir is not None and (data_dir / "spec.yaml").is_file():
        return load_spec(data_dir / "spec.yaml").schema
    return get_schema("synthetic")


def _load_corpus(
    args: argparse.Namespace, config: PipelineConfig, data_dir: Path, schema: ComponentSchema
):
    """Load faces+masks at config.input_size, honoring a labels.txt override."""
    manifest = discover_manifest(data_dir, args.split, schema)
    samples, report = load_dataset(manifest, input_size=config.input_size, workers=args.workers)
    if report.errors:
        for sid, msg in report.errors[:10]:
            print(f"warning: sample {sid}: {msg}", file=sys.stderr)
    if not samples:
        raise DataError(f"no loadable samples in {data_dir} ({report.summary()})")
    faces = [f for f, _ in samples]
    masks = {f.id: m for f, m in samples}
    labels_file = data_dir / "labels.txt"
    if labels_file.is_file():
        faces = apply_label_overrides(faces, load_labels(labels_file, schema.K))
    return faces, masks


def _build_vl(
    schema: ComponentSchema, config: PipelineConfig, data_dir: Path | None
) -> VLEncoderPair:
    image_enc = GridPoolImageEncoder(
        config.vl_dim, grid_size=config.encoder_grid, seed=9001, dtype=config.torch_dtype
    )
    if data_dir is not None and (data_dir / "spec.yaml").is_file():
        spec = load_spec(data_dir / "spec.yaml")
        text_enc = PrototypeTextEncoder(
            schema, spec.shapes, image_enc, canvas=config.input_size, dtype=config.torch_dtype
        )
    else:
        text_enc = OrthogonalTextEncoder(config.vl_dim, dtype=config.torch_dtype)
    return VLEncoderPair(image_enc, text_enc, frozen=True)


def _make_client(config: PipelineConfig, schema, faces, masks):
    import os

    if config.detector_endpoint:
        return HttpDetectionClient(
            config.detector_endpoint,
            retries=config.client_retries,
            auth_token=os.environ.get("DISFACEREP_DETECTOR_TOKEN"),
        )
    client = StubDetectionClient(schema, seed=config.seed)
    for face in faces:
        client.register(face, masks[face.id])
    return client


def cmd_synth(args: argparse.Namespace) -> int:
    config = _resolve_config(args)
    started = time.time()
    out = Path(args.out)
    spec = load_spec(args.spec) if args.spec else default_synthetic_spec(args.canvas)
    samples = generate_synthetic(spec, args.n, seeded_rng(config.seed))
    out.mkdir(parents=True, exist_ok=True)
    write_corpus(out, samples, spec.schema, split=args.split)
    save_spec(spec, out / "spec.yaml")
    save_labels(out / "labels.txt", [f for f, _ in samples])
    _write_manifest(out, "synth", config, {"spec": args.spec or "default", "n": args.n}, started)
    print(f"wrote {len(samples)} samples to {out}")
    return 0


def cmd_analyze(args: argparse.Namespace) -> int:
    config = _resolve_config(args)
    started = time.time()
    data_dir = Path(args.data)
    out = Path(args.out)
    schema = _resolve_schema(args, data_dir)
    faces, _ = _load_corpus(args, config, data_dir, schema)
    labels = np.stack([f.label for f in faces])
    report = compute_cooccurrence(labels, schema, config.dominance_threshold)
    out.mkdir(parents=True, exist_ok=True)
    save_report(report, out / "report.yaml")
    plot_frequency(report, out / "frequency.png")
    _write_manifest(out, "analyze", config, {"data": data_dir}, started)
    dominant = ", ".join(schema.names[k] for k in report.dominant) or "none"
    print(f"analyzed {len(faces)} samples; dominant maskable components: {dominant}")
    return 0


def cmd_ccd(args: argparse.Namespace) -> int:
    config = _resolve_config(args)
    started = time.time()
    data_dir = Path(args.data)
    out = Path(args.out)
    schema = _resolve_schema(args, data_dir)
    faces, masks = _load_corpus(args, config, data_dir, schema)
    labels = np.stack([f.label for f in faces])
    stats = compute_cooccurrence(labels, schema, config.dominance_threshold)
    dominant = [schema.names[k] for k in select_dominant(stats, config.dominance_threshold)]
    client = _make_client(config, schema, faces, masks)
    masked, report = build_debiased_set(faces, config, client, schema, dominant=dominant)
    out.mkdir(parents=True, exist_ok=True)
    pairs = [(face, masks[face.id]) for face in masked]
    write_corpus(out, pairs, schema, split=args.split)
    save_labels(out / "labels.txt", masked)
    if (data_dir / "spec.yaml").is_file():
        shutil.copyfile(data_dir / "spec.yaml", out / "spec.yaml")
    with open(out / "plans.jsonl", "w") as fh:
        for plan in report.plans:
            fh.write(json.dumps(plan) + "\n")
    _write_manifest(out, "ccd", config, {"data": data_dir}, started)
    if report.errors:
        print(f"warning: {len(report.errors)} samples failed detection", file=sys.stderr)
    print(
        f"masked {report.n_masked_images}/{report.n_images} images "
        f"(dominant: {', '.join(dominant) or 'none'})"
    )
    return 0


def cmd_train(args: argparse.Namespace) -> int:
    config = _resolve_config(args)
    started = time.time()
    data_dir = Path(args.data)
    out = Path(args.out)
    schema = _resolve_schema(args, data_dir)
    faces, _ = _load_corpus(args, config, data_dir, schema)
    vl = _build_vl(schema, config, data_dir)
    out.mkdir(parents=True, exist_ok=True)
    result = train_stage1(
        faces,
        schema,
        config,
        vl,
        input_size=config.input_size,
        log_path=out / "losses.jsonl",
        checkpoint_path=out / "checkpoint.pt",
        resume=args.resume,
    )
    save_config(config, out / "config.yaml")
    _write_manifest(out, "train", config, {"data": data_dir}, started)
    print(f"trained {config.steps} steps; final total loss {result.final_total:.6f}")
    return 0


def cmd_pseudolabel(args: argparse.Namespace) -> int:
    config = _resolve_config(args)
    started = time.time()
    data_dir = Path(args.data)
    out = Path(args.out)
    schema = _resolve_schema(args, data_dir)
    faces, _ = _load_corpus(args, config, data_dir, schema)
    models = build_models(schema, config, input_size=config.input_size)
    state = torch.load(args.model, map_location="cpu", weights_only=False)
    models.load_state_dict(state["models"])
    out.mkdir(parents=True, exist_ok=True)
    manifest, errors = write_pseudo_labels(
        [(f, f.label) for f in faces], models, config.theta, out
    )
    _write_manifest(out, "pseudolabel", config, {"data": data_dir, "model": args.model}, started)
    for sid, msg in errors[:10]:
        print(f"warning: {sid}: {msg}", file=sys.stderr)
    print(f"wrote {len(manifest)} pseudo masks at theta={config.theta}")
    return 0


def cmd_trainparser(args: argparse.Namespace) -> int:
    config = _resolve_config(args)
    started = time.time()
    data_dir = Path(args.data)
    pseudo_dir = Path(args.pseudo)
    out = Path(args.out)
    schema = _resolve_schema(args, data_dir)
    faces, _ = _load_corpus(args, config, data_dir, schema)
    by_id = {f.id: f for f in faces}
    pairs = []
    for sid, rel in read_pseudo_manifest(pseudo_dir):
        if sid in by_id:
            pairs.append((by_id[sid], load_pseudo_mask(pseudo_dir / rel, schema.K)))
    if not pairs:
        raise DataError(f"no overlap between {data_dir} samples and {pseudo_dir} manifest")
    losses: list[float] = []
    model = train_parser(pairs, schema, config, log=losses)
    out.mkdir(parents=True, exist_ok=True)
    torch.save({"model": model.state_dict(), "channels": config.seg_channels}, out / "parser.pt")
    preds_dir = out / "predictions"
    preds_dir.mkdir(exist_ok=True)
    from .fcam import save_pseudo_mask

    for face, mask in zip([f for f, _ in pairs], predict(model, [f for f, _ in pairs])):
        save_pseudo_mask(preds_dir / f"{face.id}.png", mask)
    with open(out / "losses.jsonl", "w") as fh:
        for i, value in enumerate(losses):
            fh.write(json.dumps({"step": i, "loss": value}) + "\n")
    _write_manifest(out, "trainparser", config, {"data": data_dir, "pseudo": pseudo_dir}, started)
    print(f"trained parser on {len(pairs)} samples; final CE loss {losses[-1]:.6f}")
    return 0


def _load_mask_dir(
    path: Path, schema: ComponentSchema, convention: str, size: int | None
) -> dict[str, "object"]:
    from .data import load_mask_indexed
    from .schema import SegMask

    out = {}
    for file in sorted(path.glob("*.png")):
        if convention == "dataset":
            vals = load_mask_indexed(file, size)
            labels = np.where(vals == 0, schema.K, vals - 1)
            out[file.stem] = SegMask(labels.astype(np.int64), schema.K)
        else:
            out[file.stem] = load_pseudo_mask(file, schema.K)
    if not out:
        raise DataError(f"no mask files under {path}")
    return out


def cmd_eval(args: argparse.Namespace) -> int:
    config = _resolve_config(args)
    started = time.time()
    out = Path(args.out)
    schema = get_schema(args.schema) if args.schema else _resolve_schema(args, Path(args.gts).parent)
    preds = _load_mask_dir(Path(args.preds), schema, "internal", config.input_size)
    gts = _load_mask_dir(Path(args.gts), schema, args.gt_convention, config.input_size)
    ids = sorted(set(preds) & set(gts))
    if not ids:
        raise DataError("predictions and ground truth share no sample ids")
    pred_list = [preds[i] for i in ids]
    gt_list = [gts[i] for i in ids]
    score_schema = schema
    if args.remap:
        if not args.target_schema:
            raise UsageError("--remap requires --target-schema")
        target = get_schema(args.target_schema)
        remap = parse_remap(args.remap)
        validate_remap(remap, schema, target)
        pred_list = remap_masks(pred_list, remap, schema, target)
        gt_list = remap_masks(gt_list, remap, schema, target)
        score_schema = target
    report = f1_report(pred_list, gt_list, score_schema)
    out.mkdir(parents=True, exist_ok=True)
    payload = {
        "mean_f1": report.mean_f1,
        "per_class": {
            score_schema.names[k]: float(report.per_class[k]) for k in report.included
        },
        "n_samples": len(ids),
    }
    (out / "report.yaml").write_text(yaml.safe_dump(payload, sort_keys=True))
    (out / "table.txt").write_text(ablation_table({"eval": report}))
    _write_manifest(out, "eval", config, {"preds": args.preds, "gts": args.gts}, started)
    print(f"mean F1 = {report.mean_f1:.4f} over {len(ids)} samples")
    return 0


def build_parser() -> _Parser:
    parser = _Parser(prog="disfacerep", description=__doc__, add_help=True)
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name: str, fn, **extra_args):
        p = sub.add_parser(name)
        p.set_defaults(fn=fn)
        _add_config_flags(p)
        p.add_argument("--workers", type=int, default=1)
        return p

    p = add("synth", cmd_synth)
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=500)
    p.add_argument("--canvas", type=int, default=64)
    p.add_argument("--spec", default=None)
    p.add_argument("--split", default="train")

    for name, fn in (("analyze", cmd_analyze), ("ccd", cmd_ccd)):
        p = add(name, fn)
        p.add_argument("--data", required=True)
        p.add_argument("--out", required=True)
        p.add_argument("--schema", default=None, choices=sorted(BUILTIN_SCHEMAS))
        p.add_argument("--split", default="train")

    p = add("train", cmd_train)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--schema", default=None, choices=sorted(BUILTIN_SCHEMAS))
    p.add_argument("--split", default="train")
    p.add_argument("--resume", action="store_true")

    p = add("pseudolabel", cmd_pseudolabel)
    p.add_argument("--data", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--schema", default=None, choices=sorted(BUILTIN_SCHEMAS))
    p.add_argument("--split", default="train")

    p = add("trainparser", cmd_trainparser)
    p.add_argument("--data", required=True)
    p.add_argument("--pseudo", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--schema", default=None, choices=sorted(BUILTIN_SCHEMAS))
    p.add_argument("--split", default="train")

    p = add("eval", cmd_eval)
    p.add_argument("--preds", required=True)
    p.add_argument("--gts", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--schema", default=None, choices=sorted(BUILTIN_SCHEMAS))
    p.add_argument("--gt-convention", default="dataset", choices=("dataset", "internal"))
    p.add_argument("--remap", default=None)
    p.add_argument("--target-schema", default=None, choices=sorted(BUILTIN_SCHEMAS))

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.fn(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except (ConfigParseError, ConfigValidationError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except (DataError, FileNotFoundError, ValueError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except DetectorTransportError as exc:
        print(f"detector error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main(None))
