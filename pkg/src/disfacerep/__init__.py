"""Weakly-supervised face parsing from image-level component labels.

The pipeline runs in two stages.  Stage 1 trains a multi-class-token
transformer classifier whose class-to-patch attention, fused with a
per-class patch-attention map and sharpened by text-guided contrastive
losses, yields component activation maps; thresholding those produces
pseudo segmentation masks.  Detection-guided masking breaks label
co-occurrence before training so near-universal components cannot act as
shortcuts for each other.  Stage 2 fits a small segmentation network on
the pseudo masks.
"""

from .ccd import (
    CcdReport,
    MaskPlan,
    apply_mask,
    build_debiased_set,
    check_overlap,
    detect,
    filter_boxes,
    masking_rates,
    plan_mask,
)
from .config import PipelineConfig, load_config, save_config
from .cooccur import (
    CooccurrenceReport,
    compute_cooccurrence,
    plot_frequency,
    save_report,
    select_dominant,
)
from .data import (
    DatasetManifest,
    LoadReport,
    SampleEntry,
    apply_label_overrides,
    compose_component_masks,
    discover_manifest,
    load_dataset,
    load_image,
    load_labels,
    load_mask_indexed,
    save_component_mask,
    save_image,
    save_labels,
    save_mask_indexed,
    split_subset,
    write_corpus,
)
from .detection import (
    Detection,
    DetectionClient,
    HttpDetectionClient,
    StubDetectionClient,
    image_to_png_bytes,
)
from .errors import (
    ConfigParseError,
    ConfigValidationError,
    DataError,
    DetectorTransportError,
    PipelineError,
)
from .evaluation import (
    DROP,
    F1Report,
    LabelRemap,
    ablation_table,
    default_remap_path,
    f1_report,
    parse_remap,
    remap_masks,
    validate_remap,
)
from .fcam import (
    FCAMStack,
    extract_fcam,
    load_pseudo_mask,
    minmax_norm,
    pseudo_mask,
    read_pseudo_manifest,
    save_pseudo_mask,
    write_pseudo_labels,
)
from .losses import (
    CLAMP_EPS,
    LossBreakdown,
    RepresentationBundle,
    cosine_sim,
    neg_losses,
    pos_losses,
    reg_loss,
    total_loss,
)
from .models import (
    ClassProjector,
    ModelSet,
    MultiClassTokenBackbone,
    PatchAttentionHead,
    TokenBundle,
    batch_to_tensors,
    build_models,
    face_to_tensor,
    forward_backbone,
    patch_attention,
    project_class,
    reseed_parameters,
)
from .rng import seeded_rng, substream, torch_generator
from .schema import (
    BUILTIN_SCHEMAS,
    ComponentSchema,
    LabeledFace,
    SegMask,
    celebamask_hq_schema,
    get_schema,
    lapa_schema,
    synthetic_face_schema,
)
from .segnet import SegNet, predict, train_parser
from .synthetic import (
    ShapeSpec,
    SyntheticFaceSpec,
    default_synthetic_spec,
    generate_synthetic,
    iter_synthetic,
    load_spec,
    sample_presence,
    save_spec,
)
from .training import TrainResult, compute_batch_loss, load_checkpoint, save_checkpoint, train_stage1
from .vl import (
    PROMPT_TEMPLATE,
    AvgPoolImageEncoder,
    GridPoolImageEncoder,
    OrthogonalTextEncoder,
    PrototypeTextEncoder,
    VLEncoderPair,
    component_prompt,
    encode_components,
    encode_prompts,
)

__version__ = "0.1.0"
