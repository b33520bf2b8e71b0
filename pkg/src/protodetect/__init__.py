"""Dual-metric nearest-prototype adversarial detection over simplex embeddings.

The detector classifies an embedding with two independent heads, KL
divergence and a thresholded-L0 count, and flags an attack whenever they
disagree. The theorem machinery certifies, per sample and budget, that no
single perturbation can flip both heads toward the same wrong class; the
attack module tries anyway, which is the empirical check.
"""

from .attack import (
    AttackResult,
    ConstrainedMaxProblem,
    brute_force_max,
    craft_attacked_dataset,
    forced_min_bounds,
    search_dual_flip,
    solve_closed_form,
)
from .classifier import (
    DEFAULT_HEADS,
    DetectionOutcome,
    Head,
    HeadSelection,
    PrototypeSet,
    detect,
    detect_dataset,
    fit_prototypes,
    predict_head,
)
from .core import (
    AssumptionVerdict,
    EmbeddingDataset,
    LabeledEmbedding,
    Perturbation,
    as_simplex,
    is_simplex,
    normalize_to_simplex,
    validate_assumptions,
)
from .dataio import read_dataset, read_prototypes, write_dataset, write_prototypes
from .errors import (
    DimensionError,
    FitError,
    FormatError,
    GammaUndefined,
    Infeasible,
    InvalidInput,
    ProtodetectError,
    TrainError,
)
from .evaluation import ConfusionCounts, MetricReport, Score, aggregate, evaluate_split, score_sample
from .fixtures import (
    CONFUSION_CASES,
    METRIC_CASES,
    FixtureCase,
    generate_gaussian_clusters,
    generate_separable_instance,
)
from .metrics import (
    L0Params,
    cosine_similarity,
    kl_divergence,
    l0_distance,
    mean_abs_gap,
    sim_kl,
    sim_l0,
    smooth_l0,
)
from .theorem import (
    ComplianceReport,
    ExclusionPartition,
    FlipContext,
    KLFlipQuantities,
    L0FlipQuantities,
    build_partition,
    classify_compliance,
    compute_kl_flip,
    compute_l0_flip,
    gamma_threshold,
    kl_flip_lhs,
    tau_condition_holds,
)
from .training import (
    EncoderParams,
    Gradient,
    TrainConfig,
    clean_agreement,
    forward,
    grad_loss,
    loss_components,
    loss_total,
    read_encoder,
    train,
    write_encoder,
)

__version__ = "0.1.0"

__all__ = [
    "AssumptionVerdict",
    "AttackResult",
    "CONFUSION_CASES",
    "ComplianceReport",
    "ConfusionCounts",
    "ConstrainedMaxProblem",
    "DEFAULT_HEADS",
    "DetectionOutcome",
    "DimensionError",
    "EmbeddingDataset",
    "EncoderParams",
    "ExclusionPartition",
    "FitError",
    "FixtureCase",
    "FlipContext",
    "FormatError",
    "GammaUndefined",
    "Gradient",
    "Head",
    "HeadSelection",
    "Infeasible",
    "InvalidInput",
    "KLFlipQuantities",
    "L0FlipQuantities",
    "L0Params",
    "LabeledEmbedding",
    "METRIC_CASES",
    "MetricReport",
    "Perturbation",
    "ProtodetectError",
    "PrototypeSet",
    "Score",
    "TrainConfig",
    "TrainError",
    "aggregate",
    "as_simplex",
    "brute_force_max",
    "build_partition",
    "classify_compliance",
    "clean_agreement",
    "compute_kl_flip",
    "compute_l0_flip",
    "cosine_similarity",
    "craft_attacked_dataset",
    "detect",
    "detect_dataset",
    "evaluate_split",
    "fit_prototypes",
    "forced_min_bounds",
    "forward",
    "gamma_threshold",
    "generate_gaussian_clusters",
    "generate_separable_instance",
    "grad_loss",
    "is_simplex",
    "kl_divergence",
    "kl_flip_lhs",
    "l0_distance",
    "loss_components",
    "loss_total",
    "mean_abs_gap",
    "normalize_to_simplex",
    "predict_head",
    "read_dataset",
    "read_encoder",
    "read_prototypes",
    "score_sample",
    "search_dual_flip",
    "sim_kl",
    "sim_l0",
    "smooth_l0",
    "solve_closed_form",
    "tau_condition_holds",
    "train",
    "validate_assumptions",
    "write_dataset",
    "write_encoder",
    "write_prototypes",
    "__version__",
]
