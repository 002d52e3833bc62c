"""DataEvolver: closed-loop, multi-artifact visual data construction engine.

A dataset request becomes a persistent artifact graph in a content-addressed
store. A generation-time inner loop reviews each render through CV and VLM
channels, applies bounded corrective actions under safety filters, and
routes samples to explicit verdicts. A validation-time outer loop evaluates
rounds per angle bin, targets weak subsets for expansion, gates what enters
training, and guards against metric regressions. Exports are quality-gated,
object-disjoint, and fully traceable back to their construction history.
"""

from .actions import (
    ActionProgram,
    ImageEndpoints,
    SamplingMode,
    VideoDense,
    parse_program,
    print_program,
    sample_states,
    validate_program,
)
from .config import EngineConfig, default_config_document, load_config
from .engine import Engine
from .export_eval import (
    EngineReport,
    PairManifestRow,
    SplitSpec,
    build_splits,
    engine_report,
    export_image_pairs,
    export_other,
    normalize_direction,
    psnr,
    ssim,
    vie_overall,
)
from .inner_loop import InnerLoop, InnerLoopResult, LoopConfig, LoopStatus
from .outer_loop import (
    PerAngleTable,
    RoundConfig,
    RoundVerdict,
    apply_gates,
    evaluate_round,
    find_weak_subsets,
    plan_expansion,
    round_verdict,
)
from .review import (
    CvSignals,
    HybridScore,
    RemoteReviewer,
    ReviewConfig,
    SampleRoute,
    ScriptedReviewer,
    VlmReview,
    aggregate_views,
    cv_review,
    hybrid_score,
    route,
)
from .scene import (
    CorrectiveAction,
    DefectSpec,
    QualityVector,
    RenderBundle,
    SceneState,
    apply_action,
    inject_defects,
    render,
    true_quality,
)
from .store import ArtifactId, ArtifactKind, ArtifactStore, SampleRecord

__version__ = "0.1.0"

__all__ = [
    "ActionProgram", "ImageEndpoints", "SamplingMode", "VideoDense",
    "parse_program", "print_program", "sample_states", "validate_program",
    "EngineConfig", "default_config_document", "load_config", "Engine",
    "EngineReport", "PairManifestRow", "SplitSpec", "build_splits",
    "engine_report", "export_image_pairs", "export_other",
    "normalize_direction", "psnr", "ssim", "vie_overall",
    "InnerLoop", "InnerLoopResult", "LoopConfig", "LoopStatus",
    "PerAngleTable", "RoundConfig", "RoundVerdict", "apply_gates",
    "evaluate_round", "find_weak_subsets", "plan_expansion", "round_verdict",
    "CvSignals", "HybridScore", "RemoteReviewer", "ReviewConfig",
    "SampleRoute", "ScriptedReviewer", "VlmReview", "aggregate_views",
    "cv_review", "hybrid_score", "route",
    "CorrectiveAction", "DefectSpec", "QualityVector", "RenderBundle",
    "SceneState", "apply_action", "inject_defects", "render", "true_quality",
    "ArtifactId", "ArtifactKind", "ArtifactStore", "SampleRecord",
]
