"""Training-data attribution and royalty settlement for symbolic music.

The package covers the full path from Standard MIDI Files to money: a
388-event performance vocabulary, a small autoregressive transformer in
plain numpy, gradient-projection attribution scores validated against an
exact retraining oracle, rank-correlation and style-similarity evaluation,
and integer-cent royalty statements driven by the scores.
"""

from ._seeds import derive_seed
from .attribution import (
    SIGN_CONVENTION,
    AttributionIndex,
    AttributionMatrix,
    AttributionTarget,
    IndexMember,
    attribute_targets,
    exact_influence,
    fit_attribution_index,
    load_scores,
    random_baseline_scores,
    retrain_without,
    save_scores,
    score_events,
    score_segment,
    scores_to_csv,
)
from .errors import (
    ConservationError,
    DimensionMismatch,
    EmptyContext,
    EmptyCorpus,
    EmptyCorpusAfterRemoval,
    EmptyInput,
    EmptyPrompt,
    FormatError,
    InvalidConfig,
    LengthMismatch,
    MalformedHeader,
    MidiError,
    MissingArtifact,
    MusetraceError,
    NegativeAmount,
    NonFiniteLoss,
    SingularKernel,
    TruncatedChunk,
    UnsupportedFormat,
)
from .evaluation import (
    FEATURE_NAMES,
    StyleFeatures,
    SubsetPlan,
    lds_evaluate,
    make_subset_plan,
    pearson_correlation,
    spearman_rank_correlation,
    style_features,
    style_similarity_by_rank,
)
from .midi import (
    DEFAULT_LAYOUT,
    Corpus,
    Note,
    NoteSequence,
    VocabularyLayout,
    WindowRecord,
    detokenize,
    make_training_windows,
    parse_midi,
    read_corpus,
    tokenize,
    write_corpus,
)
from .model import (
    ModelCheckpoint,
    ModelConfig,
    SamplingSettings,
    TrainingExample,
    TrainSettings,
    corpus_fingerprint,
    event_gradient_matrix,
    generate,
    init_model,
    load_checkpoint,
    next_event_distribution,
    params_hash,
    per_example_gradient,
    save_checkpoint,
    segment_feature,
    sequence_log_likelihood,
    train,
)
from .pipeline import ArtifactPaths, load_config, load_targets
from .royalty import (
    PLATFORM_ID,
    UNATTRIBUTED_ID,
    RevenuePool,
    RoyaltyStatement,
    UsageEvent,
    attribution_weights,
    build_pools,
    count_eligible_streams,
    pro_rata_allocation,
    read_usage_log,
    settle,
    statement_audit_json,
    statement_to_csv,
)

__version__ = "0.1.0"

__all__ = [
    "derive_seed",
    # attribution
    "SIGN_CONVENTION", "AttributionIndex", "AttributionMatrix",
    "AttributionTarget", "IndexMember", "attribute_targets",
    "exact_influence", "fit_attribution_index", "load_scores",
    "random_baseline_scores", "retrain_without", "save_scores",
    "score_events", "score_segment", "scores_to_csv",
    # errors
    "ConservationError", "DimensionMismatch", "EmptyContext", "EmptyCorpus",
    "EmptyCorpusAfterRemoval", "EmptyInput", "EmptyPrompt", "FormatError",
    "InvalidConfig", "LengthMismatch", "MalformedHeader", "MidiError",
    "MissingArtifact", "MusetraceError", "NegativeAmount", "NonFiniteLoss",
    "SingularKernel", "TruncatedChunk", "UnsupportedFormat",
    # evaluation
    "FEATURE_NAMES", "StyleFeatures", "SubsetPlan", "lds_evaluate",
    "make_subset_plan", "pearson_correlation", "spearman_rank_correlation",
    "style_features", "style_similarity_by_rank",
    # midi
    "DEFAULT_LAYOUT", "Corpus", "Note", "NoteSequence", "VocabularyLayout",
    "WindowRecord", "detokenize", "make_training_windows", "parse_midi",
    "read_corpus", "tokenize", "write_corpus",
    # model
    "ModelCheckpoint", "ModelConfig", "SamplingSettings", "TrainingExample",
    "TrainSettings", "corpus_fingerprint", "event_gradient_matrix",
    "generate", "init_model", "load_checkpoint", "next_event_distribution",
    "params_hash", "per_example_gradient", "save_checkpoint",
    "segment_feature", "sequence_log_likelihood", "train",
    # pipeline
    "ArtifactPaths", "load_config", "load_targets",
    # royalty
    "PLATFORM_ID", "UNATTRIBUTED_ID", "RevenuePool", "RoyaltyStatement",
    "UsageEvent", "attribution_weights", "build_pools",
    "count_eligible_streams", "pro_rata_allocation", "read_usage_log",
    "settle", "statement_audit_json", "statement_to_csv",
]
