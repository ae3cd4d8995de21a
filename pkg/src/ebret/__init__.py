"""Energy-based retrieval over subsets of knowledge pieces.

A factored per-piece relevance model proposes candidate subsets; an energy
scorer ranks whole subsets at once, trained by Monte Carlo maximum
likelihood (importance sampling or Metropolis independence sampling) and
verifiable against exact enumeration at small KB sizes. A semi-supervised
stage trains the response generator and subset-inference model on mixed
labeled/unlabeled dialogs with a persistent turn-level sampler.
"""

__version__ = "0.1.0"

from .corpus import (
    KnowledgeBase,
    KnowledgePiece,
    Session,
    SubsetMask,
    SyntheticConfig,
    Turn,
    Vocab,
    build_vocab,
    encode_corpus,
    encode_session,
    generate_synthetic,
    load_jsonl,
    save_jsonl,
    strip_labels,
)
from .errors import (
    ConfigError,
    DataError,
    DimensionError,
    EbretError,
    EstimatorError,
    ModeError,
    ScaleError,
    WeightSourceError,
)

__all__ = [
    "KnowledgeBase",
    "KnowledgePiece",
    "Session",
    "SubsetMask",
    "SyntheticConfig",
    "Turn",
    "Vocab",
    "build_vocab",
    "encode_corpus",
    "encode_session",
    "generate_synthetic",
    "load_jsonl",
    "save_jsonl",
    "strip_labels",
    "ConfigError",
    "DataError",
    "DimensionError",
    "EbretError",
    "EstimatorError",
    "ModeError",
    "ScaleError",
    "WeightSourceError",
]
