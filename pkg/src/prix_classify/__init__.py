"""Classify multi-page handwritten-text-image documents by textual content.

The pipeline never transcribes anything: it consumes probabilistic word
indexes (one relevance probability per spotted pseudo-word), turns them into
statistical expectations of word and document frequencies, selects a
vocabulary by information gain, builds tf-idf vectors, and trains small MLP
classifiers evaluated with leave-one-out and per-document page voting.
"""

from prix_classify.ingest import (
    Collection,
    Document,
    DocumentManifest,
    ManifestEntry,
    PrixFormatError,
    PrixPage,
    PrixRecord,
    load_collection,
    parse_manifest,
    parse_prix_file,
    parse_prix_files,
    save_collection,
    validate_collection,
)
from prix_classify.expectation import (
    ExpectationTable,
    FoldView,
    build_expectation_table,
    expected_doc_frequency,
    expected_doc_words,
    expected_page_words,
    expected_word_freq,
)
from prix_classify.features import (
    DocVector,
    FeatureSpec,
    VocabEntry,
    fit_feature_spec,
    fit_standardizer,
    information_gain,
    prune_vocabulary,
    rank_vocabulary,
    select_vocabulary,
    tfidf_vector,
)
from prix_classify.classifier import (
    MlpArchitecture,
    MlpModel,
    TrainConfig,
    TrainingDivergedError,
    forward,
    init_model,
    param_count,
    predict,
    train,
)
from prix_classify.evaluation import (
    LooResult,
    Prediction,
    confidence_interval,
    confusion_matrix,
    report,
    run_loo,
    vote_documents,
)
from prix_classify.synth import SynthConfig, SynthCorpus, generate, plain_text_oracle

__version__ = "0.1.0"

__all__ = [
    "Collection",
    "Document",
    "DocumentManifest",
    "DocVector",
    "ExpectationTable",
    "FeatureSpec",
    "FoldView",
    "LooResult",
    "ManifestEntry",
    "MlpArchitecture",
    "MlpModel",
    "Prediction",
    "PrixFormatError",
    "PrixPage",
    "PrixRecord",
    "SynthConfig",
    "SynthCorpus",
    "TrainConfig",
    "TrainingDivergedError",
    "VocabEntry",
    "__version__",
    "build_expectation_table",
    "confidence_interval",
    "confusion_matrix",
    "expected_doc_frequency",
    "expected_doc_words",
    "expected_page_words",
    "expected_word_freq",
    "fit_feature_spec",
    "fit_standardizer",
    "forward",
    "generate",
    "information_gain",
    "init_model",
    "load_collection",
    "param_count",
    "parse_manifest",
    "parse_prix_file",
    "parse_prix_files",
    "plain_text_oracle",
    "predict",
    "prune_vocabulary",
    "rank_vocabulary",
    "report",
    "run_loo",
    "save_collection",
    "select_vocabulary",
    "tfidf_vector",
    "train",
    "validate_collection",
    "vote_documents",
]
