"""Vocabulary selection and tf-idf vectorization from expected counts.

Words are pruned by length and expected document frequency, ranked by
information gain against the class partition, and the top n become the
feature dimensions. A unit (document or page) is then represented by
normalized expected term frequencies weighted with inverse document
frequency, optionally standardized to zero mean and unit variance.

Conventions fixed here:

* Natural logarithm everywhere (information gain and idf). Base only
  rescales scores; rankings and post-standardization classifier inputs are
  unchanged.
* The information-gain score keeps only the two word-dependent addends
  (presence and absence), so it is always <= 0 and larger means more
  informative; the word-independent class-prior entropy is dropped.
* 0 * log 0 := 0; a conditional slice with zero mass contributes nothing.
* Term frequencies are normalized by the unit's expected running words over
  the FULL pruned vocabulary, not just the n selected words, so tf values
  over the pruned vocabulary sum to 1.
* idf(v) = log(M / doc_freq(v)) with no smoothing; pruning guarantees the
  denominator is at least the document-frequency floor.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from functools import cached_property
from math import fsum, log
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from prix_classify.expectation import ExpectationTable, FoldView, WordStat

logger = logging.getLogger(__name__)

SPEC_FORMAT = "prix-feature-spec"
SPEC_VERSION = 1
VECTORS_FORMAT = "prix-vectors"
VECTORS_VERSION = 1

DEFAULT_MIN_CHARS = 3
DEFAULT_MIN_DOC_FREQ = 1.0

_COUNT_TOL = 1e-9


def _as_view(stats):
    """Wrap a bare table in a no-exclusion view; anything already offering
    the view protocol (doc_freq, class_doc_freq, num_docs, ...) passes
    through unchanged."""
    if isinstance(stats, ExpectationTable):
        return FoldView(stats)
    return stats


@dataclass(frozen=True)
class VocabEntry:
    """One retained word with its selection score and idf weight."""

    word: str
    ig_score: float
    doc_freq: float
    idf: float


@dataclass
class DocVector:
    """Feature vector for one unit (document or page)."""

    unit_id: str
    values: np.ndarray
    label: str | None = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if not np.all(np.isfinite(self.values)):
            raise ValueError(f"non-finite feature values for unit {self.unit_id!r}")


def information_gain_from_counts(
    f_t: float,
    f_per_class: Sequence[float],
    num_docs: float,
    docs_per_class: Sequence[float],
) -> float:
    """Word-dependent information-gain addends from (possibly fractional)
    presence counts.

    f_t is the number of documents containing the word, f_per_class the same
    split by class (aligned with docs_per_class). Counts may be expectations,
    hence fractional. Raises if counts are inconsistent beyond rounding
    tolerance, which signals a corrupted statistics table.
    """
    m = float(num_docs)
    if f_t < 0.0 or f_t > m * (1.0 + _COUNT_TOL):
        raise ValueError(f"presence count {f_t} outside [0, {m}]")
    for f_c in f_per_class:
        if f_c < 0.0 or f_c > f_t * (1.0 + _COUNT_TOL) + _COUNT_TOL:
            raise ValueError(f"class presence count {f_c} exceeds total {f_t}")
    p_t = f_t / m
    p_not = (m - f_t) / m
    s_t = 0.0
    if f_t > 0.0:
        for f_c in f_per_class:
            p = f_c / f_t
            if p > 0.0:
                s_t += p * log(p)
    s_not = 0.0
    f_not = m - f_t
    if f_not > 0.0:
        for m_c, f_c in zip(docs_per_class, f_per_class):
            p = (m_c - f_c) / f_not
            if p > 0.0:
                s_not += p * log(p)
    return p_t * s_t + p_not * s_not


def information_gain(word: str, stats) -> float:
    """Information-gain score of one word over a table or fold view."""
    view = _as_view(stats)
    per_class = view.class_doc_freq(word)
    return information_gain_from_counts(
        view.doc_freq(word),
        [per_class.get(c, 0.0) for c in view.classes],
        view.num_docs,
        [view.class_counts[c] for c in view.classes],
    )


def prune_vocabulary(
    stats, min_chars: int = DEFAULT_MIN_CHARS, min_doc_freq: float = DEFAULT_MIN_DOC_FREQ
) -> list[str]:
    """Words meeting the length and document-frequency floors, sorted
    lexicographically."""
    view = _as_view(stats)
    pruned = [
        w
        for w in view.vocabulary()
        if len(w) >= min_chars and view.doc_freq(w) >= min_doc_freq
    ]
    if not pruned:
        logger.warning("pruning removed every word (min_chars=%d, min_doc_freq=%g)",
                       min_chars, min_doc_freq)
    return pruned


def select_vocabulary(pruned: Sequence[str], scores: Mapping[str, float], n: int) -> list[str]:
    """Top-n words by score, descending, ties broken lexicographically."""
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    ranked = sorted(pruned, key=lambda w: (-scores[w], w))
    if n > len(ranked):
        logger.warning("requested n=%d exceeds %d available words; keeping all",
                       n, len(ranked))
        return ranked
    return ranked[:n]


def rank_vocabulary(
    stats, min_chars: int = DEFAULT_MIN_CHARS, min_doc_freq: float = DEFAULT_MIN_DOC_FREQ
) -> list[VocabEntry]:
    """Prune, score and rank the whole vocabulary (information gain
    descending, ties lexicographic)."""
    view = _as_view(stats)
    m = view.num_docs
    docs_per_class = [view.class_counts[c] for c in view.classes]
    entries = []
    for word in prune_vocabulary(view, min_chars, min_doc_freq):
        df = view.doc_freq(word)
        per_class = view.class_doc_freq(word)
        ig = information_gain_from_counts(
            df, [per_class.get(c, 0.0) for c in view.classes], m, docs_per_class
        )
        entries.append(VocabEntry(word=word, ig_score=ig, doc_freq=df, idf=log(m / df)))
    entries.sort(key=lambda e: (-e.ig_score, e.word))
    return entries


@dataclass
class FeatureSpec:
    """Frozen artifact of a fitted feature pipeline.

    `ranked` holds the full pruned vocabulary in selection order; the first
    `n` entries are the feature dimensions. Standardization statistics are
    attached by :func:`fit_standardizer` via :meth:`with_standardizer`.
    """

    ranked: list[VocabEntry]
    n: int
    num_docs: int
    classes: list[str]
    class_counts: dict[str, int]
    min_chars: int = DEFAULT_MIN_CHARS
    min_doc_freq: float = DEFAULT_MIN_DOC_FREQ
    mean: np.ndarray | None = None
    std: np.ndarray | None = None

    @property
    def vocabulary(self) -> list[VocabEntry]:
        """The n selected entries, information gain descending."""
        return self.ranked[: self.n]

    @cached_property
    def pruned_words(self) -> frozenset[str]:
        return frozenset(e.word for e in self.ranked)

    @cached_property
    def idf_values(self) -> np.ndarray:
        return np.array([e.idf for e in self.vocabulary], dtype=np.float64)

    def with_standardizer(self, mean: np.ndarray, std: np.ndarray) -> "FeatureSpec":
        spec = FeatureSpec(
            ranked=self.ranked,
            n=self.n,
            num_docs=self.num_docs,
            classes=self.classes,
            class_counts=self.class_counts,
            min_chars=self.min_chars,
            min_doc_freq=self.min_doc_freq,
            mean=np.asarray(mean, dtype=np.float64),
            std=np.asarray(std, dtype=np.float64),
        )
        return spec

    def transform(self, values: np.ndarray) -> np.ndarray:
        """Apply the frozen standardization statistics."""
        if self.mean is None or self.std is None:
            raise ValueError("standardizer not fitted")
        return (np.asarray(values, dtype=np.float64) - self.mean) / self.std


def fit_feature_spec(
    stats,
    n: int,
    min_chars: int = DEFAULT_MIN_CHARS,
    min_doc_freq: float = DEFAULT_MIN_DOC_FREQ,
    ranked: list[VocabEntry] | None = None,
) -> FeatureSpec:
    """Fit a feature spec on the given statistics.

    `ranked` may pass a precomputed :func:`rank_vocabulary` result so a grid
    of n values shares one ranking. n larger than the pruned vocabulary is
    clamped with a warning.
    """
    view = _as_view(stats)
    if ranked is None:
        ranked = rank_vocabulary(view, min_chars, min_doc_freq)
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    if n > len(ranked):
        logger.warning("n=%d exceeds pruned vocabulary size %d; clamped", n, len(ranked))
        n = len(ranked)
    return FeatureSpec(
        ranked=ranked,
        n=n,
        num_docs=view.num_docs,
        classes=list(view.classes),
        class_counts=dict(view.class_counts),
        min_chars=min_chars,
        min_doc_freq=min_doc_freq,
    )


def tfidf_values(unit_stats: Mapping[str, WordStat], spec: FeatureSpec) -> np.ndarray:
    """Raw (unstandardized) tf-idf values of one unit over spec.vocabulary.

    The tf normalizer is the unit's expected running words over the full
    pruned vocabulary. An empty unit yields the zero vector with a warning.
    """
    denom = fsum(
        stat.sum_rp for word, stat in unit_stats.items() if word in spec.pruned_words
    )
    values = np.zeros(spec.n, dtype=np.float64)
    if denom == 0.0:
        logger.warning("unit has no in-vocabulary content; emitting a zero vector")
        return values
    for i, entry in enumerate(spec.vocabulary):
        stat = unit_stats.get(entry.word)
        if stat is not None:
            values[i] = (stat.sum_rp / denom) * entry.idf
    return values


def tfidf_vector(
    unit_id: str,
    spec: FeatureSpec,
    stats,
    granularity: str = "document",
    label: str | None = None,
) -> DocVector:
    """tf-idf vector of one document or page identified in the statistics."""
    view = _as_view(stats)
    if granularity == "document":
        unit_stats = view.doc_word_stats(unit_id)
        if label is None:
            label = view.table.doc_class.get(unit_id)
    elif granularity == "page":
        unit_stats = view.page_word_stats(unit_id)
        if label is None:
            label = view.table.doc_class.get(view.table.page_doc[unit_id])
    else:
        raise ValueError(f"unknown granularity {granularity!r}")
    return DocVector(unit_id=unit_id, values=tfidf_values(unit_stats, spec), label=label)


def fit_standardizer(vectors) -> tuple[np.ndarray, np.ndarray]:
    """Per-feature population mean and standard deviation of a fitting set.

    Zero-variance dimensions get std := 1 so they standardize to constant 0.
    Requires at least two vectors.
    """
    if isinstance(vectors, np.ndarray):
        matrix = np.asarray(vectors, dtype=np.float64)
    else:
        matrix = np.stack([np.asarray(v.values, dtype=np.float64) for v in vectors])
    if matrix.ndim != 2 or matrix.shape[0] < 2:
        raise ValueError("standardizer needs at least 2 vectors")
    mean = matrix.mean(axis=0)
    std = matrix.std(axis=0)
    std = np.where(std == 0.0, 1.0, std)
    return mean, std


def save_feature_specs(specs: Sequence[FeatureSpec], path) -> None:
    """Serialize fitted specs that share one vocabulary ranking.

    The file keeps the full pruned vocabulary with its scores (so reports
    can list the most informative words) plus one (n, standardizer) block
    per spec.
    """
    if not specs:
        raise ValueError("need at least one spec")
    first = specs[0]
    for spec in specs[1:]:
        if spec.ranked is not first.ranked and spec.ranked != first.ranked:
            raise ValueError("specs in one file must share the same ranking")
    payload = {
        "format": SPEC_FORMAT,
        "version": SPEC_VERSION,
        "min_chars": first.min_chars,
        "min_doc_freq": first.min_doc_freq,
        "num_docs": first.num_docs,
        "classes": first.classes,
        "class_counts": first.class_counts,
        "vocabulary": [
            {"word": e.word, "ig_score": e.ig_score, "doc_freq": e.doc_freq, "idf": e.idf}
            for e in first.ranked
        ],
        "specs": [
            {
                "n": spec.n,
                "mean": spec.mean.tolist() if spec.mean is not None else None,
                "std": spec.std.tolist() if spec.std is not None else None,
            }
            for spec in specs
        ],
    }
    Path(path).write_text(
        json.dumps(payload, ensure_ascii=False, separators=(",", ":")), encoding="utf-8"
    )


def load_feature_specs(path) -> list[FeatureSpec]:
    payload = json.loads(Path(path).read_text(encoding="utf-8"))
    if payload.get("format") != SPEC_FORMAT or payload.get("version") != SPEC_VERSION:
        raise ValueError(f"not a supported feature-spec file: {path}")
    ranked = [
        VocabEntry(
            word=e["word"], ig_score=e["ig_score"], doc_freq=e["doc_freq"], idf=e["idf"]
        )
        for e in payload["vocabulary"]
    ]
    specs = []
    for block in payload["specs"]:
        spec = FeatureSpec(
            ranked=ranked,
            n=block["n"],
            num_docs=payload["num_docs"],
            classes=list(payload["classes"]),
            class_counts=dict(payload["class_counts"]),
            min_chars=payload["min_chars"],
            min_doc_freq=payload["min_doc_freq"],
            mean=np.array(block["mean"], dtype=np.float64) if block["mean"] is not None else None,
            std=np.array(block["std"], dtype=np.float64) if block["std"] is not None else None,
        )
        specs.append(spec)
    return specs


def save_vectors(vectors: Sequence[DocVector], path, granularity: str, n: int) -> None:
    """Standardized unit vectors ready for classifier training."""
    payload = {
        "format": VECTORS_FORMAT,
        "version": VECTORS_VERSION,
        "granularity": granularity,
        "n": n,
        "vectors": [
            {"unit_id": v.unit_id, "label": v.label, "values": v.values.tolist()}
            for v in vectors
        ],
    }
    Path(path).write_text(
        json.dumps(payload, ensure_ascii=False, separators=(",", ":")), encoding="utf-8"
    )


def load_vectors(path) -> tuple[list[DocVector], dict]:
    payload = json.loads(Path(path).read_text(encoding="utf-8"))
    if payload.get("format") != VECTORS_FORMAT or payload.get("version") != VECTORS_VERSION:
        raise ValueError(f"not a supported vectors file: {path}")
    vectors = [
        DocVector(unit_id=v["unit_id"], values=np.array(v["values"]), label=v["label"])
        for v in payload["vectors"]
    ]
    meta = {"granularity": payload["granularity"], "n": payload["n"]}
    return vectors, meta
