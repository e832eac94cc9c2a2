"""Synthetic index collections with known ground truth.

Every document gets a class-dependent mixture of text: a fraction
``signature_prob`` of each page's word slots carries the class's signature
words (which appear in no other class's true text), spread as evenly as
possible over the signature set the way formulaic phrases recur in every
document of a type; the remaining slots are filler words Zipf-sampled from
the shared vocabulary. Each true word occurrence becomes an index spot
whose relevance probability is Beta-distributed (or exactly 1.0 in the
noise-free limit), and per page a number of false spots draw uniform random
vocabulary words with low Beta-distributed probabilities.

The true page texts are emitted alongside the index so the plain-text
oracle never has to re-derive them. With relevance probability 1.0 and no
false spots the index is just the text, and the whole expectation-based
pipeline must reproduce the oracle exactly, intermediate by intermediate.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from math import log
from pathlib import Path

import numpy as np

from prix_classify.classifier import MlpArchitecture, TrainConfig, init_model, predict, train
from prix_classify.evaluation import LooResult, Prediction, build_result
from prix_classify.ingest import Collection, Document, PrixPage, PrixRecord

logger = logging.getLogger(__name__)

SYNTH_CONFIG_FORMAT = "prix-synth-config"


@dataclass
class SynthConfig:
    """Shape and noise parameters of a generated collection.

    docs_per_class gives one document count per class, so unbalanced
    collections (down to singleton classes) can be produced.
    true_rp_beta=None makes every true spot probability exactly 1.0.
    """

    num_classes: int
    docs_per_class: list[int]
    pages_per_doc: tuple[int, int]
    words_per_page: tuple[int, int]
    vocab_size: int
    signatures_per_class: int
    signature_prob: float
    noise_words_per_page: tuple[int, int] = (0, 0)
    true_rp_beta: tuple[float, float] | None = (8.0, 2.0)
    false_rp_beta: tuple[float, float] = (2.0, 8.0)
    zipf_exponent: float = 1.2
    seed: int = 0
    class_names: list[str] | None = None

    def __post_init__(self):
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if len(self.docs_per_class) != self.num_classes:
            raise ValueError("docs_per_class must list one count per class")
        if any(k < 1 for k in self.docs_per_class):
            raise ValueError("every class needs at least one document")
        for name, (lo, hi) in (
            ("pages_per_doc", self.pages_per_doc),
            ("words_per_page", self.words_per_page),
        ):
            if lo < 1 or hi < lo:
                raise ValueError(f"{name} range ({lo}, {hi}) is invalid")
        lo, hi = self.noise_words_per_page
        if lo < 0 or hi < lo:
            raise ValueError("noise_words_per_page range is invalid")
        if not (0.0 <= self.signature_prob <= 1.0):
            raise ValueError("signature_prob must be in [0, 1]")
        if self.signatures_per_class < 0:
            raise ValueError("signatures_per_class must be >= 0")
        if self.vocab_size < 1:
            raise ValueError("vocab_size must be >= 1")
        reserved = self.num_classes * self.signatures_per_class
        if reserved > self.vocab_size:
            raise ValueError(
                f"{reserved} signature words exceed vocabulary size {self.vocab_size}"
            )
        if self.class_names is not None and len(self.class_names) != self.num_classes:
            raise ValueError("class_names must list one name per class")

    @classmethod
    def from_json(cls, path) -> "SynthConfig":
        payload = json.loads(Path(path).read_text(encoding="utf-8"))
        payload.pop("format", None)
        for key in ("pages_per_doc", "words_per_page", "noise_words_per_page",
                    "true_rp_beta", "false_rp_beta"):
            if payload.get(key) is not None:
                payload[key] = tuple(payload[key])
        return cls(**payload)

    def to_json(self, path) -> None:
        payload = {"format": SYNTH_CONFIG_FORMAT}
        payload.update(
            {
                "num_classes": self.num_classes,
                "docs_per_class": list(self.docs_per_class),
                "pages_per_doc": list(self.pages_per_doc),
                "words_per_page": list(self.words_per_page),
                "vocab_size": self.vocab_size,
                "signatures_per_class": self.signatures_per_class,
                "signature_prob": self.signature_prob,
                "noise_words_per_page": list(self.noise_words_per_page),
                "true_rp_beta": list(self.true_rp_beta) if self.true_rp_beta else None,
                "false_rp_beta": list(self.false_rp_beta),
                "zipf_exponent": self.zipf_exponent,
                "seed": self.seed,
                "class_names": self.class_names,
            }
        )
        Path(path).write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")


@dataclass
class SynthCorpus:
    collection: Collection
    truths: dict[str, list[str]]  # page_id -> true words, in written order
    config: SynthConfig
    signature_words: dict[str, list[str]] = field(default_factory=dict)

    def write(self, outdir) -> dict[str, Path]:
        """Emit ingestible index + manifest files and the true page texts."""
        outdir = Path(outdir)
        outdir.mkdir(parents=True, exist_ok=True)
        prix_path = outdir / "prix.tsv"
        manifest_path = outdir / "manifest.tsv"
        truth_path = outdir / "truth.tsv"
        with open(prix_path, "w", encoding="utf-8") as fh:
            fh.write("# synthetic probabilistic index\n")
            for doc in self.collection.documents:
                for page in doc.pages:
                    for record in page.records:
                        fh.write(
                            f"{page.page_id}\t{record.pseudo_word}\t{record.relevance_prob!r}\n"
                        )
        with open(manifest_path, "w", encoding="utf-8") as fh:
            fh.write("@classes\t" + ",".join(self.collection.classes) + "\n")
            for doc in self.collection.documents:
                pages = ",".join(p.page_id for p in doc.pages)
                fh.write(f"{doc.doc_id}\t{doc.class_label}\t{pages}\n")
        with open(truth_path, "w", encoding="utf-8") as fh:
            for doc in self.collection.documents:
                for page in doc.pages:
                    fh.write(f"{page.page_id}\t{' '.join(self.truths[page.page_id])}\n")
        return {"prix": prix_path, "manifest": manifest_path, "truth": truth_path}


def load_truths(path) -> dict[str, list[str]]:
    truths = {}
    with open(path, encoding="utf-8") as fh:
        for raw in fh:
            line = raw.rstrip("\r\n")
            if not line.strip() or line.startswith("#"):
                continue
            page_id, _, text = line.partition("\t")
            truths[page_id] = text.split() if text else []
    return truths


def _clamp_prob(value: float) -> float:
    return min(max(value, 1e-12), 1.0)


def generate(config: SynthConfig) -> SynthCorpus:
    """Deterministically generate a collection for the given config."""
    rng = np.random.default_rng(config.seed)
    classes = config.class_names or [f"class{c:02d}" for c in range(config.num_classes)]
    signatures = {
        classes[c]: [f"sig{c:02d}w{j:02d}" for j in range(config.signatures_per_class)]
        for c in range(config.num_classes)
    }
    reserved = [w for c in range(config.num_classes) for w in signatures[classes[c]]]
    fillers = [f"word{i:05d}" for i in range(config.vocab_size - len(reserved))]
    vocab = reserved + fillers
    if fillers:
        ranks = np.arange(1, len(fillers) + 1, dtype=np.float64)
        zipf = ranks ** (-config.zipf_exponent)
        zipf /= zipf.sum()

    documents = []
    truths: dict[str, list[str]] = {}
    for c, label in enumerate(classes):
        sigs = signatures[label]
        for d in range(config.docs_per_class[c]):
            doc_id = f"{label}_d{d:03d}"
            num_pages = int(rng.integers(config.pages_per_doc[0], config.pages_per_doc[1] + 1))
            pages = []
            for p in range(num_pages):
                page_id = f"{doc_id}_p{p:02d}"
                length = int(
                    rng.integers(config.words_per_page[0], config.words_per_page[1] + 1)
                )
                if sigs and fillers:
                    num_sig = int(round(config.signature_prob * length))
                elif sigs:
                    num_sig = length
                else:
                    num_sig = 0
                # Signature slots spread as evenly as possible over the
                # class's signature set (formulaic phrases recur in every
                # document of a type); leftovers go to a random subset.
                words = []
                if num_sig:
                    base, extra = divmod(num_sig, len(sigs))
                    bonus = set(rng.permutation(len(sigs))[:extra].tolist())
                    for j, sig in enumerate(sigs):
                        words.extend([sig] * (base + (1 if j in bonus else 0)))
                fill_count = length - num_sig
                if fill_count:
                    picks = rng.choice(len(fillers), size=fill_count, p=zipf)
                    words.extend(fillers[int(i)] for i in picks)
                words = [words[int(i)] for i in rng.permutation(length)]
                truths[page_id] = words
                if config.true_rp_beta is None:
                    true_probs = [1.0] * length
                else:
                    true_probs = [
                        _clamp_prob(float(v)) for v in rng.beta(*config.true_rp_beta, size=length)
                    ]
                records = [
                    PrixRecord(pseudo_word=word, relevance_prob=prob)
                    for word, prob in zip(words, true_probs)
                ]
                lo, hi = config.noise_words_per_page
                num_false = int(rng.integers(lo, hi + 1))
                if num_false:
                    false_words = rng.integers(0, len(vocab), size=num_false)
                    false_probs = rng.beta(*config.false_rp_beta, size=num_false)
                    records.extend(
                        PrixRecord(
                            pseudo_word=vocab[int(i)],
                            relevance_prob=_clamp_prob(float(v)),
                        )
                        for i, v in zip(false_words, false_probs)
                    )
                pages.append(PrixPage(page_id=page_id, records=records))
            documents.append(Document(doc_id=doc_id, class_label=label, pages=pages))
    collection = Collection(documents=documents, classes=list(classes))
    return SynthCorpus(
        collection=collection, truths=truths, config=config, signature_words=signatures
    )


# ---------------------------------------------------------------------------
# Plain-text oracle: the classical pipeline on the true word counts.
# Everything feature-side is recomputed from integer counts, from scratch for
# every fold; only the classifier itself is shared with the main pipeline.
# ---------------------------------------------------------------------------


def _entropy_score(f_t, f_per_class, num_docs, docs_per_class) -> float:
    p_t = f_t / num_docs
    p_not = (num_docs - f_t) / num_docs
    s_t = 0.0
    if f_t > 0:
        for f_c in f_per_class:
            p = f_c / f_t
            if p > 0.0:
                s_t += p * log(p)
    s_not = 0.0
    f_not = num_docs - f_t
    if f_not > 0:
        for m_c, f_c in zip(docs_per_class, f_per_class):
            p = (m_c - f_c) / f_not
            if p > 0.0:
                s_not += p * log(p)
    return p_t * s_t + p_not * s_not


def _page_counts(truths: dict[str, list[str]]) -> dict[str, dict[str, int]]:
    counts = {}
    for page_id, words in truths.items():
        page: dict[str, int] = {}
        for word in words:
            page[word] = page.get(word, 0) + 1
        counts[page_id] = page
    return counts


def oracle_rank(
    truths: dict[str, list[str]],
    collection: Collection,
    min_chars: int = 3,
    min_doc_freq: float = 1.0,
    exclude_docs=(),
    exclude_pages=(),
) -> list[tuple[str, float, int, float]]:
    """(word, ig_score, doc_freq, idf) over integer counts, ranked like the
    main pipeline: information gain descending, ties lexicographic."""
    exclude_docs = set(exclude_docs)
    exclude_pages = set(exclude_pages)
    page_counts = _page_counts(truths)
    classes = collection.classes
    doc_words: dict[str, set[str]] = {}
    class_of = {}
    for doc in collection.documents:
        if doc.doc_id in exclude_docs:
            continue
        class_of[doc.doc_id] = doc.class_label
        present = set()
        for page in doc.pages:
            if page.page_id in exclude_pages:
                continue
            present.update(page_counts[page.page_id])
        doc_words[doc.doc_id] = present
    num_docs = len(doc_words)
    docs_per_class = [
        sum(1 for d in class_of.values() if d == c) for c in classes
    ]
    doc_freq: dict[str, int] = {}
    class_freq: dict[str, dict[str, int]] = {}
    for doc_id, present in doc_words.items():
        label = class_of[doc_id]
        for word in present:
            doc_freq[word] = doc_freq.get(word, 0) + 1
            class_freq.setdefault(word, {}).setdefault(label, 0)
            class_freq[word][label] += 1
    entries = []
    for word in sorted(doc_freq):
        df = doc_freq[word]
        if len(word) < min_chars or df < min_doc_freq:
            continue
        per_class = class_freq[word]
        ig = _entropy_score(
            df, [per_class.get(c, 0) for c in classes], num_docs, docs_per_class
        )
        entries.append((word, ig, df, log(num_docs / df)))
    entries.sort(key=lambda e: (-e[1], e[0]))
    return entries


def _oracle_unit_vector(counts: dict[str, int], ranked, n: int, pruned: set[str]) -> np.ndarray:
    total = sum(v for w, v in counts.items() if w in pruned)
    values = np.zeros(n, dtype=np.float64)
    if total == 0:
        return values
    for i, (word, _, _, idf) in enumerate(ranked[:n]):
        count = counts.get(word)
        if count:
            values[i] = (count / total) * idf
    return values


def plain_text_oracle(
    truths: dict[str, list[str]],
    collection: Collection,
    n: int,
    arch: str,
    seed: int,
    granularity: str = "document",
    *,
    min_chars: int = 3,
    min_doc_freq: float = 1.0,
    learning_rate: float = 0.01,
    epochs: int = 100,
    batch_size: int = 32,
    fold_by_document: bool = False,
) -> LooResult:
    """Leave-one-out on the true texts with classical integer counts.

    Mirrors the fold semantics, seeding (run seed + fold index) and training
    configuration of the main pipeline, but derives every feature-side
    quantity from plain word counts, recomputed from scratch per fold.
    """
    page_counts = _page_counts(truths)
    classes = collection.classes
    class_index = {c: i for i, c in enumerate(classes)}

    def doc_counts(doc: Document, exclude_pages=frozenset()) -> dict[str, int]:
        merged: dict[str, int] = {}
        for page in doc.pages:
            if page.page_id in exclude_pages:
                continue
            for word, count in page_counts[page.page_id].items():
                merged[word] = merged.get(word, 0) + count
        return merged

    if granularity == "document":
        units = [(doc.doc_id, doc) for doc in collection.documents]
    elif granularity == "page":
        units = [
            (page.page_id, doc) for doc in collection.documents for page in doc.pages
        ]
    else:
        raise ValueError(f"unknown granularity {granularity!r}")

    predictions = []
    for fold_idx, (unit_id, owner) in enumerate(units):
        if granularity == "document":
            exclude_docs, exclude_pages = {unit_id}, set()
        elif fold_by_document:
            exclude_docs, exclude_pages = {owner.doc_id}, set()
        else:
            exclude_docs, exclude_pages = set(), {unit_id}
        ranked = oracle_rank(
            truths, collection, min_chars, min_doc_freq,
            exclude_docs=exclude_docs, exclude_pages=exclude_pages,
        )
        n_fold = min(n, len(ranked))
        pruned = {w for w, _, _, _ in ranked}
        if granularity == "document":
            train_units = [
                (d.doc_id, doc_counts(d), d.class_label)
                for d in collection.documents
                if d.doc_id not in exclude_docs
            ]
            held_counts = doc_counts(owner)
        else:
            train_units = [
                (p.page_id, page_counts[p.page_id], d.class_label)
                for d in collection.documents
                for p in d.pages
                if p.page_id != unit_id and d.doc_id not in exclude_docs
            ]
            held_counts = page_counts[unit_id]
        rows = np.stack(
            [_oracle_unit_vector(c, ranked, n_fold, pruned) for _, c, _ in train_units]
        )
        mean = rows.mean(axis=0)
        std = rows.std(axis=0)
        std = np.where(std == 0.0, 1.0, std)
        train_matrix = (rows - mean) / std
        held = (_oracle_unit_vector(held_counts, ranked, n_fold, pruned) - mean) / std
        targets = np.array([class_index[label] for _, _, label in train_units], dtype=np.intp)
        model = init_model(
            MlpArchitecture(variant=arch, input_dim=n_fold, num_classes=len(classes)),
            seed + fold_idx,
        )
        config = TrainConfig(
            learning_rate=learning_rate, epochs=epochs, batch_size=batch_size,
            seed=seed + fold_idx,
        )
        train(model, train_matrix, targets, config)
        cls, probs = predict(model, held)
        predictions.append(
            Prediction(
                unit_id=unit_id,
                true_class=owner.class_label,
                predicted_class=classes[cls],
                posterior=tuple(float(p) for p in probs),
            )
        )
    return build_result(granularity, arch, n, classes, predictions)
