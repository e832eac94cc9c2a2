"""Statistical expectations of word counts from relevance probabilities.

Because a spot's relevance probability is the expectation of a binary
"this word is really written there" variable, plain sums of probabilities
give expected counts:

* expected running words on a page      = sum of all spot probabilities
* expected running words in a document  = sum over its pages
* expected frequency of word v in doc X = sum of v's spot probabilities in X
* expected number of documents containing v = sum over documents of the
  maximum spot probability of v anywhere in the document

All accumulations use ``math.fsum``, which returns the correctly rounded
value of the exact sum. That makes every aggregate independent of summation
order, so removing a unit and re-summing reproduces bit-for-bit what a
from-scratch recomputation on the reduced collection yields; leave-one-out
folds rely on this.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from math import fsum
from pathlib import Path

from prix_classify.ingest import Collection, Document, PrixFormatError, PrixPage

logger = logging.getLogger(__name__)

TABLE_FORMAT = "prix-expectation-table"
TABLE_VERSION = 1

REL_TOL = 1e-9


@dataclass(frozen=True)
class WordStat:
    """Per-word aggregate over some unit: expected occurrence count and the
    highest single relevance probability seen."""

    sum_rp: float
    max_rp: float


def expected_page_words(page: PrixPage) -> float:
    """Expected number of running words on one page (0.0 for an empty page)."""
    return fsum(r.relevance_prob for r in page.records)


def expected_doc_words(doc: Document) -> float:
    """Expected running words in a document: the sum over its pages."""
    return fsum(expected_page_words(p) for p in doc.pages)


def expected_word_freq(doc: Document, word: str) -> float:
    """Expected occurrence count of `word` in a document; 0.0 if absent."""
    return fsum(
        fsum(r.relevance_prob for r in page.records if r.pseudo_word == word)
        for page in doc.pages
    )


def _doc_word_max(doc: Document, word: str) -> float:
    best = 0.0
    for page in doc.pages:
        for record in page.records:
            if record.pseudo_word == word and record.relevance_prob > best:
                best = record.relevance_prob
    return best


def expected_doc_frequency(collection: Collection, word: str, subset: str | None = None) -> float:
    """Expected number of documents containing `word`.

    Each document contributes the maximum relevance probability of the word
    over all spots on all its pages. `subset` restricts to one class label;
    None means the whole collection.
    """
    if subset is not None and subset not in collection.classes:
        raise KeyError(f"unknown class label {subset!r}")
    docs = [
        d for d in collection.documents if subset is None or d.class_label == subset
    ]
    return fsum(_doc_word_max(d, word) for d in docs)


class ExpectationTable:
    """All per-page, per-document and per-collection expected counts.

    Construction fixes the accumulation hierarchy: spots are summed into
    page statistics, pages into document statistics (declared page order),
    document maxima into document frequencies (manifest order). The finished
    table is immutable and safe to share across threads.
    """

    def __init__(self, collection: Collection):
        self.classes: list[str] = list(collection.classes)
        self.doc_ids: list[str] = [d.doc_id for d in collection.documents]
        self.doc_class: dict[str, str] = {
            d.doc_id: d.class_label for d in collection.documents
        }
        self.doc_pages: dict[str, list[str]] = {
            d.doc_id: [p.page_id for p in d.pages] for d in collection.documents
        }
        self.page_doc: dict[str, str] = {}
        self.class_counts: dict[str, int] = {c: 0 for c in self.classes}

        self.page_word: dict[str, dict[str, WordStat]] = {}
        self.page_running: dict[str, float] = {}
        self.doc_word: dict[str, dict[str, WordStat]] = {}
        self.doc_running: dict[str, float] = {}

        for doc in collection.documents:
            self.class_counts[doc.class_label] += 1
            for page in doc.pages:
                self.page_doc[page.page_id] = doc.doc_id
                probs: dict[str, list[float]] = {}
                for record in page.records:
                    probs.setdefault(record.pseudo_word, []).append(record.relevance_prob)
                stats = {
                    w: WordStat(sum_rp=fsum(ps), max_rp=max(ps)) for w, ps in probs.items()
                }
                self.page_word[page.page_id] = stats
                self.page_running[page.page_id] = fsum(r.relevance_prob for r in page.records)
            doc_stats: dict[str, WordStat] = {}
            words = set()
            for page in doc.pages:
                words.update(self.page_word[page.page_id])
            for word in words:
                page_stats = [
                    self.page_word[p.page_id][word]
                    for p in doc.pages
                    if word in self.page_word[p.page_id]
                ]
                doc_stats[word] = WordStat(
                    sum_rp=fsum(s.sum_rp for s in page_stats),
                    max_rp=max(s.max_rp for s in page_stats),
                )
            self.doc_word[doc.doc_id] = doc_stats
            self.doc_running[doc.doc_id] = fsum(
                self.page_running[p.page_id] for p in doc.pages
            )

        self.doc_freq: dict[str, float] = {}
        self.class_doc_freq: dict[str, dict[str, float]] = {}
        all_words = set()
        for stats in self.doc_word.values():
            all_words.update(stats)
        self.vocabulary: list[str] = sorted(all_words)
        for word in self.vocabulary:
            maxima: dict[str, list[float]] = {}
            for doc_id in self.doc_ids:
                stat = self.doc_word[doc_id].get(word)
                if stat is not None:
                    maxima.setdefault(self.doc_class[doc_id], []).append(stat.max_rp)
            per_class = {c: fsum(vals) for c, vals in maxima.items()}
            self.class_doc_freq[word] = per_class
            self.doc_freq[word] = fsum(
                stat.max_rp
                for doc_id in self.doc_ids
                if (stat := self.doc_word[doc_id].get(word)) is not None
            )

    @property
    def num_documents(self) -> int:
        return len(self.doc_ids)

    def self_check(self) -> None:
        """Verify internal consistency; raises on a corrupted table."""
        m = self.num_documents
        for doc_id in self.doc_ids:
            total = fsum(s.sum_rp for s in self.doc_word[doc_id].values())
            if not _close(total, self.doc_running[doc_id]):
                raise PrixFormatError(
                    f"document {doc_id!r}: word sums {total} != running total "
                    f"{self.doc_running[doc_id]}"
                )
        for word in self.vocabulary:
            df = self.doc_freq[word]
            if not (0.0 <= df <= m * (1.0 + REL_TOL)):
                raise PrixFormatError(f"doc_freq[{word!r}] = {df} outside [0, M]")
            split = fsum(self.class_doc_freq[word].values())
            if not _close(split, df):
                raise PrixFormatError(
                    f"class split of doc_freq[{word!r}] = {split} != {df}"
                )

    def fold_view(self, exclude_docs=(), exclude_pages=()) -> "FoldView":
        return FoldView(self, exclude_docs=exclude_docs, exclude_pages=exclude_pages)


def _close(a: float, b: float) -> bool:
    return abs(a - b) <= REL_TOL * max(1.0, abs(a), abs(b))


def build_expectation_table(collection: Collection, check: bool = True) -> ExpectationTable:
    """Build the full expectation table for a validated collection."""
    table = ExpectationTable(collection)
    if check:
        table.self_check()
    return table


class FoldView:
    """Collection-level statistics with some documents or pages held out.

    Only aggregates touched by the exclusions are recomputed, by re-summing
    the cached per-unit statistics of the remaining units; untouched words
    keep the table's values, which equal a from-scratch recomputation
    because fsum is order-independent. Per-unit statistics (a document's or
    page's own word sums) are intrinsic and never change.

    Holding out a page keeps its document in the document count M, even if
    that document has no other pages; it then contributes nothing anywhere.
    """

    def __init__(self, table: ExpectationTable, exclude_docs=(), exclude_pages=()):
        self.table = table
        self.exclude_docs = frozenset(exclude_docs)
        self.exclude_pages = frozenset(exclude_pages)
        unknown = self.exclude_docs - set(table.doc_ids)
        if unknown:
            raise KeyError(f"unknown document(s) {sorted(unknown)}")
        unknown = self.exclude_pages - set(table.page_doc)
        if unknown:
            raise KeyError(f"unknown page(s) {sorted(unknown)}")

        self.num_docs = table.num_documents - len(self.exclude_docs)
        self.class_counts = dict(table.class_counts)
        for doc_id in self.exclude_docs:
            self.class_counts[table.doc_class[doc_id]] -= 1

        # Documents whose aggregates change because some of their pages left.
        self._doc_word_over: dict[str, dict[str, WordStat]] = {}
        touched_docs = {
            table.page_doc[p] for p in self.exclude_pages
        } - self.exclude_docs
        for doc_id in touched_docs:
            kept_pages = [
                p for p in table.doc_pages[doc_id] if p not in self.exclude_pages
            ]
            affected = set()
            for page_id in table.doc_pages[doc_id]:
                if page_id in self.exclude_pages:
                    affected.update(table.page_word[page_id])
            override = dict(table.doc_word[doc_id])
            for word in affected:
                stats = [
                    table.page_word[p][word]
                    for p in kept_pages
                    if word in table.page_word[p]
                ]
                if stats:
                    override[word] = WordStat(
                        sum_rp=fsum(s.sum_rp for s in stats),
                        max_rp=max(s.max_rp for s in stats),
                    )
                else:
                    del override[word]
            self._doc_word_over[doc_id] = override

        # Words whose collection-level document frequency must be re-summed.
        affected_words: set[str] = set()
        for doc_id in self.exclude_docs:
            affected_words.update(table.doc_word[doc_id])
        for doc_id, override in self._doc_word_over.items():
            original = table.doc_word[doc_id]
            affected_words.update(
                w
                for w in set(original) | set(override)
                if original.get(w) != override.get(w)
            )
        self._doc_freq_over: dict[str, float] = {}
        self._class_doc_freq_over: dict[str, dict[str, float]] = {}
        for word in affected_words:
            maxima: dict[str, list[float]] = {}
            for doc_id in table.doc_ids:
                if doc_id in self.exclude_docs:
                    continue
                stat = self.doc_word_stats(doc_id).get(word)
                if stat is not None:
                    maxima.setdefault(table.doc_class[doc_id], []).append(stat.max_rp)
            per_class = {c: fsum(vals) for c, vals in maxima.items()}
            self._class_doc_freq_over[word] = per_class
            self._doc_freq_over[word] = fsum(
                v for vals in maxima.values() for v in vals
            )

    @property
    def classes(self) -> list[str]:
        return self.table.classes

    def doc_ids(self) -> list[str]:
        return [d for d in self.table.doc_ids if d not in self.exclude_docs]

    def doc_word_stats(self, doc_id: str) -> dict[str, WordStat]:
        """Per-word statistics of one document under this view's exclusions.

        Available for excluded documents too (their own content is intrinsic;
        they are just not counted in collection aggregates).
        """
        override = self._doc_word_over.get(doc_id)
        return override if override is not None else self.table.doc_word[doc_id]

    def page_word_stats(self, page_id: str) -> dict[str, WordStat]:
        return self.table.page_word[page_id]

    def doc_freq(self, word: str) -> float:
        value = self._doc_freq_over.get(word)
        return value if value is not None else self.table.doc_freq.get(word, 0.0)

    def class_doc_freq(self, word: str) -> dict[str, float]:
        value = self._class_doc_freq_over.get(word)
        return value if value is not None else self.table.class_doc_freq.get(word, {})

    def vocabulary(self) -> list[str]:
        """Words with positive document frequency under the exclusions."""
        return [w for w in self.table.vocabulary if self.doc_freq(w) > 0.0]


def _require_version(payload, fmt: str, version: int, path) -> None:
    if payload.get("format") != fmt:
        raise PrixFormatError(f"not a {fmt} file: {path}")
    if payload.get("version") != version:
        raise PrixFormatError(f"unsupported {fmt} version {payload.get('version')!r}")


def save_table(table: ExpectationTable, path) -> None:
    """Serialize the table (page-level granularity; the rest is derivable)."""
    payload = {
        "format": TABLE_FORMAT,
        "version": TABLE_VERSION,
        "classes": table.classes,
        "documents": [
            {
                "doc_id": doc_id,
                "class_label": table.doc_class[doc_id],
                "pages": [
                    {
                        "page_id": page_id,
                        "running": table.page_running[page_id],
                        "words": {
                            w: [s.sum_rp, s.max_rp]
                            for w, s in sorted(table.page_word[page_id].items())
                        },
                    }
                    for page_id in table.doc_pages[doc_id]
                ],
            }
            for doc_id in table.doc_ids
        ],
    }
    Path(path).write_text(
        json.dumps(payload, ensure_ascii=False, separators=(",", ":")), encoding="utf-8"
    )


def load_table(path) -> ExpectationTable:
    """Rebuild a table from :func:`save_table` output.

    Page aggregates are restored verbatim; document and collection levels
    are recomputed with the same fsum hierarchy, so the result is identical
    to the originally built table.
    """
    payload = json.loads(Path(path).read_text(encoding="utf-8"))
    _require_version(payload, TABLE_FORMAT, TABLE_VERSION, path)
    table = ExpectationTable.__new__(ExpectationTable)
    table.classes = list(payload["classes"])
    table.doc_ids = [d["doc_id"] for d in payload["documents"]]
    table.doc_class = {d["doc_id"]: d["class_label"] for d in payload["documents"]}
    table.doc_pages = {
        d["doc_id"]: [p["page_id"] for p in d["pages"]] for d in payload["documents"]
    }
    table.page_doc = {}
    table.class_counts = {c: 0 for c in table.classes}
    table.page_word = {}
    table.page_running = {}
    table.doc_word = {}
    table.doc_running = {}
    for doc in payload["documents"]:
        doc_id = doc["doc_id"]
        table.class_counts[doc["class_label"]] += 1
        for page in doc["pages"]:
            page_id = page["page_id"]
            table.page_doc[page_id] = doc_id
            stats = {
                w: WordStat(sum_rp=v[0], max_rp=v[1]) for w, v in page["words"].items()
            }
            table.page_word[page_id] = stats
            table.page_running[page_id] = page["running"]
        words = set()
        for page in doc["pages"]:
            words.update(table.page_word[page["page_id"]])
        doc_stats = {}
        for word in words:
            page_stats = [
                table.page_word[pid][word]
                for pid in table.doc_pages[doc_id]
                if word in table.page_word[pid]
            ]
            doc_stats[word] = WordStat(
                sum_rp=fsum(s.sum_rp for s in page_stats),
                max_rp=max(s.max_rp for s in page_stats),
            )
        table.doc_word[doc_id] = doc_stats
        table.doc_running[doc_id] = fsum(
            table.page_running[pid] for pid in table.doc_pages[doc_id]
        )
    all_words = set()
    for stats in table.doc_word.values():
        all_words.update(stats)
    table.vocabulary = sorted(all_words)
    table.doc_freq = {}
    table.class_doc_freq = {}
    for word in table.vocabulary:
        maxima: dict[str, list[float]] = {}
        for doc_id in table.doc_ids:
            stat = table.doc_word[doc_id].get(word)
            if stat is not None:
                maxima.setdefault(table.doc_class[doc_id], []).append(stat.max_rp)
        table.class_doc_freq[word] = {c: fsum(v) for c, v in maxima.items()}
        table.doc_freq[word] = fsum(v for vals in maxima.values() for v in vals)
    return table
