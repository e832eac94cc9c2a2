"""Leave-one-out experiments, page voting, confusion matrices, reports.

Each fold removes one unit (a document, or a single page) and refits the
whole feature pipeline on what remains: vocabulary pruning, information-gain
ranking, idf weights and the standardizer are all recomputed without the
held-out unit, a model is trained on the remaining units, and the held-out
unit is classified. Fold statistics come from re-summing cached per-unit
aggregates, which reproduces a from-scratch recomputation bit for bit (see
the expectation module).

Folds are independent jobs over immutable inputs; they may run on a thread
pool and are merged by fold index, so results are identical for any worker
count. The per-fold training seed is the run seed plus the fold index.
"""

from __future__ import annotations

import csv
import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from math import log2, sqrt
from pathlib import Path

import numpy as np

from prix_classify.classifier import MlpArchitecture, TrainConfig, init_model, predict, train
from prix_classify.expectation import ExpectationTable
from prix_classify.features import (
    FeatureSpec,
    fit_feature_spec,
    fit_standardizer,
    rank_vocabulary,
    tfidf_values,
)
from prix_classify.ingest import Collection

logger = logging.getLogger(__name__)

RESULTS_FORMAT = "prix-loo-results"
RESULTS_VERSION = 1

WORKERS_ENV = "PRIX_CLASSIFY_WORKERS"


@dataclass(frozen=True)
class Prediction:
    unit_id: str
    true_class: str
    predicted_class: str
    posterior: tuple[float, ...]


@dataclass
class LooResult:
    """Aggregated outcome of one (granularity, arch, n) experiment."""

    granularity: str
    arch: str
    n: int
    classes: list[str]
    predictions: list[Prediction]
    error_rate: float
    confusion: np.ndarray
    per_class_error: dict[str, float]
    ci95_halfwidth: float

    @property
    def num_units(self) -> int:
        return len(self.predictions)


def confusion_matrix(predictions, classes) -> tuple[np.ndarray, dict[str, float]]:
    """C x C counts (rows = true class, columns = predicted) and per-class
    error rates (only classes that actually occur)."""
    if not predictions:
        raise ValueError("need at least one prediction")
    index = {c: i for i, c in enumerate(classes)}
    matrix = np.zeros((len(classes), len(classes)), dtype=np.int64)
    for pred in predictions:
        matrix[index[pred.true_class], index[pred.predicted_class]] += 1
    per_class_error = {}
    for label, i in index.items():
        row_total = int(matrix[i].sum())
        if row_total:
            per_class_error[label] = 1.0 - matrix[i, i] / row_total
    return matrix, per_class_error


def confidence_interval(error_rate: float, num_units: int) -> float:
    """Normal-approximation 95% half-width: 1.96 * sqrt(e(1-e)/N)."""
    if num_units < 1:
        raise ValueError("num_units must be >= 1")
    return 1.96 * sqrt(error_rate * (1.0 - error_rate) / num_units)


def build_result(granularity, arch, n, classes, predictions) -> LooResult:
    matrix, per_class_error = confusion_matrix(predictions, classes)
    total = int(matrix.sum())
    errors = total - int(np.trace(matrix))
    error_rate = errors / total
    return LooResult(
        granularity=granularity,
        arch=arch,
        n=n,
        classes=list(classes),
        predictions=list(predictions),
        error_rate=error_rate,
        confusion=matrix,
        per_class_error=per_class_error,
        ci95_halfwidth=confidence_interval(error_rate, total),
    )


def _clamp_grid(n_grid, available: int) -> list[int]:
    grid = []
    for n in n_grid:
        if n > available:
            logger.warning("n=%d exceeds pruned vocabulary size %d; clamped", n, available)
            n = available
        if n >= 1 and n not in grid:
            grid.append(n)
    if not grid:
        raise ValueError("empty n grid after clamping")
    return grid


@dataclass
class _FoldJob:
    fold_idx: int
    unit_id: str
    true_class: str
    exclude_docs: tuple[str, ...]
    exclude_pages: tuple[str, ...]
    train_units: list[tuple[str, str, str]]  # (unit_id, kind, class_label)
    held_kind: str  # "document" | "page"


def _unit_stats(view, unit_id: str, kind: str):
    if kind == "document":
        return view.doc_word_stats(unit_id)
    return view.page_word_stats(unit_id)


def _run_fold(
    job: _FoldJob,
    table: ExpectationTable,
    classes: list[str],
    grid: list[int],
    archs: list[str],
    seed: int,
    min_chars: int,
    min_doc_freq: float,
    learning_rate: float,
    epochs: int,
    batch_size: int,
    frozen: dict[int, FeatureSpec] | None,
):
    view = table.fold_view(exclude_docs=job.exclude_docs, exclude_pages=job.exclude_pages)
    class_index = {c: i for i, c in enumerate(classes)}
    targets = np.array([class_index[label] for _, _, label in job.train_units], dtype=np.intp)
    fold_seed = seed + job.fold_idx
    out = {}
    ranked = None
    if frozen is None:
        ranked = rank_vocabulary(view, min_chars, min_doc_freq)
    for n in grid:
        if frozen is not None:
            spec = frozen[n]
            stats_view = view  # unit content is intrinsic; spec stays global
        else:
            spec = fit_feature_spec(view, n, min_chars, min_doc_freq, ranked=ranked)
            stats_view = view
        rows = np.stack(
            [
                tfidf_values(_unit_stats(stats_view, unit_id, kind), spec)
                for unit_id, kind, _ in job.train_units
            ]
        )
        if frozen is not None:
            mean, std = spec.mean, spec.std
        else:
            mean, std = fit_standardizer(rows)
        train_matrix = (rows - mean) / std
        held = tfidf_values(_unit_stats(stats_view, job.unit_id, job.held_kind), spec)
        held = (held - mean) / std
        for variant in archs:
            arch = MlpArchitecture(variant=variant, input_dim=spec.n, num_classes=len(classes))
            model = init_model(arch, fold_seed)
            config = TrainConfig(
                learning_rate=learning_rate,
                epochs=epochs,
                batch_size=batch_size,
                seed=fold_seed,
            )
            train(model, train_matrix, targets, config)
            cls, probs = predict(model, held)
            out[(variant, n)] = Prediction(
                unit_id=job.unit_id,
                true_class=job.true_class,
                predicted_class=classes[cls],
                posterior=tuple(float(p) for p in probs),
            )
    return job.fold_idx, out


def _document_jobs(collection: Collection) -> list[_FoldJob]:
    jobs = []
    all_docs = [(d.doc_id, "document", d.class_label) for d in collection.documents]
    for idx, doc in enumerate(collection.documents):
        jobs.append(
            _FoldJob(
                fold_idx=idx,
                unit_id=doc.doc_id,
                true_class=doc.class_label,
                exclude_docs=(doc.doc_id,),
                exclude_pages=(),
                train_units=[u for u in all_docs if u[0] != doc.doc_id],
                held_kind="document",
            )
        )
    return jobs


def _page_jobs(collection: Collection, fold_by_document: bool) -> list[_FoldJob]:
    all_pages = [
        (page.page_id, "page", doc.class_label, doc.doc_id)
        for doc in collection.documents
        for page in doc.pages
    ]
    jobs = []
    for idx, (page_id, _, label, doc_id) in enumerate(all_pages):
        if fold_by_document:
            exclude_docs, exclude_pages = (doc_id,), ()
            train_units = [
                (p, "page", lab) for p, _, lab, owner in all_pages if owner != doc_id
            ]
        else:
            exclude_docs, exclude_pages = (), (page_id,)
            train_units = [
                (p, "page", lab) for p, _, lab, _ in all_pages if p != page_id
            ]
        jobs.append(
            _FoldJob(
                fold_idx=idx,
                unit_id=page_id,
                true_class=label,
                exclude_docs=exclude_docs,
                exclude_pages=exclude_pages,
                train_units=train_units,
                held_kind="page",
            )
        )
    return jobs


def run_loo(
    collection: Collection,
    table: ExpectationTable,
    n_grid,
    archs,
    granularity: str = "document",
    *,
    seed: int = 0,
    min_chars: int = 3,
    min_doc_freq: float = 1.0,
    learning_rate: float = 0.01,
    epochs: int = 100,
    batch_size: int = 32,
    fold_by_document: bool = False,
    frozen_standardizer: bool = False,
    workers: int | None = None,
) -> list[LooResult]:
    """Leave-one-out over every unit, for each (arch, n) combination.

    granularity "document" holds out whole documents; "page" holds out one
    page at a time (its document keeps its other pages in the training set
    unless fold_by_document is set). With frozen_standardizer the feature
    pipeline (ranking, idf, standardizer) is fitted once on the full
    collection and only the training set excludes the held-out unit, which
    mimics a single global fit and accepts the leakage that entails.
    """
    classes = list(collection.classes)
    if granularity == "document":
        for label, count in _class_sizes(collection).items():
            if count < 2:
                logger.warning(
                    "class %r has %d document(s); its units can never be "
                    "predicted correctly in leave-one-out",
                    label,
                    count,
                )
        jobs = _document_jobs(collection)
    elif granularity == "page":
        jobs = _page_jobs(collection, fold_by_document)
    else:
        raise ValueError(f"unknown granularity {granularity!r}")
    if not jobs:
        raise ValueError("collection has no units to evaluate")

    global_ranked = rank_vocabulary(table, min_chars, min_doc_freq)
    grid = _clamp_grid(n_grid, len(global_ranked))
    archs = list(archs)

    frozen = None
    if frozen_standardizer:
        frozen = {}
        for n in grid:
            spec = fit_feature_spec(table, n, min_chars, min_doc_freq, ranked=global_ranked)
            rows = np.stack(
                [
                    tfidf_values(_unit_stats(table.fold_view(), unit_id, kind), spec)
                    for unit_id, kind, _ in (
                        [(d.doc_id, "document", d.class_label) for d in collection.documents]
                        if granularity == "document"
                        else [
                            (p.page_id, "page", d.class_label)
                            for d in collection.documents
                            for p in d.pages
                        ]
                    )
                ]
            )
            mean, std = fit_standardizer(rows)
            frozen[n] = spec.with_standardizer(mean, std)

    if workers is None:
        workers = int(os.environ.get(WORKERS_ENV, "1"))
    workers = max(1, workers)

    def task(job: _FoldJob):
        return _run_fold(
            job, table, classes, grid, archs, seed, min_chars, min_doc_freq,
            learning_rate, epochs, batch_size, frozen,
        )

    if workers == 1:
        fold_outputs = [task(job) for job in jobs]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            fold_outputs = list(pool.map(task, jobs))
    fold_outputs.sort(key=lambda item: item[0])

    results = []
    for variant in archs:
        for n in grid:
            predictions = [out[(variant, n)] for _, out in fold_outputs]
            results.append(build_result(granularity, variant, n, classes, predictions))
    return results


def _class_sizes(collection: Collection) -> dict[str, int]:
    sizes = {c: 0 for c in collection.classes}
    for doc in collection.documents:
        sizes[doc.class_label] += 1
    return sizes


def vote_documents(page_result: LooResult, collection: Collection) -> LooResult:
    """Document-level result from per-page predictions by plurality vote.

    Ties fall to the tied class with the highest summed posterior over the
    document's pages, then to the lowest class index. The input result is
    not modified. A document with zero classified pages raises.
    """
    if page_result.granularity != "page":
        raise ValueError("vote_documents needs a page-granularity result")
    classes = page_result.classes
    class_index = {c: i for i, c in enumerate(classes)}
    by_page = {p.unit_id: p for p in page_result.predictions}
    voted = []
    for doc in collection.documents:
        page_preds = [by_page[p.page_id] for p in doc.pages if p.page_id in by_page]
        if not page_preds:
            raise ValueError(f"document {doc.doc_id!r} has zero classified pages")
        if len(page_preds) < len(doc.pages):
            logger.warning(
                "document %r: only %d of %d pages classified",
                doc.doc_id, len(page_preds), len(doc.pages),
            )
        counts: dict[str, int] = {}
        for pred in page_preds:
            counts[pred.predicted_class] = counts.get(pred.predicted_class, 0) + 1
        best = max(counts.values())
        tied = [c for c, k in counts.items() if k == best]
        if len(tied) > 1:
            summed = {
                c: sum(p.posterior[class_index[c]] for p in page_preds) for c in tied
            }
            top = max(summed.values())
            tied = [c for c in tied if summed[c] == top]
        winner = min(tied, key=lambda c: class_index[c])
        mean_posterior = tuple(
            sum(p.posterior[i] for p in page_preds) / len(page_preds)
            for i in range(len(classes))
        )
        voted.append(
            Prediction(
                unit_id=doc.doc_id,
                true_class=doc.class_label,
                predicted_class=winner,
                posterior=mean_posterior,
            )
        )
    return build_result("page-voted", page_result.arch, page_result.n, classes, voted)


def _result_record(result: LooResult) -> dict:
    return {
        "granularity": result.granularity,
        "arch": result.arch,
        "n": result.n,
        "classes": result.classes,
        "num_units": result.num_units,
        "error_rate": result.error_rate,
        "ci95_halfwidth": result.ci95_halfwidth,
        "per_class_error": {c: result.per_class_error[c] for c in sorted(result.per_class_error)},
        "confusion": result.confusion.tolist(),
        "predictions": [
            {
                "unit_id": p.unit_id,
                "true_class": p.true_class,
                "predicted_class": p.predicted_class,
                "posterior": list(p.posterior),
            }
            for p in result.predictions
        ],
    }


def _result_from_record(record: dict) -> LooResult:
    predictions = [
        Prediction(
            unit_id=p["unit_id"],
            true_class=p["true_class"],
            predicted_class=p["predicted_class"],
            posterior=tuple(p["posterior"]),
        )
        for p in record["predictions"]
    ]
    return LooResult(
        granularity=record["granularity"],
        arch=record["arch"],
        n=record["n"],
        classes=list(record["classes"]),
        predictions=predictions,
        error_rate=record["error_rate"],
        confusion=np.array(record["confusion"], dtype=np.int64),
        per_class_error=dict(record["per_class_error"]),
        ci95_halfwidth=record["ci95_halfwidth"],
    )


def _sort_key(result: LooResult):
    return (result.granularity, result.arch, result.n)


def save_results(results, path) -> None:
    """Machine-readable results, one record per (granularity, arch, n),
    sorted by that key. Identical results serialize to identical bytes."""
    records = [_result_record(r) for r in sorted(results, key=_sort_key)]
    payload = {"format": RESULTS_FORMAT, "version": RESULTS_VERSION, "results": records}
    Path(path).write_text(
        json.dumps(payload, ensure_ascii=False, separators=(",", ":")), encoding="utf-8"
    )


def load_results(path) -> list[LooResult]:
    payload = json.loads(Path(path).read_text(encoding="utf-8"))
    if payload.get("format") != RESULTS_FORMAT or payload.get("version") != RESULTS_VERSION:
        raise ValueError(f"not a supported results file: {path}")
    return [_result_from_record(r) for r in payload["results"]]


def report(results, outdir) -> list[Path]:
    """Render results into plot-ready curve files and confusion matrices.

    Writes, under `outdir`:

    * ``curve_<granularity>.csv`` with columns
      arch,n,log2_n,error_rate,ci95_halfwidth,num_units (sorted by arch, n)
    * ``<granularity>/confusion_<arch>_<n>.json`` with the matrix, class
      order and per-class error rates

    Output depends only on the results, so re-rendering is byte-identical.
    """
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    written = []
    ordered = sorted(results, key=_sort_key)
    granularities = []
    for result in ordered:
        if result.granularity not in granularities:
            granularities.append(result.granularity)
    for granularity in granularities:
        rows = [r for r in ordered if r.granularity == granularity]
        curve_path = outdir / f"curve_{granularity}.csv"
        with open(curve_path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["arch", "n", "log2_n", "error_rate", "ci95_halfwidth", "num_units"])
            for r in rows:
                writer.writerow(
                    [r.arch, r.n, repr(log2(r.n)), repr(r.error_rate),
                     repr(r.ci95_halfwidth), r.num_units]
                )
        written.append(curve_path)
        subdir = outdir / granularity
        subdir.mkdir(exist_ok=True)
        for r in rows:
            matrix_path = subdir / f"confusion_{r.arch}_{r.n}.json"
            matrix_path.write_text(
                json.dumps(
                    {
                        "granularity": r.granularity,
                        "arch": r.arch,
                        "n": r.n,
                        "classes": r.classes,
                        "confusion": r.confusion.tolist(),
                        "per_class_error": {
                            c: r.per_class_error[c] for c in sorted(r.per_class_error)
                        },
                        "error_rate": r.error_rate,
                    },
                    ensure_ascii=False,
                    indent=2,
                )
                + "\n",
                encoding="utf-8",
            )
            written.append(matrix_path)
    return written
