"""Command-line entry point: ingest -> expectations -> features -> train ->
loo -> report -> synth, plus a one-shot run-all.

Conventions:

* Human-readable logs go to standard error; machine-readable results only
  to files.
* Exit code 0 iff the command succeeds; on failure the failing stage and
  reason are printed to standard error.
* Every output location gets a run manifest (``run_manifest.json`` in
  directories, ``<file>.run.json`` next to single-file outputs) recording
  tool version, seed, input digests and outputs. Manifests carry timestamps
  and are the only non-reproducible bytes; all results files are
  byte-identical across reruns with the same config, inputs and seed.
* All randomness flows from one top-level seed. Stage seeds derive as the
  first four bytes of sha256("<seed>:<stage>") (little endian); inside
  leave-one-out, the per-fold training seed is the stage seed plus the fold
  index.
* ``PRIX_CLASSIFY_WORKERS`` sets the default worker count for fold
  evaluation; results do not depend on it.
"""

from __future__ import annotations

import argparse
import glob as globlib
import hashlib
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

import prix_classify
from prix_classify import classifier, evaluation, expectation, features, ingest, synth

logger = logging.getLogger("prix_classify.cli")

DEFAULT_GRID = "8..16384x2"


class StageError(RuntimeError):
    def __init__(self, stage: str, message: str):
        self.stage = stage
        super().__init__(f"{stage}: {message}")


def derive_seed(seed: int, stage: str) -> int:
    """Deterministic per-stage sub-seed from the top-level seed."""
    digest = hashlib.sha256(f"{seed}:{stage}".encode()).digest()
    return int.from_bytes(digest[:4], "little")


def parse_grid(text) -> list[int]:
    """Vocabulary-size grid: '64', '8,16,32', or '8..16384x2' (geometric)."""
    if isinstance(text, (list, tuple)):
        return [int(v) for v in text]
    text = str(text).strip()
    if ".." in text:
        start_s, _, rest = text.partition("..")
        end_s, _, factor_s = rest.partition("x")
        start, end = int(start_s), int(end_s)
        factor = int(factor_s) if factor_s else 2
        if start < 1 or end < start or factor < 2:
            raise ValueError(f"bad grid spec {text!r}")
        values = []
        n = start
        while n <= end:
            values.append(n)
            n *= factor
        return values
    return [int(v) for v in text.split(",")]


def _sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_run_manifest(target, stage: str, inputs, outputs, seed=None, config=None) -> None:
    """target: directory (gets run_manifest.json) or output file (gets a
    sibling <name>.run.json)."""
    target = Path(target)
    if target.is_dir():
        manifest_path = target / "run_manifest.json"
    else:
        manifest_path = target.with_name(target.name + ".run.json")
    payload = {
        "tool": "prix-classify",
        "version": prix_classify.__version__,
        "stage": stage,
        "seed": seed,
        "config": config,
        "generated_at": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
        "inputs": {
            str(p): _sha256_file(Path(p)) for p in inputs if Path(p).is_file()
        },
        "outputs": [str(p) for p in outputs],
    }
    manifest_path.write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")


def _expand_prix_globs(patterns) -> list[str]:
    paths: list[str] = []
    for pattern in patterns:
        matched = sorted(globlib.glob(pattern))
        if not matched and Path(pattern).is_file():
            matched = [pattern]
        paths.extend(matched)
    if not paths:
        raise FileNotFoundError(f"no index files match {patterns}")
    return paths


# ---------------------------------------------------------------------------
# Stage implementations (shared by subcommands and run-all)
# ---------------------------------------------------------------------------


def _stage_ingest(prix_patterns, manifest_path, strict, out_path) -> ingest.Collection:
    paths = _expand_prix_globs(prix_patterns)
    collection = ingest.ingest(paths, manifest_path, strict=strict)
    ingest.save_collection(collection, out_path)
    logger.info(
        "ingested %d documents / %d pages / %d classes (%d warnings)",
        collection.num_documents, collection.num_pages, len(collection.classes),
        len(collection.warnings),
    )
    _write_run_manifest(out_path, "ingest", paths + [manifest_path], [out_path])
    return collection


def _stage_expectations(collection_path, out_path) -> expectation.ExpectationTable:
    collection = ingest.load_collection(collection_path)
    table = expectation.build_expectation_table(collection)
    expectation.save_table(table, out_path)
    total = sum(table.doc_running.values())
    logger.info(
        "expectation table: %d words, %.1f expected running words, %d documents",
        len(table.vocabulary), total, table.num_documents,
    )
    _write_run_manifest(out_path, "expectations", [collection_path], [out_path])
    return table


def _stage_features(
    collection_path, table_path, n_values, min_chars, min_doc_freq, out_path,
    vectors_out=None, granularity="document",
):
    collection = ingest.load_collection(collection_path)
    table = expectation.load_table(table_path)
    if table.doc_ids != [d.doc_id for d in collection.documents]:
        raise ValueError("expectation table does not match the collection")
    ranked = features.rank_vocabulary(table, min_chars, min_doc_freq)
    if not ranked:
        raise ValueError("pruning removed the whole vocabulary")
    units = (
        [(d.doc_id, "document") for d in collection.documents]
        if granularity == "document"
        else [(p.page_id, "page") for d in collection.documents for p in d.pages]
    )
    specs = []
    all_vectors = None
    for n in n_values:
        spec = features.fit_feature_spec(table, n, min_chars, min_doc_freq, ranked=ranked)
        vecs = [
            features.tfidf_vector(unit_id, spec, table, granularity=kind)
            for unit_id, kind in units
        ]
        mean, std = features.fit_standardizer(vecs)
        specs.append(spec.with_standardizer(mean, std))
        all_vectors = [
            features.DocVector(
                unit_id=v.unit_id, values=specs[-1].transform(v.values), label=v.label
            )
            for v in vecs
        ]
    features.save_feature_specs(specs, out_path)
    outputs = [out_path]
    if vectors_out is not None:
        features.save_vectors(all_vectors, vectors_out, granularity, specs[-1].n)
        outputs.append(vectors_out)
    logger.info(
        "fitted %d spec(s) over %d pruned words (top word: %r)",
        len(specs), len(ranked), ranked[0].word,
    )
    _write_run_manifest(out_path, "features", [collection_path, table_path], outputs)
    return specs


def _stage_train(spec_path, vectors_path, arch, lr, epochs, batch, seed, out_path):
    specs = features.load_feature_specs(spec_path)
    vectors, meta = features.load_vectors(vectors_path)
    spec = next((s for s in specs if s.n == meta["n"]), None)
    if spec is None:
        raise ValueError(f"no spec with n={meta['n']} in {spec_path}")
    class_index = {c: i for i, c in enumerate(spec.classes)}
    matrix = np.stack([v.values for v in vectors])
    labels = np.array([class_index[v.label] for v in vectors], dtype=np.intp)
    model = classifier.init_model(
        classifier.MlpArchitecture(variant=arch, input_dim=spec.n, num_classes=len(spec.classes)),
        seed,
    )
    config = classifier.TrainConfig(
        learning_rate=lr, epochs=epochs, batch_size=batch, seed=seed
    )
    _, losses = classifier.train(model, matrix, labels, config)
    classifier.save_model(model, out_path)
    logger.info("trained %s: first-epoch loss %.4f, last %.4f", arch, losses[0], losses[-1])
    _write_run_manifest(
        out_path, "train", [spec_path, vectors_path], [out_path], seed=seed
    )
    return model


def _stage_loo(
    collection, table, granularities, archs, grid, seed, min_chars, min_doc_freq,
    lr, epochs, batch, fold_by_document, frozen_standardizer, workers, out_dir,
):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    results = []
    for granularity in granularities:
        base = "page" if granularity in ("page", "page-vote") else "document"
        run = evaluation.run_loo(
            collection, table, grid, archs, base,
            seed=seed, min_chars=min_chars, min_doc_freq=min_doc_freq,
            learning_rate=lr, epochs=epochs, batch_size=batch,
            fold_by_document=fold_by_document,
            frozen_standardizer=frozen_standardizer, workers=workers,
        )
        if granularity == "page-vote":
            voted = [evaluation.vote_documents(r, collection) for r in run]
            results.extend(run)
            results.extend(voted)
        else:
            results.extend(run)
    # One result per (granularity, arch, n): page and page-vote share page runs.
    unique = {}
    for result in results:
        unique[(result.granularity, result.arch, result.n)] = result
    results = list(unique.values())
    results_path = out_dir / "results.json"
    evaluation.save_results(results, results_path)
    evaluation.report(results, out_dir)
    for result in sorted(results, key=lambda r: (r.granularity, r.arch, r.n)):
        logger.info(
            "%s %s n=%d: error %.2f%% (+/- %.2f%%) over %d units",
            result.granularity, result.arch, result.n,
            100 * result.error_rate, 100 * result.ci95_halfwidth, result.num_units,
        )
    return results, results_path


# ---------------------------------------------------------------------------
# Subcommand handlers
# ---------------------------------------------------------------------------


def _cmd_ingest(args) -> int:
    _stage_ingest(args.prix, args.manifest, args.strict, args.out)
    return 0


def _cmd_expectations(args) -> int:
    _stage_expectations(args.collection, args.out)
    return 0


def _cmd_features(args) -> int:
    _stage_features(
        args.collection, args.table, parse_grid(args.n), args.min_chars,
        args.min_doc_freq, args.out, vectors_out=args.vectors_out,
        granularity=args.granularity,
    )
    return 0


def _cmd_train(args) -> int:
    _stage_train(
        args.spec, args.vectors, args.arch, args.lr, args.epochs, args.batch,
        args.seed, args.out,
    )
    return 0


def _cmd_loo(args) -> int:
    collection = ingest.load_collection(args.collection)
    table = expectation.build_expectation_table(collection)
    granularities = ["document" if g == "doc" else g for g in args.granularity]
    _, results_path = _stage_loo(
        collection, table, granularities, args.arch, parse_grid(args.n_grid),
        args.seed, args.min_chars, args.min_doc_freq, args.lr, args.epochs,
        args.batch, args.fold_by_document, args.frozen_standardizer,
        args.workers, args.out,
    )
    _write_run_manifest(
        args.out, "loo", [args.collection], [results_path], seed=args.seed
    )
    return 0


def _cmd_report(args) -> int:
    results = evaluation.load_results(args.results)
    written = evaluation.report(results, args.out)
    _write_run_manifest(args.out, "report", [args.results], written)
    return 0


def _cmd_synth(args) -> int:
    config = synth.SynthConfig.from_json(args.config)
    corpus = synth.generate(config)
    paths = corpus.write(args.out)
    logger.info(
        "generated %d documents / %d pages / %d classes",
        corpus.collection.num_documents, corpus.collection.num_pages,
        len(corpus.collection.classes),
    )
    _write_run_manifest(
        args.out, "synth", [args.config], list(paths.values()), seed=config.seed
    )
    return 0


def run_all(config: dict, out_dir, workers: int | None = None) -> Path:
    """Execute every configured stage; returns the results.json path.

    Rerunning with identical config and inputs writes byte-identical results
    files (the run manifest, which carries timestamps, is the lone
    exception).
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    seed = int(config.get("seed", 0))
    inputs: list[str] = []

    stage = "synth"
    try:
        if "synth" in config:
            synth_cfg = dict(config["synth"])
            synth_cfg.setdefault("seed", derive_seed(seed, "synth"))
            for key in ("pages_per_doc", "words_per_page", "noise_words_per_page",
                        "true_rp_beta", "false_rp_beta"):
                if synth_cfg.get(key) is not None:
                    synth_cfg[key] = tuple(synth_cfg[key])
            corpus = synth.generate(synth.SynthConfig(**synth_cfg))
            synth_dir = out_dir / "synth"
            paths = corpus.write(synth_dir)
            prix_patterns = [str(paths["prix"])]
            manifest_path = str(paths["manifest"])
        elif "prix" in config and "manifest" in config:
            prix_patterns = list(config["prix"])
            manifest_path = config["manifest"]
            inputs.extend(prix_patterns + [manifest_path])
        else:
            raise ValueError("config needs either a 'synth' block or 'prix' + 'manifest'")

        stage = "ingest"
        collection_path = out_dir / "collection.json"
        collection = _stage_ingest(
            prix_patterns, manifest_path, bool(config.get("strict", False)), collection_path
        )

        stage = "expectations"
        table_path = out_dir / "table.json"
        table = _stage_expectations(collection_path, table_path)

        feat_cfg = config.get("features", {})
        min_chars = int(feat_cfg.get("min_chars", 3))
        min_doc_freq = float(feat_cfg.get("min_doc_freq", 1.0))

        loo_cfg = config.get("loo", {})
        grid = parse_grid(loo_cfg.get("n_grid", DEFAULT_GRID))

        stage = "features"
        spec_path = out_dir / "features.json"
        _stage_features(
            collection_path, table_path, grid, min_chars, min_doc_freq, spec_path
        )

        stage = "loo"
        loo_dir = out_dir / "loo"
        _, results_path = _stage_loo(
            collection, table,
            list(loo_cfg.get("granularities", ["document"])),
            list(loo_cfg.get("archs", ["mlp0", "mlp1", "mlp2"])),
            grid,
            derive_seed(seed, "loo"),
            min_chars, min_doc_freq,
            float(loo_cfg.get("learning_rate", 0.01)),
            int(loo_cfg.get("epochs", 100)),
            int(loo_cfg.get("batch_size", 32)),
            bool(loo_cfg.get("fold_by_document", False)),
            bool(loo_cfg.get("frozen_standardizer", False)),
            workers,
            loo_dir,
        )
    except Exception as exc:
        raise StageError(stage, str(exc)) from exc

    _write_run_manifest(
        out_dir, "run-all", inputs, [str(results_path)], seed=seed, config=config
    )
    return results_path


def _cmd_run_all(args) -> int:
    config = json.loads(Path(args.config).read_text(encoding="utf-8"))
    run_all(config, args.out, workers=args.workers)
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="prix-classify",
        description="Classify untranscribed handwritten document collections "
        "from probabilistic word indexes.",
    )
    parser.add_argument(
        "--version", action="version", version=f"%(prog)s {prix_classify.__version__}"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="parse index + manifest files into a collection bundle")
    p.add_argument("--prix", nargs="+", required=True, help="index file globs")
    p.add_argument("--manifest", required=True)
    p.add_argument("--strict", action="store_true",
                   help="fail when a manifest page has no index data")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_ingest)

    p = sub.add_parser("expectations", help="compute the expected-count table")
    p.add_argument("--collection", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_expectations)

    p = sub.add_parser("features", help="fit vocabulary ranking and standardizers")
    p.add_argument("--collection", required=True)
    p.add_argument("--table", required=True)
    p.add_argument("--n", required=True, help="feature count: int, list, or start..end xK")
    p.add_argument("--min-chars", type=int, default=3)
    p.add_argument("--min-doc-freq", type=float, default=1.0)
    p.add_argument("--granularity", choices=["document", "page"], default="document")
    p.add_argument("--vectors-out", help="also write standardized unit vectors")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_features)

    p = sub.add_parser("train", help="train one MLP on saved vectors")
    p.add_argument("--spec", required=True)
    p.add_argument("--vectors", required=True)
    p.add_argument("--arch", choices=sorted(classifier.VARIANTS), required=True)
    p.add_argument("--lr", type=float, default=0.01)
    p.add_argument("--epochs", type=int, default=100)
    p.add_argument("--batch", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("loo", help="leave-one-out evaluation")
    p.add_argument("--collection", required=True)
    p.add_argument("--granularity", nargs="+", choices=["doc", "document", "page", "page-vote"],
                   default=["doc"])
    p.add_argument("--arch", nargs="+", choices=sorted(classifier.VARIANTS),
                   default=["mlp0", "mlp1", "mlp2"])
    p.add_argument("--n-grid", default=DEFAULT_GRID)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--min-chars", type=int, default=3)
    p.add_argument("--min-doc-freq", type=float, default=1.0)
    p.add_argument("--lr", type=float, default=0.01)
    p.add_argument("--epochs", type=int, default=100)
    p.add_argument("--batch", type=int, default=32)
    p.add_argument("--fold-by-document", action="store_true",
                   help="page folds exclude the whole owning document")
    p.add_argument("--frozen-standardizer", action="store_true",
                   help="fit the feature pipeline once on the full collection")
    p.add_argument("--workers", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_loo)

    p = sub.add_parser("report", help="render curves and confusion matrices")
    p.add_argument("--results", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_report)

    p = sub.add_parser("synth", help="generate a synthetic collection")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("run-all", help="synth/ingest -> expectations -> features -> loo -> report")
    p.add_argument("--config", required=True)
    p.add_argument("--workers", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_run_all)

    return parser


def main(argv=None) -> int:
    logging.basicConfig(
        stream=sys.stderr, level=logging.INFO, format="%(levelname)s %(name)s: %(message)s"
    )
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except StageError as exc:
        print(str(exc), file=sys.stderr)
        return 1
    except Exception as exc:
        print(f"{args.command}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
