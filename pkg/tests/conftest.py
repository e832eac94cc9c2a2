"""Shared fixtures: tiny hand-built collections and random generators."""

import numpy as np
import pytest

from prix_classify.ingest import Collection, Document, PrixPage, PrixRecord


def make_page(page_id, spots):
    """spots: list of (word, prob) or (word, prob, bbox)."""
    records = [
        PrixRecord(pseudo_word=s[0], relevance_prob=s[1], bbox=s[2] if len(s) > 2 else None)
        for s in spots
    ]
    return PrixPage(page_id=page_id, records=records)


def make_collection(docs, classes=None):
    """docs: list of (doc_id, class_label, [page, ...])."""
    documents = [Document(doc_id=d, class_label=c, pages=list(pages)) for d, c, pages in docs]
    if classes is None:
        classes = []
        for doc in documents:
            if doc.class_label not in classes:
                classes.append(doc.class_label)
    return Collection(documents=documents, classes=classes)


def random_collection(rng, num_docs=6, num_classes=2, max_pages=3, max_spots=20, vocab=12):
    """Random noisy collection; every probability in (0, 1]."""
    words = [f"w{i:03d}" for i in range(vocab)]
    docs = []
    for d in range(num_docs):
        label = f"c{d % num_classes}"
        pages = []
        for p in range(int(rng.integers(1, max_pages + 1))):
            spots = [
                (words[int(rng.integers(vocab))], float(rng.uniform(1e-6, 1.0)))
                for _ in range(int(rng.integers(0, max_spots + 1)))
            ]
            pages.append(make_page(f"d{d}p{p}", spots))
        docs.append((f"d{d}", label, pages))
    classes = [f"c{k}" for k in range(num_classes)]
    return make_collection(docs, classes=classes)


@pytest.fixture
def tiny_collection():
    """Three documents, two classes, known numbers used across modules."""
    return make_collection(
        [
            (
                "doc1",
                "A",
                [
                    make_page("p1", [("poder", 0.9), ("venta", 0.5), ("poder", 0.5)]),
                    make_page("p2", [("carta", 0.6)]),
                ],
            ),
            (
                "doc2",
                "A",
                [make_page("p3", [("poder", 0.8), ("carta", 0.3)])],
            ),
            (
                "doc3",
                "B",
                [make_page("p4", [("venta", 1.0), ("venta", 0.4)]), make_page("p5", [])],
            ),
        ]
    )


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
