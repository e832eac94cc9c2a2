"""Ingestion of probabilistic-index (PrIx) files and dataset manifests.

Two tab-separated input formats, both UTF-8 with ``#``-prefixed comment
lines and blank lines ignored. ``\\r\\n`` line endings are accepted.

Index file, one pseudo-word spot per line::

    page_id<TAB>pseudo_word<TAB>relevance_prob[<TAB>x,y,w,h]

``relevance_prob`` must lie in (0, 1]. The optional bounding box holds four
non-negative integers (pixel x, y, width, height); it is carried through
unchanged but unused by the statistics downstream. Pseudo-words are trimmed
and case-folded at parse time, so all later comparisons are on normalized
word identity. A page may list the same pseudo-word many times (several
spots of one word on one page); nothing is aggregated here.

Manifest file, one document per line::

    doc_id<TAB>class_label<TAB>page_id_1,page_id_2,...

Page order inside a document is the declared order. An optional directive
line ``@classes<TAB>label1,label2,...`` declares the class set explicitly
(useful for classes that may be empty); when present, every document label
must come from the declared set.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

logger = logging.getLogger(__name__)

COLLECTION_FORMAT = "prix-collection"
COLLECTION_VERSION = 1


class PrixFormatError(ValueError):
    """Malformed index or manifest input.

    Carries the offending file and 1-based line number when the failure is
    tied to a specific line.
    """

    def __init__(self, reason: str, path: str | None = None, line_no: int | None = None):
        self.reason = reason
        self.path = path
        self.line_no = line_no
        where = ""
        if path is not None:
            where = f"{path}: "
            if line_no is not None:
                where = f"{path}:{line_no}: "
        super().__init__(where + reason)


@dataclass(frozen=True)
class ParseIssue:
    """One rejected input line: where it was and why."""

    path: str
    line_no: int
    reason: str


@dataclass(frozen=True)
class PrixRecord:
    """A single pseudo-word spot: the hypothesis, its relevance probability,
    and optionally where on the page it was seen."""

    pseudo_word: str
    relevance_prob: float
    bbox: tuple[int, int, int, int] | None = None


@dataclass
class PrixPage:
    """All spots indexed on one page image."""

    page_id: str
    records: list[PrixRecord] = field(default_factory=list)


@dataclass(frozen=True)
class ManifestEntry:
    doc_id: str
    class_label: str
    page_ids: tuple[str, ...]


@dataclass
class DocumentManifest:
    """Document -> ordered pages -> class label mapping for one collection."""

    documents: list[ManifestEntry]
    classes: list[str]

    @property
    def num_documents(self) -> int:
        return len(self.documents)

    @property
    def num_classes(self) -> int:
        return len(self.classes)


@dataclass
class Document:
    doc_id: str
    class_label: str
    pages: list[PrixPage]


@dataclass
class Collection:
    """Validated, immutable-by-convention bundle of documents and classes.

    Built by :func:`validate_collection`; every downstream module treats it
    as read-only, so it can be shared freely across threads.
    """

    documents: list[Document]
    classes: list[str]
    warnings: list[str] = field(default_factory=list)

    @property
    def num_documents(self) -> int:
        return len(self.documents)

    @property
    def num_pages(self) -> int:
        return sum(len(d.pages) for d in self.documents)

    def document(self, doc_id: str) -> Document:
        for doc in self.documents:
            if doc.doc_id == doc_id:
                return doc
        raise KeyError(doc_id)


def _data_lines(path: Path):
    """Yield (line_no, stripped_line) for data lines: comments and blanks skipped."""
    with open(path, encoding="utf-8") as fh:
        for line_no, raw in enumerate(fh, start=1):
            line = raw.rstrip("\r\n")
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            yield line_no, line


def _parse_bbox(text: str) -> tuple[int, int, int, int]:
    parts = text.split(",")
    if len(parts) != 4:
        raise ValueError(f"bbox must be four comma-separated integers, got {text!r}")
    values = []
    for part in parts:
        try:
            value = int(part)
        except ValueError:
            raise ValueError(f"bbox component {part!r} is not an integer") from None
        if value < 0:
            raise ValueError(f"bbox component {value} is negative")
        values.append(value)
    return tuple(values)


def _parse_spot_line(line: str) -> tuple[str, PrixRecord]:
    fields = line.split("\t")
    if len(fields) not in (3, 4):
        raise ValueError(f"expected 3 or 4 tab-separated fields, got {len(fields)}")
    page_id = fields[0].strip()
    if not page_id:
        raise ValueError("empty page_id")
    word = fields[1].strip().casefold()
    if not word:
        raise ValueError("pseudo_word is empty after trimming")
    try:
        prob = float(fields[2])
    except ValueError:
        raise ValueError(f"relevance_prob {fields[2]!r} is not a number") from None
    if not (0.0 < prob <= 1.0):
        raise ValueError(f"relevance_prob {fields[2]} out of range (0,1]")
    bbox = _parse_bbox(fields[3]) if len(fields) == 4 else None
    return page_id, PrixRecord(pseudo_word=word, relevance_prob=prob, bbox=bbox)


def scan_prix_file(path) -> tuple[list[PrixPage], list[ParseIssue]]:
    """Parse one index file, collecting rejected lines instead of raising.

    Returns pages in first-appearance order of their page_id, record order
    within each page preserved, plus one :class:`ParseIssue` per rejected
    line. Accepted-record count always equals data-line count minus issues.
    """
    path = Path(path)
    pages: dict[str, PrixPage] = {}
    issues: list[ParseIssue] = []
    for line_no, line in _data_lines(path):
        try:
            page_id, record = _parse_spot_line(line)
        except ValueError as exc:
            issues.append(ParseIssue(path=str(path), line_no=line_no, reason=str(exc)))
            continue
        page = pages.get(page_id)
        if page is None:
            page = pages[page_id] = PrixPage(page_id=page_id)
        page.records.append(record)
    return list(pages.values()), issues


def parse_prix_file(path) -> list[PrixPage]:
    """Strict parse of one index file; the first malformed line raises."""
    pages, issues = scan_prix_file(path)
    if issues:
        first = issues[0]
        raise PrixFormatError(first.reason, path=first.path, line_no=first.line_no)
    return pages


def parse_prix_files(paths) -> list[PrixPage]:
    """Parse and merge several index files.

    A page_id may not be declared in more than one file: all spots of a page
    must travel together.
    """
    merged: dict[str, tuple[str, PrixPage]] = {}
    for path in paths:
        for page in parse_prix_file(path):
            if page.page_id in merged:
                other = merged[page.page_id][0]
                raise PrixFormatError(
                    f"page {page.page_id!r} declared in both {other} and {path}",
                    path=str(path),
                )
            merged[page.page_id] = (str(path), page)
    return [page for _, page in merged.values()]


def parse_manifest(path) -> DocumentManifest:
    """Parse and validate a manifest file."""
    path = Path(path)
    declared: list[str] = []
    entries: list[ManifestEntry] = []
    page_owner: dict[str, str] = {}
    for line_no, line in _data_lines(path):
        fields = line.split("\t")
        if fields[0] == "@classes":
            if len(fields) != 2:
                raise PrixFormatError(
                    "@classes directive takes one comma-separated field",
                    path=str(path), line_no=line_no,
                )
            for label in fields[1].split(","):
                label = label.strip()
                if label and label not in declared:
                    declared.append(label)
            continue
        if len(fields) != 3:
            raise PrixFormatError(
                f"expected 3 tab-separated fields, got {len(fields)}",
                path=str(path), line_no=line_no,
            )
        doc_id, class_label = fields[0].strip(), fields[1].strip()
        if not doc_id or not class_label:
            raise PrixFormatError(
                "empty doc_id or class_label", path=str(path), line_no=line_no
            )
        page_ids = [p.strip() for p in fields[2].split(",")]
        if not page_ids or any(not p for p in page_ids):
            raise PrixFormatError(
                f"document {doc_id!r} has an empty page list or empty page id",
                path=str(path), line_no=line_no,
            )
        seen_here = set()
        for page_id in page_ids:
            if page_id in seen_here:
                raise PrixFormatError(
                    f"duplicate page {page_id!r} within document {doc_id!r}",
                    path=str(path), line_no=line_no,
                )
            seen_here.add(page_id)
            if page_id in page_owner:
                raise PrixFormatError(
                    f"page {page_id!r} assigned to both {page_owner[page_id]!r} "
                    f"and {doc_id!r}",
                    path=str(path), line_no=line_no,
                )
            page_owner[page_id] = doc_id
        entries.append(
            ManifestEntry(doc_id=doc_id, class_label=class_label, page_ids=tuple(page_ids))
        )

    seen_docs = set()
    for entry in entries:
        if entry.doc_id in seen_docs:
            raise PrixFormatError(f"duplicate document {entry.doc_id!r}", path=str(path))
        seen_docs.add(entry.doc_id)

    if declared:
        classes = list(declared)
        for entry in entries:
            if entry.class_label not in declared:
                raise PrixFormatError(
                    f"document {entry.doc_id!r} references unknown class "
                    f"{entry.class_label!r}",
                    path=str(path),
                )
    else:
        classes = []
        for entry in entries:
            if entry.class_label not in classes:
                classes.append(entry.class_label)
    if len(classes) < 2:
        raise PrixFormatError(
            f"collection declares {len(classes)} class(es); at least 2 required",
            path=str(path),
        )
    return DocumentManifest(documents=entries, classes=classes)


def validate_collection(pages, manifest: DocumentManifest, strict: bool = False) -> Collection:
    """Match parsed index pages against a manifest.

    Manifest pages with no index data become empty pages with a warning in
    lenient mode and raise in strict mode. Indexed pages the manifest does
    not know (orphans) are excluded with a warning in either mode.
    """
    by_id = {page.page_id: page for page in pages}
    warnings: list[str] = []
    documents: list[Document] = []
    used: set[str] = set()
    for entry in manifest.documents:
        doc_pages = []
        for page_id in entry.page_ids:
            page = by_id.get(page_id)
            if page is None:
                if strict:
                    raise PrixFormatError(
                        f"manifest page {page_id!r} (document {entry.doc_id!r}) "
                        "has no index data"
                    )
                warnings.append(
                    f"page {page_id!r} of document {entry.doc_id!r} has no index "
                    "data; treated as empty"
                )
                page = PrixPage(page_id=page_id)
            elif not page.records:
                warnings.append(f"page {page_id!r} has an empty record list")
            used.add(page_id)
            doc_pages.append(page)
        documents.append(
            Document(doc_id=entry.doc_id, class_label=entry.class_label, pages=doc_pages)
        )
    for page in pages:
        if page.page_id not in used:
            warnings.append(f"orphan page {page.page_id!r} not in manifest; excluded")
    for message in warnings:
        logger.warning("%s", message)
    return Collection(documents=documents, classes=list(manifest.classes), warnings=warnings)


def ingest(prix_paths, manifest_path, strict: bool = False) -> Collection:
    """One-call ingestion: parse index files and manifest, then validate."""
    pages = parse_prix_files(prix_paths)
    manifest = parse_manifest(manifest_path)
    return validate_collection(pages, manifest, strict=strict)


def collection_without(
    collection: Collection, doc_ids=(), page_ids=()
) -> Collection:
    """A reduced view of the collection with documents or pages removed.

    Removing a page from a single-page document leaves an empty document:
    it still counts toward M but contributes nothing to any statistic. Used
    to define the from-scratch reference for leave-one-out folds.
    """
    drop_docs = set(doc_ids)
    drop_pages = set(page_ids)
    documents = []
    for doc in collection.documents:
        if doc.doc_id in drop_docs:
            continue
        pages = [p for p in doc.pages if p.page_id not in drop_pages]
        documents.append(Document(doc_id=doc.doc_id, class_label=doc.class_label, pages=pages))
    return Collection(documents=documents, classes=list(collection.classes))


def _record_to_json(record: PrixRecord):
    bbox = list(record.bbox) if record.bbox is not None else None
    return [record.pseudo_word, record.relevance_prob, bbox]


def save_collection(collection: Collection, path) -> None:
    """Serialize a collection to its versioned JSON bundle."""
    payload = {
        "format": COLLECTION_FORMAT,
        "version": COLLECTION_VERSION,
        "classes": collection.classes,
        "warnings": collection.warnings,
        "documents": [
            {
                "doc_id": doc.doc_id,
                "class_label": doc.class_label,
                "pages": [
                    {
                        "page_id": page.page_id,
                        "records": [_record_to_json(r) for r in page.records],
                    }
                    for page in doc.pages
                ],
            }
            for doc in collection.documents
        ],
    }
    Path(path).write_text(
        json.dumps(payload, ensure_ascii=False, separators=(",", ":")), encoding="utf-8"
    )


def load_collection(path) -> Collection:
    """Load a collection bundle written by :func:`save_collection`."""
    payload = json.loads(Path(path).read_text(encoding="utf-8"))
    if payload.get("format") != COLLECTION_FORMAT:
        raise PrixFormatError(f"not a collection bundle: {path}")
    if payload.get("version") != COLLECTION_VERSION:
        raise PrixFormatError(
            f"unsupported collection version {payload.get('version')!r}", path=str(path)
        )
    documents = []
    for doc in payload["documents"]:
        pages = []
        for page in doc["pages"]:
            records = [
                PrixRecord(
                    pseudo_word=word,
                    relevance_prob=prob,
                    bbox=tuple(bbox) if bbox is not None else None,
                )
                for word, prob, bbox in page["records"]
            ]
            pages.append(PrixPage(page_id=page["page_id"], records=records))
        documents.append(
            Document(doc_id=doc["doc_id"], class_label=doc["class_label"], pages=pages)
        )
    return Collection(
        documents=documents,
        classes=list(payload["classes"]),
        warnings=list(payload.get("warnings", [])),
    )
