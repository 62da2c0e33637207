"""Corpus data model and manifest ingestion.

A manifest is a UTF-8 line-delimited JSON file. Document lines:

    {"kind": "doc", "doc_id": ..., "image_path": ... | null,
     "ocr_text": ..., "source_dataset": ..., "pools": [...]}

QA lines:

    {"kind": "qa", "qa_id": ..., "question": ..., "answers": [...],
     "gold_doc_ids": [...], "hop_type": "single"|"multi",
     "answer_type": "extractive"|"abstractive", "source_dataset": ...}

Image paths are resolved relative to the manifest file. A null/absent
image_path marks a feature stub: a synthetic record whose patch features
are derived deterministically from its doc_id instead of a raster.

Manifests are immutable after ingestion and ordered by id, so ingestion
is insensitive to input line order.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from .errors import DataError, ManifestError
from .ioutil import atomic_write_text
from .raster import load_raster

HOP_TYPES = ("single", "multi")
ANSWER_TYPES = ("extractive", "abstractive")

ALL_POOL = "all"


@dataclass(frozen=True)
class DocumentRecord:
    """One corpus document: raster (or stub), OCR sidecar text, pool tags."""

    doc_id: str
    ocr_text: str
    source_dataset: str
    pool_tags: frozenset[str]
    image_path: Path | None = None

    def __post_init__(self):
        if not self.doc_id:
            raise DataError("doc_id must be non-empty")
        if not self.source_dataset:
            raise DataError(f"doc {self.doc_id!r}: source_dataset must be non-empty")
        if self.source_dataset not in self.pool_tags:
            raise DataError(f"doc {self.doc_id!r}: pool_tags must include the source dataset")

    @property
    def feature_stub(self) -> bool:
        return self.image_path is None

    def load_raster(self) -> np.ndarray:
        if self.image_path is None:
            raise DataError(f"doc {self.doc_id!r} is a feature stub, it has no raster")
        return load_raster(self.image_path)


@dataclass(frozen=True)
class QaInstance:
    qa_id: str
    question: str
    answers: tuple[str, ...]
    gold_doc_ids: tuple[str, ...]
    hop_type: str
    answer_type: str
    source_dataset: str

    def __post_init__(self):
        if not self.qa_id:
            raise DataError("qa_id must be non-empty")
        if not self.answers:
            raise DataError(f"qa {self.qa_id!r}: answers must be non-empty")
        if not self.gold_doc_ids:
            raise DataError(f"qa {self.qa_id!r}: gold_doc_ids must be non-empty")
        if self.hop_type not in HOP_TYPES:
            raise DataError(f"qa {self.qa_id!r}: unknown hop_type {self.hop_type!r}")
        if self.answer_type not in ANSWER_TYPES:
            raise DataError(f"qa {self.qa_id!r}: unknown answer_type {self.answer_type!r}")
        if self.hop_type == "multi" and len(self.gold_doc_ids) < 2:
            raise DataError(f"qa {self.qa_id!r}: multi-hop requires at least 2 gold docs")


@dataclass(frozen=True)
class CorpusManifest:
    documents: tuple[DocumentRecord, ...]
    qa: tuple[QaInstance, ...]
    pools: dict[str, frozenset[str]] = field(compare=False)

    def document(self, doc_id: str) -> DocumentRecord:
        doc = self._by_id().get(doc_id)
        if doc is None:
            raise DataError(f"unknown doc_id {doc_id!r}")
        return doc

    def _by_id(self) -> dict[str, DocumentRecord]:
        # cached on first use; manifests are immutable
        cache = self.__dict__.get("_doc_index")
        if cache is None:
            cache = {d.doc_id: d for d in self.documents}
            self.__dict__["_doc_index"] = cache
        return cache


def build_manifest(documents: Iterable[DocumentRecord], qa: Iterable[QaInstance]) -> CorpusManifest:
    """Assemble a manifest, enforcing every cross-record invariant."""
    docs = sorted(documents, key=lambda d: d.doc_id)
    seen: set[str] = set()
    for d in docs:
        if d.doc_id in seen:
            raise DataError(f"duplicate doc_id {d.doc_id!r}")
        seen.add(d.doc_id)

    qa_sorted = sorted(qa, key=lambda q: q.qa_id)
    seen_qa: set[str] = set()
    for q in qa_sorted:
        if q.qa_id in seen_qa:
            raise DataError(f"duplicate qa_id {q.qa_id!r}")
        seen_qa.add(q.qa_id)
        for gid in q.gold_doc_ids:
            if gid not in seen:
                raise DataError(f"qa {q.qa_id!r}: dangling gold_doc_id {gid!r}")

    pools: dict[str, set[str]] = {}
    for d in docs:
        for tag in d.pool_tags:
            if tag == ALL_POOL:
                continue
            pools.setdefault(tag, set()).add(d.doc_id)
    pools[ALL_POOL] = {d.doc_id for d in docs}
    frozen = {name: frozenset(ids) for name, ids in pools.items()}
    return CorpusManifest(documents=tuple(docs), qa=tuple(qa_sorted), pools=frozen)


_DOC_KEYS = {"kind", "doc_id", "image_path", "ocr_text", "source_dataset", "pools"}
_QA_KEYS = {"kind", "qa_id", "question", "answers", "gold_doc_ids", "hop_type",
            "answer_type", "source_dataset"}


def _require(obj: dict, keys: set[str], line_no: int) -> None:
    missing = keys - {"image_path"} - set(obj)
    if missing:
        raise ManifestError(f"missing keys {sorted(missing)}", line_no)
    unknown = set(obj) - keys
    if unknown:
        raise ManifestError(f"unknown keys {sorted(unknown)}", line_no)


def ingest_manifest(path: str | Path) -> CorpusManifest:
    """Parse and validate a manifest file.

    Errors carry the 1-based line number of the offending record. Blank
    lines are ignored.
    """
    path = Path(path)
    base = path.parent
    documents: list[DocumentRecord] = []
    qa: list[QaInstance] = []
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise DataError(f"cannot read manifest {path}: {exc}") from exc

    for line_no, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ManifestError(f"invalid JSON ({exc.msg})", line_no) from exc
        if not isinstance(obj, dict):
            raise ManifestError("record must be a JSON object", line_no)
        kind = obj.get("kind")
        try:
            if kind == "doc":
                _require(obj, _DOC_KEYS, line_no)
                image_path = obj.get("image_path")
                resolved = None if image_path is None else (base / image_path).resolve()
                documents.append(DocumentRecord(
                    doc_id=str(obj["doc_id"]),
                    ocr_text=str(obj["ocr_text"]),
                    source_dataset=str(obj["source_dataset"]),
                    pool_tags=frozenset(map(str, obj["pools"])) | {str(obj["source_dataset"])},
                    image_path=resolved,
                ))
            elif kind == "qa":
                _require(obj, _QA_KEYS, line_no)
                qa.append(QaInstance(
                    qa_id=str(obj["qa_id"]),
                    question=str(obj["question"]),
                    answers=tuple(map(str, obj["answers"])),
                    gold_doc_ids=tuple(map(str, obj["gold_doc_ids"])),
                    hop_type=str(obj["hop_type"]),
                    answer_type=str(obj["answer_type"]),
                    source_dataset=str(obj["source_dataset"]),
                ))
            else:
                raise ManifestError(f"unknown kind {kind!r}", line_no)
        except DataError as exc:
            if isinstance(exc, ManifestError):
                raise
            raise ManifestError(str(exc), line_no) from exc

    return build_manifest(documents, qa)


def write_manifest(manifest: CorpusManifest, path: str | Path) -> None:
    """Serialize a manifest so that re-ingesting reproduces it exactly.

    Image paths are written relative to the output file where possible.
    """
    path = Path(path)
    base = path.parent.resolve()
    out: list[str] = []
    for d in manifest.documents:
        if d.image_path is None:
            rel = None
        else:
            try:
                rel = os.path.relpath(d.image_path, base)
            except ValueError:  # different drive (windows); keep absolute
                rel = str(d.image_path)
        out.append(json.dumps({
            "kind": "doc",
            "doc_id": d.doc_id,
            "image_path": rel,
            "ocr_text": d.ocr_text,
            "source_dataset": d.source_dataset,
            "pools": sorted(d.pool_tags),
        }, ensure_ascii=False))
    for q in manifest.qa:
        out.append(json.dumps({
            "kind": "qa",
            "qa_id": q.qa_id,
            "question": q.question,
            "answers": list(q.answers),
            "gold_doc_ids": list(q.gold_doc_ids),
            "hop_type": q.hop_type,
            "answer_type": q.answer_type,
            "source_dataset": q.source_dataset,
        }, ensure_ascii=False))
    atomic_write_text(path, "\n".join(out) + "\n")


def select_pool(manifest: CorpusManifest, pool: str) -> list[DocumentRecord]:
    """Documents tagged with `pool`, sorted by doc_id. "all" selects everything."""
    if pool not in manifest.pools:
        raise DataError(f"unknown pool {pool!r}; available: {sorted(manifest.pools)}")
    if pool == ALL_POOL:
        return list(manifest.documents)
    return [d for d in manifest.documents if pool in d.pool_tags]
