"""Annotated corpora: PubTator I/O, segmentation and dataset statistics."""

from __future__ import annotations

import logging
import re
from collections import defaultdict
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Sequence, TextIO

from .exceptions import OffsetError, ParseError, UnknownConcept
from .kb import ConceptId, KnowledgeBase, surface_key

logger = logging.getLogger(__name__)

MAX_SEGMENT_TOKENS = 512
UNDERTRAINED_THRESHOLD = 10

_TOKEN = re.compile(r"\S+")


class Source(str, Enum):
    MANUAL = "manual"
    PSEUDO = "pseudo"


class MentionClass(str, Enum):
    CANONICAL = "canonical"
    NON_CANONICAL = "non_canonical"


def tokenize_with_offsets(text: str) -> list[tuple[str, int, int]]:
    return [(m.group(), m.start(), m.end()) for m in _TOKEN.finditer(text)]


@dataclass
class Document:
    doc_id: str
    title: str
    body: str | None = ""
    tokens: list[str] = field(init=False, repr=False)

    def __post_init__(self):
        self.tokens = [t for t, _, _ in tokenize_with_offsets(self.text)]

    @property
    def text(self) -> str:
        # PubTator offsets index into "title abstract"
        if self.body:
            return f"{self.title} {self.body}"
        return self.title

    @classmethod
    def from_tokens(cls, doc_id: str, tokens: Sequence[str]) -> "Document":
        return cls(doc_id, " ".join(tokens), None)


@dataclass(frozen=True)
class Segment:
    doc_id: str
    index: int
    tokens: tuple[str, ...]
    start: int = 0  # offset of the first token in the parent document

    def __post_init__(self):
        object.__setattr__(self, "tokens", tuple(self.tokens))
        if self.index < 0:
            raise ValueError("segment index must be >= 0")
        if len(self.tokens) > MAX_SEGMENT_TOKENS:
            raise ValueError(f"segment holds {len(self.tokens)} tokens, cap is {MAX_SEGMENT_TOKENS}")

    def __len__(self) -> int:
        return len(self.tokens)


@dataclass(frozen=True)
class Annotation:
    doc_id: str
    start: int
    end: int
    mention: str
    concept: ConceptId
    score: float = 1.0
    source: Source = Source.MANUAL
    # kept only to re-serialize PubTator input byte-for-byte
    char_span: tuple[int, int] | None = None
    raw_text: str | None = None
    entity_type: str = ""
    raw_id: str | None = None

    @property
    def span(self) -> tuple[int, int]:
        return (self.start, self.end)

    def __len__(self) -> int:
        return self.end - self.start

    def overlaps(self, other: "Annotation") -> bool:
        return self.start < other.end and other.start < self.end


@dataclass
class CorpusStats:
    training_doc_counts: dict[ConceptId, int]
    fraction_untrained: float
    fraction_undertrained: float
    fraction_non_canonical: float
    fraction_trained: float = 0.0

    def count(self, cid: ConceptId) -> int:
        return self.training_doc_counts.get(cid, 0)

    def is_rare(self, cid: ConceptId) -> bool:
        return self.count(cid) < UNDERTRAINED_THRESHOLD


def _char_span_to_tokens(doc: Document, start: int, end: int, line_no: int) -> tuple[int, int]:
    spans = tokenize_with_offsets(doc.text)
    covered = [i for i, (_, s, e) in enumerate(spans) if s < end and start < e]
    if start < 0 or end > len(doc.text) or start >= end or not covered:
        raise OffsetError(f"char span {start}-{end} covers no token of {doc.doc_id}", line_no)
    first, last = covered[0], covered[-1]
    if spans[first][1] != start or spans[last][2] != end:
        logger.warning(
            "line %d: span %d-%d of %s clips a token; expanded to %d-%d",
            line_no, start, end, doc.doc_id, spans[first][1], spans[last][2],
        )
    return first, last + 1


def _parse_annotation_line(doc: Document, fields: list[str], line_no: int) -> list[Annotation]:
    if len(fields) != 6:
        raise ParseError(f"annotation line has {len(fields)} fields, expected 6", line_no)
    pmid, s, e, text, etype, raw_id = fields
    if pmid != doc.doc_id:
        raise ParseError(f"annotation for {pmid} inside document {doc.doc_id}", line_no)
    try:
        cstart, cend = int(s), int(e)
    except ValueError:
        raise ParseError(f"non-integer offsets {s!r}, {e!r}", line_no) from None
    tstart, tend = _char_span_to_tokens(doc, cstart, cend, line_no)
    mention = " ".join(doc.tokens[tstart:tend])
    out = []
    for part in raw_id.split("|"):
        try:
            cid = ConceptId.parse(part, default_vocabulary="MESH")
        except ValueError as exc:
            raise ParseError(str(exc), line_no) from None
        out.append(Annotation(
            doc.doc_id, tstart, tend, mention, cid, 1.0, Source.MANUAL,
            char_span=(cstart, cend), raw_text=text, entity_type=etype, raw_id=raw_id,
        ))
    return out


def parse_pubtator(stream: TextIO | Iterable[str]) -> tuple[list[Document], list[Annotation]]:
    documents: list[Document] = []
    annotations: list[Annotation] = []
    doc: Document | None = None
    seen: set[str] = set()

    for line_no, line in enumerate(stream, 1):
        line = line.rstrip("\n").rstrip("\r")
        if not line:
            doc = None
            continue
        if "\t" not in line and "|" in line[:40]:
            parts = line.split("|", 2)
            if len(parts) != 3 or parts[1] not in ("t", "a"):
                raise ParseError(f"malformed text line {line[:30]!r}", line_no)
            pmid, kind, text = parts
            if kind == "t":
                if doc is not None:
                    raise ParseError("title line without preceding blank line", line_no)
                if pmid in seen:
                    raise ParseError(f"duplicate document id {pmid}", line_no)
                seen.add(pmid)
                doc = Document(pmid, text, None)
                documents.append(doc)
            else:
                if doc is None or doc.doc_id != pmid or doc.body is not None:
                    raise ParseError("abstract line must directly follow its title", line_no)
                doc = Document(pmid, doc.title, text)
                documents[-1] = doc
            continue
        if doc is None:
            raise ParseError("annotation line outside a document", line_no)
        annotations.extend(_parse_annotation_line(doc, line.split("\t"), line_no))
    return documents, annotations


def write_pubtator(documents: Sequence[Document], annotations: Sequence[Annotation]) -> str:
    """Serialize back to PubTator; composite ids are re-joined."""
    by_doc: dict[str, list[Annotation]] = defaultdict(list)
    for ann in annotations:
        by_doc[ann.doc_id].append(ann)
    lines = []
    for doc in documents:
        lines.append(f"{doc.doc_id}|t|{doc.title}")
        if doc.body is not None:
            lines.append(f"{doc.doc_id}|a|{doc.body}")
        previous = None
        for ann in by_doc.get(doc.doc_id, []):
            key = (ann.char_span, ann.raw_text, ann.entity_type, ann.raw_id)
            if ann.raw_id is not None and ann.raw_id.count("|") and key == previous:
                continue
            previous = key
            cstart, cend = ann.char_span if ann.char_span else _token_span_to_chars(doc, ann)
            text = ann.raw_text if ann.raw_text is not None else ann.mention
            raw_id = ann.raw_id if ann.raw_id is not None else str(ann.concept)
            lines.append(f"{doc.doc_id}\t{cstart}\t{cend}\t{text}\t{ann.entity_type}\t{raw_id}")
        lines.append("")
    return "".join(line + "\n" for line in lines)


def _token_span_to_chars(doc: Document, ann: Annotation) -> tuple[int, int]:
    spans = tokenize_with_offsets(doc.text)
    return spans[ann.start][1], spans[ann.end - 1][2]


def segment_document(doc: Document, max_tokens: int = MAX_SEGMENT_TOKENS) -> list[Segment]:
    if max_tokens < 1:
        raise ValueError("max_tokens must be >= 1")
    toks = doc.tokens
    return [
        Segment(doc.doc_id, i, tuple(toks[start:start + max_tokens]), start)
        for i, start in enumerate(range(0, len(toks), max_tokens))
    ]


def annotations_by_segment(
    segments: Sequence[Segment], annotations: Iterable[Annotation]
) -> dict[int, list[Annotation]]:
    """Attach annotations to the segment holding their start token.

    Spans running past the end of that segment are dropped with a warning.
    """
    out: dict[int, list[Annotation]] = defaultdict(list)
    for ann in annotations:
        for seg in segments:
            if seg.start <= ann.start < seg.start + len(seg):
                if ann.end > seg.start + len(seg):
                    logger.warning("annotation %s@%d-%d straddles a segment; dropped",
                                   ann.concept, ann.start, ann.end)
                else:
                    out[seg.index].append(ann)
                break
    return out


def group_by_doc(annotations: Iterable[Annotation]) -> dict[str, list[Annotation]]:
    out: dict[str, list[Annotation]] = defaultdict(list)
    for ann in annotations:
        out[ann.doc_id].append(ann)
    return out


def concept_occurrence_counts(
    training: Iterable[tuple[Document, Annotation]] | Iterable[Annotation],
) -> defaultdict[ConceptId, int]:
    """Number of distinct training documents mentioning each concept."""
    docs_per_concept: dict[ConceptId, set[str]] = defaultdict(set)
    for item in training:
        ann = item[1] if isinstance(item, tuple) else item
        docs_per_concept[ann.concept].add(ann.doc_id)
    counts: defaultdict[ConceptId, int] = defaultdict(int)
    for cid, docs in docs_per_concept.items():
        counts[cid] = len(docs)
    return counts


def classify_mention(ann: Annotation, kb: KnowledgeBase) -> MentionClass:
    concept = kb.get(ann.concept)
    if concept is None:
        raise UnknownConcept(str(ann.concept))
    surface = surface_key(ann.raw_text if ann.raw_text is not None else ann.mention)
    if any(surface_key(name) == surface for name in concept.names):
        return MentionClass.CANONICAL
    return MentionClass.NON_CANONICAL


def corpus_stats(
    train_annotations: Iterable[Annotation],
    eval_annotations: Sequence[Annotation],
    kb: KnowledgeBase | None = None,
) -> CorpusStats:
    """Training-document counts plus untrained/undertrained/non-canonical fractions
    over the evaluation annotations."""
    counts = concept_occurrence_counts(train_annotations)
    n = len(eval_annotations)
    if n == 0:
        return CorpusStats(dict(counts), 0.0, 0.0, 0.0, 0.0)
    untrained = sum(1 for a in eval_annotations if counts.get(a.concept, 0) == 0)
    under = sum(1 for a in eval_annotations if counts.get(a.concept, 0) < UNDERTRAINED_THRESHOLD)
    non_canonical = 0
    if kb is not None:
        non_canonical = sum(
            1 for a in eval_annotations
            if a.concept in kb and classify_mention(a, kb) is MentionClass.NON_CANONICAL
        )
    return CorpusStats(
        dict(counts),
        fraction_untrained=untrained / n,
        fraction_undertrained=under / n,
        fraction_non_canonical=non_canonical / n,
        fraction_trained=(n - untrained) / n,
    )
