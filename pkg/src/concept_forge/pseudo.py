"""Rule-annotator output handling: candidate parsing, top-1 selection, filters.

Annotator output is one candidate per line::

    docId|MMI|score|preferredName|CUI|semTypes|startToken|endToken
"""

from __future__ import annotations

import json
import logging
from collections import defaultdict
from dataclasses import dataclass, replace
from typing import Iterable, Mapping, Sequence, TextIO

from sklearn.base import BaseEstimator, TransformerMixin

from .corpus import Annotation, Document, Source
from .exceptions import NegativeScore, ParseError, UnmappedConcept
from .kb import ConceptId, KnowledgeBase, map_umls_to_target, surface_key

logger = logging.getLogger(__name__)

ABBREVIATION_MAX_LEN = 5


@dataclass(frozen=True)
class RawCandidateSet:
    doc_id: str
    span: tuple[int, int]
    mention: str
    candidates: tuple[tuple[ConceptId, float], ...]

    def __post_init__(self):
        if not self.candidates:
            raise ValueError("candidate set must be non-empty")
        ranked = sorted(self.candidates, key=lambda c: (-c[1], c[0]))
        object.__setattr__(self, "candidates", tuple(ranked))


def parse_mmi(
    stream: TextIO | Iterable[str],
    documents: Mapping[str, Document] | None = None,
) -> list[RawCandidateSet]:
    """Group candidate rows by (doc, span) into ranked candidate sets.

    When ``documents`` is given the mention is read off the document tokens,
    otherwise it is left empty.
    """
    grouped: dict[tuple[str, int, int], list[tuple[ConceptId, float]]] = defaultdict(list)
    for line_no, line in enumerate(stream, 1):
        line = line.rstrip("\r\n")
        if not line.strip():
            continue
        fields = line.split("|")
        if len(fields) != 8 or fields[1] != "MMI":
            raise ParseError(f"expected 8 '|' fields with tag MMI, got {len(fields)}", line_no)
        doc_id, _, score_s, _name, cui, _sem, start_s, end_s = fields
        try:
            score = float(score_s)
            start, end = int(start_s), int(end_s)
        except ValueError:
            raise ParseError(f"bad number in {line!r}", line_no) from None
        if score < 0:
            raise NegativeScore(f"negative score {score}", line_no)
        if not 0 <= start < end:
            raise ParseError(f"bad token span {start}-{end}", line_no)
        try:
            cid = ConceptId.parse(cui, default_vocabulary="UMLS")
        except ValueError as exc:
            raise ParseError(str(exc), line_no) from None
        grouped[(doc_id, start, end)].append((cid, score))

    out = []
    for (doc_id, start, end), cands in grouped.items():
        mention = ""
        if documents is not None and doc_id in documents:
            mention = " ".join(documents[doc_id].tokens[start:end])
        out.append(RawCandidateSet(doc_id, (start, end), mention, tuple(cands)))
    return out


def write_mmi(candidate_sets: Iterable[RawCandidateSet], kb: KnowledgeBase | None = None) -> str:
    """Inverse of :func:`parse_mmi` (name and semantic type come from ``kb``)."""
    lines = []
    for raw in candidate_sets:
        for cid, score in raw.candidates:
            concept = kb.get(cid) if kb is not None else None
            name = concept.canonical_name if concept else ""
            stype = concept.semantic_type if concept else ""
            lines.append("|".join((raw.doc_id, "MMI", repr(float(score)), name, str(cid), stype,
                                   str(raw.span[0]), str(raw.span[1]))))
    return "".join(line + "\n" for line in lines)


def annotation_to_json(ann: Annotation) -> dict:
    return {"doc_id": ann.doc_id, "start": ann.start, "end": ann.end, "mention": ann.mention,
            "concept": str(ann.concept), "score": ann.score, "source": ann.source.value}


def annotation_from_json(obj: Mapping) -> Annotation:
    return Annotation(obj["doc_id"], int(obj["start"]), int(obj["end"]), obj["mention"],
                      ConceptId.parse(obj["concept"]), float(obj["score"]), Source(obj["source"]))


def write_annotations(anns: Iterable[Annotation], fh: TextIO) -> None:
    for ann in anns:
        fh.write(json.dumps(annotation_to_json(ann), sort_keys=True, ensure_ascii=False) + "\n")


def read_annotations(fh: Iterable[str]) -> list[Annotation]:
    out = []
    for line_no, line in enumerate(fh, 1):
        if not line.strip():
            continue
        try:
            out.append(annotation_from_json(json.loads(line)))
        except (KeyError, ValueError) as exc:
            raise ParseError(f"bad annotation record: {exc}", line_no) from None
    return out


def select_top_candidate(raw: RawCandidateSet) -> Annotation:
    concept, score = raw.candidates[0]
    start, end = raw.span
    return Annotation(raw.doc_id, start, end, raw.mention, concept, score, Source.PSEUDO)


def _is_abbreviation(name: str) -> bool:
    letters = name.strip()
    return len(letters) <= ABBREVIATION_MAX_LEN and letters.isupper()


def is_false_abbreviation(ann: Annotation, kb: KnowledgeBase) -> bool:
    concept = kb.get(ann.concept)
    if concept is None:
        return False
    mention = ann.mention.strip()
    key = surface_key(mention)
    matches = [n for n in concept.names if surface_key(n) == key]
    if not matches or any(n == mention for n in matches):
        return False
    return _is_abbreviation(matches[0]) and not mention.isupper()


def filter_false_abbreviations(
    doc: Document | None, anns: Sequence[Annotation], kb: KnowledgeBase
) -> list[Annotation]:
    """Drop annotations matched through an upper-case abbreviation name when
    the text itself is not upper case (``was`` -> ``WAS``)."""
    if doc is not None:
        anns = [_with_mention(a, doc) for a in anns]
    return [a for a in anns if not is_false_abbreviation(a, kb)]


def _with_mention(ann: Annotation, doc: Document) -> Annotation:
    if ann.mention:
        return ann
    return replace(ann, mention=" ".join(doc.tokens[ann.start:ann.end]))


def filter_overlaps(anns: Sequence[Annotation]) -> list[Annotation]:
    """Keep the longest annotation of every overlapping group.

    Ties go to the higher score, then the earlier start.
    """
    ranked = sorted(anns, key=lambda a: (-(a.end - a.start), -a.score, a.start, a.concept))
    kept: list[Annotation] = []
    for ann in ranked:
        if not any(ann.overlaps(k) for k in kept):
            kept.append(ann)
    return sorted(kept, key=lambda a: (a.start, a.end, a.concept))


def map_annotations_to_target(
    anns: Iterable[Annotation], documents: Mapping[str, Document], kb: KnowledgeBase
) -> list[Annotation]:
    """Rewrite UMLS annotations to target ids; unmappable ones are dropped."""
    out = []
    for ann in anns:
        if ann.concept.vocabulary != "UMLS":
            out.append(ann)
            continue
        if ann.concept not in kb:
            logger.debug("dropping annotation with unknown CUI %s", ann.concept)
            continue
        try:
            target = map_umls_to_target(ann.concept, documents[ann.doc_id].text, kb)
        except UnmappedConcept:
            logger.debug("dropping unmapped CUI %s", ann.concept)
            continue
        out.append(replace(ann, concept=target))
    return out


class AnnotationFilter(TransformerMixin, BaseEstimator):
    """Apply the post-annotation filters to per-document annotation lists.

    ``transform`` takes ``[(document, annotations), ...]`` and returns the
    filtered annotation lists in the same order. Filters run abbreviation
    first, then overlap.
    """

    def __init__(self, kb: KnowledgeBase | None = None, abbreviation: bool = True,
                 overlap: bool = True):
        self.kb = kb
        self.abbreviation = abbreviation
        self.overlap = overlap

    def fit(self, X=None, y=None):
        if self.abbreviation and self.kb is None:
            raise ValueError("the abbreviation filter needs a knowledge base")
        return self

    def transform(self, X):
        out = []
        for doc, anns in X:
            anns = list(anns)
            if self.abbreviation:
                anns = filter_false_abbreviations(doc, anns, self.kb)
            if self.overlap:
                anns = filter_overlaps(anns)
            out.append(anns)
        return out
