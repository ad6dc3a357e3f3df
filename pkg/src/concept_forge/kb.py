"""Concept knowledge base: identifiers, name normalization, concept texts.

The on-disk format is JSON lines, one concept per line::

    {"id": "MESH:D007674", "names": ["Kidney Diseases", ...],
     "description": "...", "semantic_type": "Disease",
     "cross_refs": ["OMIM:123456"]}
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Mapping, Sequence, TextIO

from .exceptions import ParseError, UnknownConcept, UnmappedConcept

VOCABULARIES = ("UMLS", "MESH", "OMIM", "SYNTHETIC")

NAME_SEPARATOR = "; "
DESCRIPTION_SEPARATOR = " | "

_HYPHEN_COMMA = re.compile(r"[-,]")
_WHITESPACE = re.compile(r"[ \t\r\n]+")
_EDGE_PUNCT = "\"'()[]{}.;:!?/"


@dataclass(frozen=True, order=True)
class ConceptId:
    vocabulary: str
    code: str

    def __post_init__(self):
        if self.vocabulary not in VOCABULARIES:
            raise ValueError(f"unknown vocabulary {self.vocabulary!r}")
        if not self.code:
            raise ValueError("concept code must be non-empty")

    @classmethod
    def parse(cls, text: str, default_vocabulary: str | None = None) -> "ConceptId":
        """Parse ``"VOCAB:CODE"``; bare codes need ``default_vocabulary``."""
        text = text.strip()
        if ":" in text:
            vocab, code = text.split(":", 1)
            return cls(vocab.upper(), code)
        if default_vocabulary is None:
            raise ValueError(f"concept id {text!r} has no vocabulary prefix")
        return cls(default_vocabulary, text)

    def __str__(self) -> str:
        return f"{self.vocabulary}:{self.code}"


@dataclass(frozen=True)
class Concept:
    id: ConceptId
    names: tuple[str, ...]
    description: str = ""
    semantic_type: str = ""
    cross_refs: tuple[ConceptId, ...] = ()

    def __post_init__(self):
        if not self.names:
            raise ValueError(f"concept {self.id} has no names")
        object.__setattr__(self, "names", tuple(self.names))
        object.__setattr__(self, "cross_refs", tuple(self.cross_refs))

    @property
    def canonical_name(self) -> str:
        return self.names[0]


@dataclass(frozen=True)
class ConceptText:
    concept_id: ConceptId
    text: str


def normalize_name(raw: str) -> str:
    """Lower-case, turn hyphens/commas into spaces, collapse whitespace."""
    text = _HYPHEN_COMMA.sub(" ", raw.lower())
    return _WHITESPACE.sub(" ", text).strip()


def surface_key(text: str) -> str:
    """``normalize_name`` plus removal of punctuation glued to the edges.

    Whitespace tokens keep trailing periods and brackets ("disease."), which
    must not block a name match.
    """
    words = (w.strip(_EDGE_PUNCT) for w in normalize_name(text).split(" "))
    return " ".join(w for w in words if w)


def dedup_names(names: Sequence[str]) -> list[str]:
    seen: set[str] = set()
    out = []
    for name in names:
        key = normalize_name(name)
        if key in seen:
            continue
        seen.add(key)
        out.append(name)
    return out


def build_concept_text(concept: Concept) -> ConceptText:
    names = [normalize_name(n) for n in dedup_names(concept.names)]
    text = NAME_SEPARATOR.join(names)
    if concept.description:
        text += DESCRIPTION_SEPARATOR + concept.description
    return ConceptText(concept.id, text)


@dataclass
class KnowledgeBase:
    """Immutable-after-load collection of concepts keyed by :class:`ConceptId`."""

    concepts: dict[ConceptId, Concept] = field(default_factory=dict)

    def __post_init__(self):
        self._texts: dict[ConceptId, ConceptText] = {}

    @classmethod
    def from_concepts(cls, concepts: Iterable[Concept]) -> "KnowledgeBase":
        table: dict[ConceptId, Concept] = {}
        for c in concepts:
            if c.id in table:
                raise ValueError(f"duplicate concept id {c.id}")
            table[c.id] = c
        return cls(table)

    def __len__(self) -> int:
        return len(self.concepts)

    def __contains__(self, cid: object) -> bool:
        return cid in self.concepts

    def __iter__(self) -> Iterator[Concept]:
        return iter(self.concepts.values())

    def __getitem__(self, cid: ConceptId) -> Concept:
        try:
            return self.concepts[cid]
        except KeyError:
            raise UnknownConcept(str(cid)) from None

    def get(self, cid: ConceptId) -> Concept | None:
        return self.concepts.get(cid)

    def target_ids(self) -> list[ConceptId]:
        """Concepts that can be extracted, i.e. everything except UMLS pivots."""
        return sorted(cid for cid in self.concepts if cid.vocabulary != "UMLS")

    def concept_text(self, cid: ConceptId) -> ConceptText:
        if cid not in self._texts:
            self._texts[cid] = build_concept_text(self[cid])
        return self._texts[cid]


def map_umls_to_target(cui: ConceptId, document_text: str, kb: KnowledgeBase) -> ConceptId:
    """Resolve a UMLS CUI to a target-vocabulary id.

    With several cross references, the first one (KB order) whose canonical
    name occurs in the document wins; otherwise the smallest id.
    """
    refs = kb[cui].cross_refs
    if not refs:
        raise UnmappedConcept(str(cui))
    if len(refs) == 1:
        return refs[0]
    doc = normalize_name(document_text)
    for ref in refs:
        target = kb.get(ref)
        if target is not None and normalize_name(target.canonical_name) in doc:
            return ref
    return min(refs)


def concept_to_json(concept: Concept) -> dict:
    return {
        "id": str(concept.id),
        "names": list(concept.names),
        "description": concept.description,
        "semantic_type": concept.semantic_type,
        "cross_refs": [str(r) for r in concept.cross_refs],
    }


def concept_from_json(obj: Mapping) -> Concept:
    return Concept(
        id=ConceptId.parse(obj["id"]),
        names=tuple(obj["names"]),
        description=obj.get("description", ""),
        semantic_type=obj.get("semantic_type", ""),
        cross_refs=tuple(ConceptId.parse(r) for r in obj.get("cross_refs", [])),
    )


def read_kb(lines: Iterable[str]) -> KnowledgeBase:
    concepts = []
    for line_no, line in enumerate(lines, 1):
        if not line.strip():
            continue
        try:
            concepts.append(concept_from_json(json.loads(line)))
        except (ValueError, KeyError, TypeError) as exc:
            raise ParseError(f"bad KB record: {exc}", line_no) from exc
    return KnowledgeBase.from_concepts(concepts)


def load_kb(path: str | Path) -> KnowledgeBase:
    with open(path, encoding="utf-8") as fh:
        return read_kb(fh)


def write_kb(kb: KnowledgeBase, fh: TextIO) -> None:
    for concept in kb:
        fh.write(json.dumps(concept_to_json(concept), ensure_ascii=False) + "\n")


def save_kb(kb: KnowledgeBase, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        write_kb(kb, fh)
