"""Threshold-driven augmentation with pseudo-annotated library documents."""

from __future__ import annotations

import hashlib
import json
import logging
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence, TextIO

from .corpus import (
    Annotation,
    Document,
    Segment,
    Source,
    annotations_by_segment,
    group_by_doc,
    segment_document,
)
from .exceptions import PoolExhausted
from .kb import Concept, ConceptId, surface_key
from .training import TrainingExample

logger = logging.getLogger(__name__)

TOP_N_CANDIDATES = 50


@dataclass
class AugmentationConfig:
    k: int = 10
    top_n_candidates: int = TOP_N_CANDIDATES
    w_a: float = 0.4
    seed: int = 0

    def __post_init__(self):
        if self.k < 0:
            raise ValueError("k must be >= 0")
        if self.top_n_candidates < 1:
            raise ValueError("top_n_candidates must be >= 1")
        if not 0.0 <= self.w_a <= 1.0:
            raise ValueError("w_a must lie in [0, 1]")


class Library:
    """Searchable document collection standing in for a literature search engine."""

    def __init__(self, documents: Iterable[Document]):
        self.documents = list(documents)
        self._counts = [Counter(surface_key(d.text).split()) for d in self.documents]

    def __len__(self) -> int:
        return len(self.documents)

    def search(self, query: str, top_n: int) -> list[Document]:
        """Documents containing every query term, by total term frequency."""
        terms = surface_key(query).split()
        if not terms:
            return []
        scored = []
        for doc, counts in zip(self.documents, self._counts):
            if all(counts[t] for t in terms):
                scored.append((-sum(counts[t] for t in terms), doc.doc_id, doc))
        scored.sort(key=lambda s: (s[0], s[1]))
        return [doc for _, _, doc in scored[:top_n]]


def retrieve_candidates(concept: Concept, library: Library | Sequence[Document],
                        top_n: int = TOP_N_CANDIDATES) -> list[Document]:
    if not isinstance(library, Library):
        library = Library(library)
    return library.search(concept.canonical_name, top_n)


def exclude_leakage(candidates: Sequence[Document], target_ids: Iterable[str]) -> list[Document]:
    blocked = set(target_ids)
    return [d for d in candidates if d.doc_id not in blocked]


@dataclass
class PoolEntry:
    segment: Segment
    paper_id: str
    positives: tuple[ConceptId, ...]


@dataclass
class CandidatePool:
    concept: ConceptId
    entries: list[PoolEntry] = field(default_factory=list)
    used: set[int] = field(default_factory=set)

    def __len__(self) -> int:
        return len(self.entries)

    def remaining(self) -> int:
        return len(self.entries) - len(self.used)

    def papers(self) -> set[str]:
        return {e.paper_id for e in self.entries}


def build_pool(concept: ConceptId, candidates: Sequence[Document],
               pseudo: Mapping[str, Sequence[Annotation]]) -> CandidatePool:
    """Segments of the candidate documents carrying a pseudo label of ``concept``."""
    pool = CandidatePool(concept)
    for doc in candidates:
        segments = segment_document(doc)
        attached = annotations_by_segment(segments, pseudo.get(doc.doc_id, ()))
        for seg in segments:
            concepts = {a.concept for a in attached.get(seg.index, ())}
            if concept in concepts:
                pool.entries.append(PoolEntry(seg, doc.doc_id, tuple(sorted(concepts))))
    return pool


def select_diverse_segment(concept: ConceptId, pool: CandidatePool,
                           usage: dict[str, int]) -> PoolEntry:
    """Take an unused segment from the least-used paper (ties: smallest id)."""
    best = None
    for i, entry in enumerate(pool.entries):
        if i in pool.used:
            continue
        key = (usage.get(entry.paper_id, 0), entry.paper_id)
        if best is None or key < best[0]:
            best = (key, i)
    if best is None:
        raise PoolExhausted(f"no unused segments left for {concept}")
    i = best[1]
    pool.used.add(i)
    entry = pool.entries[i]
    usage[entry.paper_id] = usage.get(entry.paper_id, 0) + 1
    return entry


def _next_in_order(concept: ConceptId, pool: CandidatePool, usage: dict[str, int]) -> PoolEntry:
    for i, entry in enumerate(pool.entries):
        if i not in pool.used:
            pool.used.add(i)
            usage[entry.paper_id] = usage.get(entry.paper_id, 0) + 1
            return entry
    raise PoolExhausted(f"no unused segments left for {concept}")


def augment_to_threshold(
    manual_counts: Mapping[ConceptId, int],
    pools: Mapping[ConceptId, CandidatePool],
    cfg: AugmentationConfig,
    manual_examples: Sequence[TrainingExample] = (),
    diversity: bool = True,
    usage: dict[str, int] | None = None,
) -> list[TrainingExample]:
    """Top every below-threshold concept up to ``cfg.k`` documents and shuffle.

    Returns manual and pseudo examples mixed in a seeded random order.
    ``usage`` (paper id -> times used) is shared across concepts.
    """
    usage = {} if usage is None else usage
    pick = select_diverse_segment if diversity else _next_in_order
    pseudo: list[TrainingExample] = []
    for concept in sorted(pools):
        have = manual_counts.get(concept, 0)
        need = cfg.k - have
        if need <= 0:
            continue
        pool = pools[concept]
        for _ in range(need):
            try:
                entry = pick(concept, pool, usage)
            except PoolExhausted:
                logger.info("pool for %s exhausted: %d of %d examples added",
                            concept, len(pool.used), need)
                break
            pseudo.append(TrainingExample(entry.segment, entry.positives, Source.PSEUDO))
    return shuffle_examples(list(manual_examples) + pseudo, cfg.seed)


def shuffle_examples(examples: Sequence[TrainingExample], seed: int) -> list[TrainingExample]:
    """Seeded permutation ordering examples by a keyed hash.

    Because each example's sort key depends only on (seed, example), adding
    or removing pseudo examples never reorders the manual ones.
    """
    def sort_key(item):
        pos, ex = item
        digest = hashlib.blake2b(f"{seed}\0{ex.key}".encode(), digest_size=8).digest()
        return digest, pos

    return [ex for _, ex in sorted(enumerate(examples), key=sort_key)]


def manual_examples(documents: Sequence[Document],
                    annotations: Iterable[Annotation]) -> list[TrainingExample]:
    """One manual example per segment that carries at least one gold label."""
    by_doc = group_by_doc(annotations)
    out = []
    for doc in documents:
        segments = segment_document(doc)
        attached = annotations_by_segment(segments, by_doc.get(doc.doc_id, ()))
        for seg in segments:
            concepts = {a.concept for a in attached.get(seg.index, ())}
            if concepts:
                out.append(TrainingExample(seg, tuple(concepts), Source.MANUAL))
    return out


def example_to_json(ex: TrainingExample) -> dict:
    return {
        "doc_id": ex.segment.doc_id,
        "segment_index": ex.segment.index,
        "tokens": list(ex.segment.tokens),
        "positives": [str(p) for p in ex.positives],
        "source": ex.source.value,
        "weight_class": "augmented" if ex.is_pseudo else "manual",
    }


def example_from_json(obj: Mapping) -> TrainingExample:
    seg = Segment(obj["doc_id"], int(obj["segment_index"]), tuple(obj["tokens"]))
    positives = tuple(ConceptId.parse(p) for p in obj["positives"])
    return TrainingExample(seg, positives, Source(obj["source"]))


def write_examples(examples: Iterable[TrainingExample], fh: TextIO) -> None:
    for ex in examples:
        fh.write(json.dumps(example_to_json(ex), ensure_ascii=False, sort_keys=True) + "\n")


def read_examples(fh: Iterable[str]) -> list[TrainingExample]:
    return [example_from_json(json.loads(line)) for line in fh if line.strip()]

