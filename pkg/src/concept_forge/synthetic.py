"""Synthetic benchmark world for offline experiments.

Each concept owns a two-word canonical name, a few non-canonical surface
forms, and a set of context words that co-occur with it. Target documents
carry gold annotations; library documents mention concepts by their
canonical name (so a name query finds them) and receive annotator output
with injected label noise, spurious abbreviation matches and nested
broad-concept matches.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ._random import stream
from .corpus import Annotation, Document, Source, tokenize_with_offsets
from .experiment import Benchmark
from .kb import Concept, ConceptId, KnowledgeBase
from .pseudo import RawCandidateSet

# chosen from no-augmentation dev F1 on the default world
TUNED_TRAINING = {"learning_rate": 0.5, "epochs": 20}

_ONSETS = ("b", "br", "c", "ch", "d", "dr", "f", "g", "gl", "h", "j", "k", "l", "m", "n",
           "p", "pr", "qu", "r", "s", "st", "t", "tr", "v", "w", "z")
_VOWELS = ("a", "e", "i", "o", "u", "ai", "ea", "io", "ou")
_CODAS = ("", "n", "r", "s", "l", "x", "th", "m", "nd", "st")


@dataclass
class WorldSpec:
    n_concepts: int = 200
    n_rare: int = 30
    max_rare_manual: int = 3
    frequent_docs: int = 10
    n_broad: int = 5
    n_abbrev: int = 8
    n_dev_docs: int = 80
    n_test_docs: int = 120
    library_per_concept: int = 12
    leaked_test_docs: int = 10
    noise: float = 0.15
    canonical_rate: float = 0.5
    background_words: int = 400
    background_per_doc: int = 18
    seed: int = 0


@dataclass
class _ConceptModel:
    cid: ConceptId
    cui: ConceptId
    canonical: list[str]
    synonyms: list[list[str]]
    context: list[str]
    semantic_type: str
    abbreviation: str | None = None
    broad: bool = False


@dataclass
class _Builder:
    spec: WorldSpec
    rng: np.random.Generator
    used: set[str] = field(default_factory=set)

    def word(self, syllables: int | None = None) -> str:
        while True:
            n = syllables or int(self.rng.integers(2, 4))
            w = "".join(
                self.rng.choice(_ONSETS) + self.rng.choice(_VOWELS) + self.rng.choice(_CODAS)
                for _ in range(n)
            )
            if w not in self.used and len(w) > 3:
                self.used.add(w)
                return w


def _make_concepts(b: _Builder, background: list[str]) -> list[_ConceptModel]:
    spec = b.spec
    models = []
    abbreviation_words = [w for w in background if len(w) <= 5][: spec.n_abbrev]
    for i in range(spec.n_concepts):
        broad = i < spec.n_broad
        canonical = [b.word()] if broad else [b.word(), b.word()]
        models.append(_ConceptModel(
            cid=ConceptId("MESH", f"D{100000 + i:06d}"),
            cui=ConceptId("UMLS", f"C{1000000 + i:07d}"),
            canonical=canonical,
            synonyms=[[b.word()], [b.word(), b.word()]],
            context=[b.word() for _ in range(6)],
            semantic_type="Chemical" if i % 2 else "Disease",
            broad=broad,
        ))
    # some concepts gain an upper-case abbreviation that collides with a common word
    for word, model in zip(abbreviation_words, models[spec.n_broad:]):
        model.abbreviation = word.upper()
    return models


def _knowledge_base(models: list[_ConceptModel]) -> KnowledgeBase:
    concepts = []
    for m in models:
        name = " ".join(w.capitalize() for w in m.canonical)
        names = [name, "-".join(m.canonical).capitalize()] if len(m.canonical) > 1 else [name]
        if m.abbreviation:
            names.append(m.abbreviation)
        concepts.append(Concept(m.cid, tuple(names), " ".join(m.context[:2]), m.semantic_type))
        concepts.append(Concept(m.cui, tuple(names), "", m.semantic_type, (m.cid,)))
    return KnowledgeBase.from_concepts(concepts)


@dataclass
class _Draft:
    tokens: list[str]
    mentions: list[tuple[int, int, _ConceptModel, bool]]  # start, end, concept, canonical


def _compose(b: _Builder, concepts: list[_ConceptModel], background: list[str],
             canonical_first: bool = False) -> _Draft:
    rng, spec = b.rng, b.spec
    phrases: list[tuple[list[str], _ConceptModel | None, bool]] = []
    for ci, m in enumerate(concepts):
        for mi in range(int(rng.integers(1, 3))):
            canonical = (canonical_first and ci == 0 and mi == 0) or rng.random() < spec.canonical_rate
            if canonical:
                words = list(m.canonical)
            else:
                words = list(m.synonyms[int(rng.integers(len(m.synonyms)))])
            phrases.append((words, m, canonical))
        for w in rng.choice(m.context, size=3, replace=False):
            phrases.append(([str(w)], None, False))
    for w in rng.choice(background, size=spec.background_per_doc):
        phrases.append(([str(w)], None, False))
    order = rng.permutation(len(phrases))
    tokens: list[str] = []
    mentions = []
    for i in order:
        words, m, canonical = phrases[i]
        if m is not None:
            mentions.append((len(tokens), len(tokens) + len(words), m, canonical))
        tokens.extend(words)
    return _Draft(tokens, mentions)


def _to_document(doc_id: str, draft: _Draft, title_len: int = 6) -> tuple[Document, list[Annotation]]:
    title = " ".join(draft.tokens[:title_len])
    body = " ".join(draft.tokens[title_len:])
    doc = Document(doc_id, title, body)
    spans = tokenize_with_offsets(doc.text)
    anns = []
    for start, end, m, _ in draft.mentions:
        mention = " ".join(doc.tokens[start:end])
        anns.append(Annotation(
            doc_id, start, end, mention, m.cid, 1.0, Source.MANUAL,
            char_span=(spans[start][1], spans[end - 1][2]), raw_text=mention,
            entity_type=m.semantic_type, raw_id=str(m.cid),
        ))
    return doc, anns


def _pack(b: _Builder, slots: list[_ConceptModel], per_doc: tuple[int, int]) -> list[list[_ConceptModel]]:
    """Group concept occurrences into documents without repeating a concept."""
    order = [slots[i] for i in b.rng.permutation(len(slots))]
    docs: list[list[_ConceptModel]] = []
    while order:
        size = int(b.rng.integers(per_doc[0], per_doc[1] + 1))
        doc: list[_ConceptModel] = []
        rest = []
        for m in order:
            if len(doc) < size and all(m.cid != o.cid for o in doc):
                doc.append(m)
            else:
                rest.append(m)
        docs.append(doc)
        order = rest
    return docs


def _annotate(b: _Builder, doc: Document, draft: _Draft, models: list[_ConceptModel],
              abbreviations: dict[str, _ConceptModel]) -> list[RawCandidateSet]:
    """Rule-annotator stand-in: matches canonical names only, with noise."""
    rng, spec = b.rng, b.spec
    out = []
    for start, end, m, canonical in draft.mentions:
        if not canonical:
            continue
        top = m
        if rng.random() < spec.noise:
            top = models[int(rng.integers(len(models)))]
            while top.cid == m.cid:
                top = models[int(rng.integers(len(models)))]
        cands = [(top.cui, 1.0)]
        if top is not m:
            cands.append((m.cui, 0.9))
        out.append(RawCandidateSet(doc.doc_id, (start, end), "", tuple(cands)))
        if end - start > 1 and rng.random() < 0.5:
            broad = models[int(rng.integers(spec.n_broad))]
            out.append(RawCandidateSet(doc.doc_id, (end - 1, end), "", ((broad.cui, 0.8),)))
    for i, tok in enumerate(doc.tokens):
        m = abbreviations.get(tok)
        if m is not None:
            out.append(RawCandidateSet(doc.doc_id, (i, i + 1), "", ((m.cui, 0.7),)))
    return out


def make_benchmark(spec: WorldSpec | None = None, **overrides) -> Benchmark:
    spec = spec or WorldSpec()
    if overrides:
        spec = WorldSpec(**{**spec.__dict__, **overrides})
    rng = stream(spec.seed, "synthetic")
    b = _Builder(spec, rng)
    background = [b.word(2) for _ in range(spec.background_words)]
    models = _make_concepts(b, background)
    kb = _knowledge_base(models)

    specific = models[spec.n_broad:]
    rare_idx = rng.choice(len(specific), size=spec.n_rare, replace=False)
    rare = [specific[i] for i in sorted(rare_idx)]
    rare_ids = {m.cid for m in rare}
    frequent = [m for m in models if m.cid not in rare_ids]

    slots = [m for m in frequent for _ in range(spec.frequent_docs)]
    slots += [m for m in rare for _ in range(int(rng.integers(0, spec.max_rare_manual + 1)))]
    train_docs, train_anns = [], []
    for i, group in enumerate(_pack(b, slots, (2, 4))):
        doc, anns = _to_document(f"T{i:05d}", _compose(b, group, background))
        train_docs.append(doc)
        train_anns.extend(anns)

    def eval_split(prefix: str, n: int):
        docs, anns = [], []
        for i in range(n):
            size = int(rng.integers(1, 4))
            group = [rare[int(rng.integers(len(rare)))]]
            while len(group) < size:
                m = models[int(rng.integers(len(models)))]
                if all(m.cid != g.cid for g in group):
                    group.append(m)
            doc, a = _to_document(f"{prefix}{i:05d}", _compose(b, group, background))
            docs.append(doc)
            anns.extend(a)
        return docs, anns

    dev_docs, dev_anns = eval_split("V", spec.n_dev_docs)
    test_docs, test_anns = eval_split("E", spec.n_test_docs)

    abbreviations = {m.abbreviation.lower(): m for m in models if m.abbreviation}
    library, candidates = [], []
    n = 0
    for m in models:
        for _ in range(spec.library_per_concept):
            group = [m]
            if rng.random() < 0.5:
                other = models[int(rng.integers(len(models)))]
                if other.cid != m.cid:
                    group.append(other)
            draft = _compose(b, group, background, canonical_first=True)
            doc, _ = _to_document(f"L{n:06d}", draft)
            n += 1
            library.append(doc)
            candidates.extend(_annotate(b, doc, draft, models, abbreviations))
    # literature search also returns some target documents; they must be excluded
    for doc in test_docs[: spec.leaked_test_docs]:
        library.append(Document(doc.doc_id, doc.title, doc.body))

    return Benchmark(kb, train_docs, train_anns, dev_docs, dev_anns, test_docs, test_anns,
                     library, candidates)
