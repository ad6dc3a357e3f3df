"""End-to-end runs: pseudo-annotate, augment, train, extract, score, sweep."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Any, Iterable, Sequence, TextIO

from .augmentation import (
    AugmentationConfig,
    CandidatePool,
    Library,
    augment_to_threshold,
    build_pool,
    exclude_leakage,
    manual_examples,
    retrieve_candidates,
)
from .corpus import (
    Annotation,
    CorpusStats,
    Document,
    concept_occurrence_counts,
    corpus_stats,
    group_by_doc,
)
from .evaluation import MetricsReport, format_value, split_report
from .extractor import ConceptExtractor, vocabulary_for
from .kb import ConceptId, KnowledgeBase
from .pseudo import (
    RawCandidateSet,
    filter_false_abbreviations,
    filter_overlaps,
    map_annotations_to_target,
    select_top_candidate,
)
from .training import TrainingExample

logger = logging.getLogger(__name__)

FILTERS = ("abbrev", "overlap", "diversity")
FILTER_ABLATION_GRID = ((), ("abbrev",), ("abbrev", "overlap"), ("abbrev", "overlap", "diversity"))


class Harness(str, Enum):
    K_SWEEP = "k"
    WA_SWEEP = "wa"
    FILTER_ABLATION = "filters"


@dataclass
class Benchmark:
    """Everything one run reads: KB, target splits, search library, annotator output."""

    kb: KnowledgeBase
    train_docs: list[Document]
    train_anns: list[Annotation]
    dev_docs: list[Document]
    dev_anns: list[Annotation]
    test_docs: list[Document]
    test_anns: list[Annotation]
    library: list[Document] = field(default_factory=list)
    library_candidates: list[RawCandidateSet] = field(default_factory=list)
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def target_doc_ids(self) -> set[str]:
        return {d.doc_id for d in (*self.train_docs, *self.dev_docs, *self.test_docs)}

    def split(self, name: str) -> tuple[list[Document], list[Annotation]]:
        return {"train": (self.train_docs, self.train_anns),
                "dev": (self.dev_docs, self.dev_anns),
                "test": (self.test_docs, self.test_anns)}[name]

    def manual_counts(self):
        return concept_occurrence_counts(self.train_anns)

    def stats(self, split: str = "test") -> CorpusStats:
        return corpus_stats(self.train_anns, self.split(split)[1], self.kb)

    def vocabulary(self) -> dict[str, int]:
        if "vocab" not in self._cache:
            texts = [d.tokens for d in (*self.train_docs, *self.library)]
            self._cache["vocab"] = vocabulary_for(self.kb, texts)
        return self._cache["vocab"]

    def searchable_library(self) -> Library:
        if "library" not in self._cache:
            self._cache["library"] = Library(self.library)
        return self._cache["library"]


@dataclass
class ExperimentConfig:
    k: int = 10
    top_n_candidates: int = 50
    w_a: float = 0.4
    seed: int = 0
    dim: int = 64
    epochs: int = 10
    learning_rate: float = 1e-4
    batch_size: int = 16
    temperature: float = 1.0
    filters: tuple[str, ...] = FILTERS
    fine: str = "identity"
    nprobe: int | None = None
    topk: int = 10

    def __post_init__(self):
        unknown = set(self.filters) - set(FILTERS)
        if unknown:
            raise ValueError(f"unknown filters: {sorted(unknown)}")
        self.filters = tuple(f for f in FILTERS if f in self.filters)

    def augmentation(self) -> AugmentationConfig:
        return AugmentationConfig(self.k, self.top_n_candidates, self.w_a, self.seed)

    def extractor(self, kb: KnowledgeBase, vocabulary=None) -> ConceptExtractor:
        return ConceptExtractor(
            kb=kb, dim=self.dim, epochs=self.epochs, learning_rate=self.learning_rate,
            batch_size=self.batch_size, temperature=self.temperature, w_a=self.w_a,
            seed=self.seed, fine=self.fine, nprobe=self.nprobe, top_k=self.topk,
            vocabulary=vocabulary,
        )


def pseudo_annotations(bench: Benchmark, abbrev: bool = True,
                       overlap: bool = True) -> dict[str, list[Annotation]]:
    """Top-1 annotator labels on the library, filtered, mapped to target ids."""
    key = ("pseudo", abbrev, overlap)
    if key in bench._cache:
        return bench._cache[key]
    docs = {d.doc_id: d for d in bench.library}
    raw = group_by_doc(select_top_candidate(c) for c in bench.library_candidates
                       if c.doc_id in docs)
    out: dict[str, list[Annotation]] = {}
    for doc_id in sorted(raw):
        anns = raw[doc_id]
        if abbrev:
            anns = filter_false_abbreviations(docs[doc_id], anns, bench.kb)
        if overlap:
            anns = filter_overlaps(anns)
        mapped = map_annotations_to_target(anns, docs, bench.kb)
        out[doc_id] = [a for a in mapped if a.concept in bench.kb]
    bench._cache[key] = out
    return out


def build_pools(bench: Benchmark, cfg: ExperimentConfig) -> dict[ConceptId, CandidatePool]:
    counts = bench.manual_counts()
    pseudo = pseudo_annotations(bench, "abbrev" in cfg.filters, "overlap" in cfg.filters)
    library = bench.searchable_library()
    blocked = bench.target_doc_ids()
    pools = {}
    for cid in bench.kb.target_ids():
        if counts.get(cid, 0) >= cfg.k:
            continue
        found = retrieve_candidates(bench.kb[cid], library, cfg.top_n_candidates)
        pools[cid] = build_pool(cid, exclude_leakage(found, blocked), pseudo)
    return pools


def training_corpus(bench: Benchmark, cfg: ExperimentConfig) -> list[TrainingExample]:
    manual = manual_examples(bench.train_docs, bench.train_anns)
    if cfg.k == 0:
        return augment_to_threshold({}, {}, cfg.augmentation(), manual)
    return augment_to_threshold(bench.manual_counts(), build_pools(bench, cfg),
                                cfg.augmentation(), manual,
                                diversity="diversity" in cfg.filters)


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    reports: dict[str, MetricsReport]
    model: ConceptExtractor
    corpus: list[TrainingExample]


def evaluate(bench: Benchmark, model: ConceptExtractor, split: str = "test") -> MetricsReport:
    docs, anns = bench.split(split)
    preds = {p.doc_id: p for p in model.predict(docs)}
    return split_report(docs, anns, preds, bench.kb, bench.stats(split), k=model.top_k)


def run_experiment(bench: Benchmark, cfg: ExperimentConfig,
                   splits: Sequence[str] = ("dev", "test")) -> ExperimentResult:
    corpus = training_corpus(bench, cfg)
    model = cfg.extractor(bench.kb, bench.vocabulary()).fit(corpus)
    reports = {s: evaluate(bench, model, s) for s in splits}
    return ExperimentResult(cfg, reports, model, corpus)


def _grid_config(harness: Harness, value: Any, base: ExperimentConfig) -> ExperimentConfig:
    if harness is Harness.K_SWEEP:
        return replace(base, k=int(value))
    if harness is Harness.WA_SWEEP:
        return replace(base, w_a=float(value))
    return replace(base, filters=tuple(value))


def grid_label(harness: Harness, value: Any) -> str:
    if harness is Harness.FILTER_ABLATION:
        return "+".join(value) if value else "none"
    return str(value)


class SweepError(RuntimeError):
    def __init__(self, grid_value, cause):
        self.grid_value = grid_value
        super().__init__(f"sweep failed at grid point {grid_value!r}: {cause}")


def sweep(harness: Harness | str, grid: Iterable[Any], bench: Benchmark,
          base: ExperimentConfig, split: str = "test") -> list[tuple[str, MetricsReport]]:
    """One full train + evaluate run per grid point."""
    harness = Harness(harness)
    grid = list(FILTER_ABLATION_GRID if harness is Harness.FILTER_ABLATION and not grid
                else grid)
    if not grid:
        raise ValueError("sweep grid is empty")
    rows = []
    for value in grid:
        cfg = _grid_config(harness, value, base)
        try:
            result = run_experiment(bench, cfg, splits=(split,))
        except Exception as exc:
            raise SweepError(value, exc) from exc
        rows.append((grid_label(harness, value), result.reports[split]))
        logger.info("sweep %s=%s f1=%.4f", harness.value, rows[-1][0], rows[-1][1].f1)
    return rows


def write_sweep_csv(rows: Sequence[tuple[str, MetricsReport]], fh: TextIO) -> None:
    writer = csv.writer(fh, lineterminator="\n")
    writer.writerow(("grid_value", "split", "metric", "value"))
    for label, report in rows:
        for split, metric, value in report.rows():
            writer.writerow((label, split, metric, format_value(value)))
