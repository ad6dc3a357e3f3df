"""Document-level top-k concept extraction metrics."""

from __future__ import annotations

import csv
import json
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence, TextIO

import numpy as np

from .ann_index import IvfIndex
from .corpus import (
    Annotation,
    CorpusStats,
    Document,
    MentionClass,
    classify_mention,
    segment_document,
)
from .encoder import EncoderParams, embed_text
from .exceptions import MissingPredictions
from .kb import ConceptId, KnowledgeBase

TOP_K = 10
NA = "N/A"


@dataclass(frozen=True)
class PredictionSet:
    doc_id: str
    concepts: tuple[ConceptId, ...]
    scores: tuple[float, ...] = ()

    def __post_init__(self):
        if len(set(self.concepts)) != len(self.concepts):
            raise ValueError(f"duplicate predictions for {self.doc_id}")

    def top(self, k: int) -> tuple[ConceptId, ...]:
        return self.concepts[:k]


def embed_document(params: EncoderParams, doc: Document) -> np.ndarray:
    """Mean of the unit segment embeddings, renormalized."""
    segments = segment_document(doc)
    if not segments:
        return embed_text(params, [])
    vec = np.mean([embed_text(params, s.tokens) for s in segments], axis=0)
    norm = np.linalg.norm(vec)
    return vec / norm if norm > 0 else embed_text(params, [])


def predict_top10(params: EncoderParams, index: IvfIndex, doc: Document,
                  k: int = TOP_K, nprobe: int | None = None) -> PredictionSet:
    hits = index.search(embed_document(params, doc), k, nprobe)
    return PredictionSet(doc.doc_id, tuple(c for c, _ in hits), tuple(d for _, d in hits))


def _f1(p: float, r: float) -> float:
    return 2 * p * r / (p + r) if p + r > 0 else 0.0


def prf_at_k(preds: PredictionSet | Sequence[ConceptId], gold: Iterable[ConceptId],
             k: int = TOP_K) -> tuple[float, float, float]:
    gold = set(gold)
    if not gold:
        raise ValueError("gold set is empty")
    ranked = preds.concepts if isinstance(preds, PredictionSet) else tuple(preds)
    hits = len(set(ranked[:k]) & gold)
    p, r = hits / k, hits / len(gold)
    return p, r, _f1(p, r)


@dataclass
class MetricsReport:
    precision: float
    recall: float
    f1: float
    nc_recall_at_5: float | None = None
    nc_recall_at_10: float | None = None
    rare_precision: float | None = None
    rare_recall: float | None = None
    rare_f1: float | None = None
    per_type: dict[str, tuple[float, float, float]] = field(default_factory=dict)
    n_docs: int = 0

    def rows(self) -> list[tuple[str, str, float | None]]:
        out = [
            ("all", "precision", self.precision),
            ("all", "recall", self.recall),
            ("all", "f1", self.f1),
            ("non_canonical", "recall@5", self.nc_recall_at_5),
            ("non_canonical", "recall@10", self.nc_recall_at_10),
            ("rare", "precision", self.rare_precision),
            ("rare", "recall", self.rare_recall),
            ("rare", "f1@10", self.rare_f1),
        ]
        for stype in sorted(self.per_type):
            p, r, f = self.per_type[stype]
            out += [(f"type:{stype}", "precision", p), (f"type:{stype}", "recall", r),
                    (f"type:{stype}", "f1", f)]
        return out

    def to_dict(self) -> dict:
        return {
            "n_docs": self.n_docs,
            "all": {"precision": self.precision, "recall": self.recall, "f1": self.f1},
            "non_canonical": {"recall@5": self.nc_recall_at_5,
                              "recall@10": self.nc_recall_at_10},
            "rare": {"precision": self.rare_precision, "recall": self.rare_recall,
                     "f1@10": self.rare_f1},
            "per_type": {t: {"precision": p, "recall": r, "f1": f}
                         for t, (p, r, f) in sorted(self.per_type.items())},
        }


def format_value(value: float | None) -> str:
    return NA if value is None else repr(float(value))


def write_report_csv(report: MetricsReport, fh: TextIO) -> None:
    writer = csv.writer(fh, lineterminator="\n")
    writer.writerow(("split", "metric", "value"))
    for split, metric, value in report.rows():
        writer.writerow((split, metric, format_value(value)))


def write_report_json(report: MetricsReport, fh: TextIO) -> None:
    json.dump(report.to_dict(), fh, indent=2, sort_keys=True)
    fh.write("\n")


class _Tally:
    """Micro or macro accumulation of (hits, predicted, gold) counts."""

    def __init__(self, macro: bool = False):
        self.macro = macro
        self.hits = self.pred = self.gold = 0
        self.p_list: list[float] = []
        self.r_list: list[float] = []

    def add(self, hits: int, pred: int, gold: int) -> None:
        if gold == 0:
            # subset absent from the doc: micro precision still pays for its predictions
            self.pred += pred
            return
        self.hits += hits
        self.pred += pred
        self.gold += gold
        if self.macro:
            self.p_list.append(hits / pred if pred else 0.0)
            self.r_list.append(hits / gold)

    def prf(self) -> tuple[float, float, float] | None:
        if self.gold == 0:
            return None
        if self.macro:
            p, r = float(np.mean(self.p_list)), float(np.mean(self.r_list))
        else:
            p = self.hits / self.pred if self.pred else 0.0
            r = self.hits / self.gold
        return p, r, _f1(p, r)


def gold_sets(documents: Sequence[Document], annotations: Iterable[Annotation],
              concepts: set[ConceptId] | None = None) -> dict[str, set[ConceptId]]:
    gold: dict[str, set[ConceptId]] = {d.doc_id: set() for d in documents}
    for ann in annotations:
        if ann.doc_id in gold and (concepts is None or ann.concept in concepts):
            gold[ann.doc_id].add(ann.concept)
    return gold


def non_canonical_gold(documents: Sequence[Document], annotations: Iterable[Annotation],
                       kb: KnowledgeBase) -> dict[str, set[ConceptId]]:
    """Gold concepts whose every mention in the document is non-canonical."""
    classes: dict[tuple[str, ConceptId], set[MentionClass]] = defaultdict(set)
    for ann in annotations:
        if ann.concept in kb:
            classes[(ann.doc_id, ann.concept)].add(classify_mention(ann, kb))
    out: dict[str, set[ConceptId]] = {d.doc_id: set() for d in documents}
    for (doc_id, cid), seen in classes.items():
        if doc_id in out and seen == {MentionClass.NON_CANONICAL}:
            out[doc_id].add(cid)
    return out


def split_report(
    documents: Sequence[Document],
    annotations: Sequence[Annotation],
    predictions: Mapping[str, PredictionSet],
    kb: KnowledgeBase,
    stats: CorpusStats,
    k: int = TOP_K,
    macro: bool = False,
) -> MetricsReport:
    """All / non-canonical / rare / per-type metrics at ``k``.

    The rare and per-type splits restrict both gold and predictions to the
    subset's concepts. Documents without gold concepts are skipped.
    """
    targets = set(kb.target_ids())
    gold = gold_sets(documents, annotations, targets)
    docs = [d for d in documents if gold[d.doc_id]]
    missing = [d.doc_id for d in docs if d.doc_id not in predictions]
    if missing:
        raise MissingPredictions(missing)
    non_canonical = non_canonical_gold(docs, annotations, kb)
    rare = {c for c in targets if stats.is_rare(c)}
    types = {c: kb[c].semantic_type for c in targets}
    all_types = sorted(set(types.values()))

    all_t, rare_t = _Tally(macro), _Tally(macro)
    nc_hits5 = nc_hits10 = nc_total = 0
    type_t: dict[str, _Tally] = defaultdict(lambda: _Tally(macro))
    for doc in docs:
        g = gold[doc.doc_id]
        top = predictions[doc.doc_id].top(k)
        top_set = set(top)
        all_t.add(len(top_set & g), k, len(g))

        rg, rp = g & rare, top_set & rare
        rare_t.add(len(rg & rp), len(rp), len(rg))

        nc = non_canonical[doc.doc_id] & g
        nc_total += len(nc)
        nc_hits5 += len(nc & set(top[:5]))
        nc_hits10 += len(nc & set(top[:10]))

        for stype in all_types:
            tg = {c for c in g if types[c] == stype}
            tp = {c for c in top_set if types.get(c) == stype}
            type_t[stype].add(len(tg & tp), len(tp), len(tg))

    p, r, f = all_t.prf() or (0.0, 0.0, 0.0)
    rare_prf = rare_t.prf()
    return MetricsReport(
        precision=p, recall=r, f1=f,
        nc_recall_at_5=nc_hits5 / nc_total if nc_total else None,
        nc_recall_at_10=nc_hits10 / nc_total if nc_total else None,
        rare_precision=rare_prf[0] if rare_prf else None,
        rare_recall=rare_prf[1] if rare_prf else None,
        rare_f1=rare_prf[2] if rare_prf else None,
        per_type={t: tally.prf() for t, tally in type_t.items() if tally.prf() is not None},
        n_docs=len(docs),
    )
