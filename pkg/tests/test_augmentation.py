import io
import logging
from collections import Counter

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from concept_forge.augmentation import (
    AugmentationConfig,
    CandidatePool,
    Library,
    PoolEntry,
    augment_to_threshold,
    build_pool,
    example_from_json,
    example_to_json,
    exclude_leakage,
    manual_examples,
    read_examples,
    retrieve_candidates,
    select_diverse_segment,
    shuffle_examples,
    write_examples,
)
from concept_forge.corpus import Annotation, Document, Segment, Source
from concept_forge.exceptions import PoolExhausted
from concept_forge.experiment import ExperimentConfig, build_pools, training_corpus
from concept_forge.kb import Concept
from concept_forge.training import TrainingExample

from conftest import cid

C1 = cid("MESH:D1")


def _docs(texts):
    return [Document(f"p{i:02d}", t) for i, t in enumerate(texts)]


def test_retrieval_prefers_matching_docs():
    docs = _docs(["kidney stone"] * 3 + ["unrelated text"] * 7)
    concept = Concept(C1, ("Kidney Stone",), "", "")
    found = retrieve_candidates(concept, docs, 50)
    assert [d.doc_id for d in found] == ["p00", "p01", "p02"]


def test_retrieval_ranks_by_term_frequency_then_id():
    docs = _docs(["stone kidney", "kidney kidney stone stone", "kidney stone", "stone only"])
    found = Library(docs).search("Kidney-Stone", 10)
    assert [d.doc_id for d in found] == ["p01", "p00", "p02"]


def test_retrieval_cap():
    docs = _docs([f"kidney stone case {i}" for i in range(80)])
    assert len(retrieve_candidates(Concept(C1, ("kidney stone",), "", ""), docs, 50)) == 50


def test_retrieval_empty_library():
    assert retrieve_candidates(Concept(C1, ("x",), "", ""), [], 50) == []


@pytest.mark.parametrize("target, expected", [
    ({"b"}, ["a", "c"]), (set(), ["a", "b", "c"]), ({"a", "b", "c", "z"}, []),
])
def test_exclude_leakage(target, expected):
    cands = [Document(i, "t") for i in "abc"]
    assert [d.doc_id for d in exclude_leakage(cands, target)] == expected


def _pool(concept, papers):
    """papers: {paper_id: n_segments}"""
    entries = [PoolEntry(Segment(p, i, ("tok",)), p, (concept,))
               for p in sorted(papers) for i in range(papers[p])]
    return CandidatePool(concept, entries)


def test_diverse_picks_least_used():
    pool = _pool(C1, {"A": 2, "B": 2})
    assert select_diverse_segment(C1, pool, {"A": 2, "B": 0}).paper_id == "B"


def test_diverse_tie_breaks_on_paper_id():
    usage = {"A": 1, "B": 1}
    assert select_diverse_segment(C1, _pool(C1, {"B": 1, "A": 1}), usage).paper_id == "A"
    assert usage == {"A": 2, "B": 1}


def test_diverse_single_paper_and_exhaustion():
    pool = _pool(C1, {"Z": 1})
    assert select_diverse_segment(C1, pool, {}).paper_id == "Z"
    with pytest.raises(PoolExhausted):
        select_diverse_segment(C1, pool, {})


def _manual(concept, n):
    return [TrainingExample(Segment(f"m{concept.code}{i}", 0, ("x",)), (concept,)) for i in range(n)]


def _count(examples, concept):
    return sum(concept in ex.positives for ex in examples)


@pytest.mark.parametrize("manual, pool_size, added", [(3, 20, 7), (12, 20, 0), (3, 4, 4)])
def test_fill_to_threshold(manual, pool_size, added, caplog):
    pools = {C1: _pool(C1, {f"p{i:02d}": 1 for i in range(pool_size)})}
    with caplog.at_level(logging.INFO):
        out = augment_to_threshold({C1: manual}, pools, AugmentationConfig(k=10), _manual(C1, manual))
    assert sum(ex.is_pseudo for ex in out) == added
    assert len(out) == manual + added
    if pool_size < 10 - manual:
        assert "exhausted" in caplog.text


def test_shuffle_keeps_manual_relative_order():
    manual = _manual(C1, 30)
    extra = [TrainingExample(Segment(f"x{i}", 0, ("y",)), (C1,), Source.PSEUDO) for i in range(15)]
    base = shuffle_examples(manual, 5)
    mixed = [ex for ex in shuffle_examples(manual + extra, 5) if not ex.is_pseudo]
    assert mixed == base
    assert base != manual and sorted(base, key=lambda e: e.key) == sorted(manual, key=lambda e: e.key)


pool_specs = st.dictionaries(
    st.sampled_from(["D1", "D2", "D3"]),
    st.tuples(st.integers(0, 12), st.dictionaries(st.sampled_from("ABCDEFG"), st.integers(1, 4),
                                                  max_size=5)),
    min_size=1,
)


@settings(max_examples=60, deadline=None)
@given(pool_specs, st.integers(0, 12))
def test_threshold_count_invariant(spec, k):
    counts, pools, manual = {}, {}, []
    for code, (n_manual, papers) in spec.items():
        concept = cid(f"MESH:{code}")
        counts[concept] = n_manual
        # paper ids are namespaced per concept so pools never share papers
        pools[concept] = _pool(concept, {f"{code}{p}": n for p, n in papers.items()})
        manual += _manual(concept, n_manual)
    out = augment_to_threshold(counts, pools, AugmentationConfig(k=k), manual)
    for concept, n_manual in counts.items():
        total = _count(out, concept)
        if n_manual < k:
            assert total == min(k, n_manual + len(pools[concept]))
        else:
            assert total == n_manual
        # balanced fill: chosen papers differ in use by at most one while each offered enough
        chosen = Counter(ex.segment.doc_id for ex in out if ex.is_pseudo and concept in ex.positives)
        offered = Counter(e.paper_id for e in pools[concept].entries)
        if chosen and all(offered[p] >= max(chosen.values()) for p in offered):
            uses = [chosen.get(p, 0) for p in offered]
            assert max(uses) <= min(uses) + 1


def test_augmentation_is_deterministic(small_bench):
    cfg = ExperimentConfig(k=10, seed=3)
    a, b = io.StringIO(), io.StringIO()
    write_examples(training_corpus(small_bench, cfg), a)
    write_examples(training_corpus(small_bench, cfg), b)
    assert a.getvalue() == b.getvalue()
    assert a.getvalue() != ""


def test_no_leakage(small_bench):
    corpus = training_corpus(small_bench, ExperimentConfig(k=10))
    targets = small_bench.target_doc_ids()
    assert any(d.doc_id in targets for d in small_bench.library)  # the fixture does leak
    assert not {ex.segment.doc_id for ex in corpus if ex.is_pseudo} & targets


def test_pools_cover_only_rare_concepts(small_bench):
    counts = small_bench.manual_counts()
    pools = build_pools(small_bench, ExperimentConfig(k=10))
    assert pools and all(counts.get(c, 0) < 10 for c in pools)
    for concept, pool in pools.items():
        assert all(concept in e.positives for e in pool.entries)
        assert len(pool.papers()) <= 50


def test_build_pool_reads_pseudo_labels():
    doc = Document("lib1", "aa bb cc dd")
    anns = {"lib1": [Annotation("lib1", 1, 2, "bb", C1, 1.0, Source.PSEUDO),
                     Annotation("lib1", 2, 3, "cc", cid("MESH:D2"), 1.0, Source.PSEUDO)]}
    pool = build_pool(C1, [doc], anns)
    assert len(pool) == 1 and pool.entries[0].positives == (C1, cid("MESH:D2"))
    assert len(build_pool(cid("MESH:D9"), [doc], anns)) == 0


def test_manual_examples_group_by_segment():
    doc = Document.from_tokens("d", ["w"] * 600)
    anns = [Annotation("d", 3, 4, "w", C1), Annotation("d", 520, 521, "w", cid("MESH:D2")),
            Annotation("d", 10, 11, "w", C1)]
    out = manual_examples([doc], anns)
    assert [(ex.segment.index, ex.positives) for ex in out] == [(0, (C1,)), (1, (cid("MESH:D2"),))]


def test_examples_jsonl():
    ex = TrainingExample(Segment("d", 2, ("a", "b")), (cid("MESH:D2"), C1), Source.PSEUDO)
    obj = example_to_json(ex)
    assert obj == {"doc_id": "d", "segment_index": 2, "tokens": ["a", "b"],
                   "positives": ["MESH:D1", "MESH:D2"], "source": "pseudo",
                   "weight_class": "augmented"}
    assert example_from_json(obj) == ex
    buf = io.StringIO()
    write_examples([ex, *_manual(C1, 2)], buf)
    assert read_examples(io.StringIO(buf.getvalue())) == [ex, *_manual(C1, 2)]


def test_config_validation():
    with pytest.raises(ValueError):
        AugmentationConfig(k=-1)
    with pytest.raises(ValueError):
        AugmentationConfig(top_n_candidates=0)
