import json

import pytest
from hypothesis import given
from hypothesis import strategies as st

from concept_forge.exceptions import ParseError, UnknownConcept, UnmappedConcept
from concept_forge.kb import (
    Concept,
    ConceptId,
    KnowledgeBase,
    build_concept_text,
    dedup_names,
    load_kb,
    map_umls_to_target,
    normalize_name,
    read_kb,
    save_kb,
)

from conftest import cid

names = st.text(alphabet=st.sampled_from("abAB -,\t\r\n.xyZ"), max_size=20)


@pytest.mark.parametrize("raw, expected", [
    ("T-Cell", "t cell"),
    ("Chromosomal Disorder", "chromosomal disorder"),
    ("chromosomal   disorder", "chromosomal disorder"),
    ("", ""),
    ("  Coli,\tPolyposis\r\n", "coli polyposis"),
])
def test_normalize_name(raw, expected):
    assert normalize_name(raw) == expected


@given(names)
def test_normalize_idempotent(raw):
    once = normalize_name(raw)
    assert normalize_name(once) == once


def test_dedup_examples():
    assert dedup_names(["T-Cell", "T Cell"]) == ["T-Cell"]
    # inverted word order is not a normalization-level duplicate
    assert dedup_names(["Polyposis Coli", "Coli, Polyposis"]) == ["Polyposis Coli", "Coli, Polyposis"]
    assert dedup_names([]) == []


@given(st.lists(names, max_size=8))
def test_dedup_properties(raw):
    out = dedup_names(raw)
    forms = [normalize_name(n) for n in out]
    assert len(forms) == len(set(forms))
    assert set(forms) == {normalize_name(n) for n in raw}
    assert all(n in raw for n in out)


@pytest.mark.parametrize("names_, description, expected", [
    (("Kidney Disease",), "renal disorder", "kidney disease | renal disorder"),
    (("T-Cell", "T Cell"), "", "t cell"),
    (("A", "B"), "d", "a; b | d"),
])
def test_build_concept_text(names_, description, expected):
    concept = Concept(cid("MESH:D1"), names_, description, "Disease")
    text = build_concept_text(concept)
    assert text.text == expected
    assert text.concept_id == cid("MESH:D1")


@given(st.permutations(["T-Cell", "t cell", "T  CELL"]))
def test_concept_text_ignores_variant_order(variants):
    a = Concept(cid("MESH:D1"), ("Lymphocyte", *variants), "x", "")
    assert build_concept_text(a).text == "lymphocyte; t cell | x"


def test_concept_requires_names():
    with pytest.raises(ValueError):
        Concept(cid("MESH:D1"), (), "", "")


def test_concept_id_parse_and_order():
    assert str(ConceptId.parse("MESH:D007674")) == "MESH:D007674"
    assert ConceptId.parse("D007674", default_vocabulary="MESH") == ConceptId("MESH", "D007674")
    assert ConceptId("MESH", "D2") < ConceptId("MESH", "D3")
    with pytest.raises(ValueError):
        ConceptId.parse("BOGUS:1")
    with pytest.raises(ValueError):
        ConceptId("MESH", "")


def _mapping_kb(refs, names_by_ref):
    concepts = [Concept(cid("UMLS:C9"), ("Umbrella",), "", "", tuple(refs))]
    concepts += [Concept(r, (names_by_ref[r],), "", "") for r in refs]
    return KnowledgeBase.from_concepts(concepts)


def test_map_single_ref():
    kb = _mapping_kb([cid("MESH:M1")], {cid("MESH:M1"): "anything"})
    assert map_umls_to_target(cid("UMLS:C9"), "", kb) == cid("MESH:M1")


def test_map_by_name_in_document():
    kb = _mapping_kb([cid("MESH:M2"), cid("MESH:M3")],
                     {cid("MESH:M2"): "foo", cid("MESH:M3"): "bar"})
    assert map_umls_to_target(cid("UMLS:C9"), "we saw Bar here", kb) == cid("MESH:M3")


def test_map_fallback_smallest():
    kb = _mapping_kb([cid("MESH:M9"), cid("MESH:M4")],
                     {cid("MESH:M9"): "nine", cid("MESH:M4"): "four"})
    assert map_umls_to_target(cid("UMLS:C9"), "neither name", kb) == cid("MESH:M4")


def test_map_first_matching_ref_wins():
    kb = _mapping_kb([cid("MESH:M9"), cid("MESH:M4")],
                     {cid("MESH:M9"): "nine", cid("MESH:M4"): "four"})
    assert map_umls_to_target(cid("UMLS:C9"), "four and nine", kb) == cid("MESH:M9")


def test_map_unmapped():
    kb = KnowledgeBase.from_concepts([Concept(cid("UMLS:C1"), ("x",), "", "")])
    with pytest.raises(UnmappedConcept):
        map_umls_to_target(cid("UMLS:C1"), "", kb)


@given(st.text(alphabet="abfoor ", max_size=30))
def test_map_never_fabricates(doc):
    refs = [cid("MESH:M2"), cid("MESH:M3"), cid("MESH:M1")]
    kb = _mapping_kb(refs, {refs[0]: "foo", refs[1]: "bar", refs[2]: "ab"})
    assert map_umls_to_target(cid("UMLS:C9"), doc, kb) in refs


def test_kb_lookup(clinical_kb):
    assert cid("MESH:D008012") in clinical_kb
    with pytest.raises(UnknownConcept):
        clinical_kb[cid("MESH:D000001")]
    assert all(c.vocabulary != "UMLS" for c in clinical_kb.target_ids())
    assert clinical_kb.target_ids() == sorted(clinical_kb.target_ids())


def test_kb_rejects_duplicate_ids():
    c = Concept(cid("MESH:D1"), ("a",), "", "")
    with pytest.raises(ValueError):
        KnowledgeBase.from_concepts([c, c])


def test_kb_file_round_trip(clinical_kb, tmp_path):
    path = tmp_path / "kb.jsonl"
    save_kb(clinical_kb, path)
    again = load_kb(path)
    assert list(again) == list(clinical_kb)
    first = json.loads(path.read_text().splitlines()[0])
    assert set(first) == {"id", "names", "description", "semantic_type", "cross_refs"}
    assert path.read_bytes().count(b"\r") == 0


def test_read_kb_reports_line():
    good = json.dumps({"id": "MESH:D1", "names": ["a"]})
    with pytest.raises(ParseError, match="line 2"):
        read_kb([good, '{"names": ["b"]}'])
