from collections import OrderedDict

import numpy as np
import pytest

from concept_forge.kb import Concept, ConceptId, KnowledgeBase
from concept_forge.synthetic import WorldSpec, make_benchmark

SMALL_WORLD = WorldSpec(n_concepts=40, n_rare=8, n_broad=3, n_abbrev=3, n_dev_docs=15,
                        n_test_docs=20, library_per_concept=4, leaked_test_docs=3,
                        background_words=120, frequent_docs=10)


def cid(text: str) -> ConceptId:
    return ConceptId.parse(text)


@pytest.fixture(scope="session")
def clinical_kb() -> KnowledgeBase:
    """Handful of real-looking concepts used by the filter fixtures."""
    return KnowledgeBase.from_concepts([
        Concept(cid("UMLS:C0043194"), ("Wiskott-Aldrich Syndrome", "WAS"), "", "Disease",
                (cid("MESH:D014923"),)),
        Concept(cid("MESH:D014923"), ("Wiskott-Aldrich Syndrome", "WAS"),
                "X-linked immunodeficiency", "Disease"),
        Concept(cid("UMLS:C1561643"), ("Chronic Kidney Disease",), "", "Disease",
                (cid("MESH:D051436"),)),
        Concept(cid("MESH:D051436"), ("Chronic Kidney Disease", "Renal Insufficiency, Chronic"),
                "slow loss of kidney function", "Disease"),
        Concept(cid("UMLS:C0012634"), ("Disease",), "", "Disease", (cid("MESH:D004194"),)),
        Concept(cid("MESH:D004194"), ("Disease", "Diseases"), "", "Disease"),
        Concept(cid("UMLS:C0002703"), ("APRT deficiency",), "", "Disease",
                (cid("MESH:C537357"), cid("OMIM:614723"))),
        Concept(cid("MESH:C537357"), ("Adenine phosphoribosyltransferase deficiency",),
                "", "Disease"),
        Concept(cid("OMIM:614723"), ("APRT deficiency",), "", "Disease"),
        Concept(cid("MESH:D008012"), ("Lidocaine", "Xylocaine"), "local anesthetic", "Chemical"),
    ])


@pytest.fixture(scope="session")
def small_bench():
    return make_benchmark(SMALL_WORLD)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def export_world(bench, root, **flags):
    """Write ``bench`` as CLI inputs under ``root``; returns the pipeline.ini path."""
    from pathlib import Path

    from concept_forge.cli import export_benchmark
    from concept_forge.config import PipelineConfig

    root = Path(root)

    def write(name, writer):
        path = root / name
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8", newline="") as fh:
            writer(fh)
        return path

    export_benchmark(bench, root, PipelineConfig().override(**flags), write)
    return root / "pipeline.ini"


# -- acceptance reporting ------------------------------------------------------

_CRITERIA: "OrderedDict[str, list]" = OrderedDict()


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(name): acceptance criterion a test belongs to")


def pytest_collection_finish(session):
    for item in session.items:
        mark = item.get_closest_marker("criterion")
        if mark:
            _CRITERIA.setdefault(mark.args[0], [])


def pytest_runtest_makereport(item, call):
    mark = item.get_closest_marker("criterion")
    if not mark:
        return
    # a broken fixture fails the criterion too
    if call.when == "call" or (call.when == "setup" and call.excinfo is not None):
        _CRITERIA[mark.args[0]].append((call.excinfo is None, call.duration))


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for name, results in _CRITERIA.items():
        if not results:
            verdict = "NOT RUN"
        else:
            verdict = "PASS" if all(ok for ok, _ in results) else "FAIL"
        seconds = sum(d for _, d in results)
        terminalreporter.write_line(f"{verdict:<7} {name} ({seconds:.1f}s)")
