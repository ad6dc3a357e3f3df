"""``concept-forge`` command-line entry point.

Stages communicate through files in the output directory::

    ingest    -> stats.json
    annotate  -> pseudo_raw.jsonl
    filter    -> pseudo_filtered.jsonl
    augment   -> examples.jsonl
    train     -> model.ckpt, train_log.csv
    index     -> index.ivf
    extract   -> predictions.tsv
    evaluate  -> metrics.csv, metrics.json
    sweep     -> sweep.csv
    synth     -> kb.jsonl, corpus/, library/, pipeline.ini

Every stage also writes the resolved ``config.ini``. Exit status is 0 on
success, 1 for usage or validation errors and 2 for runtime failures.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path
from typing import Callable, Sequence

from .ann_index import IvfIndex
from .augmentation import read_examples, write_examples
from .config import ConfigError, PipelineConfig
from .corpus import Annotation, Document, corpus_stats, group_by_doc, parse_pubtator, write_pubtator
from .encoder import load_checkpoint, save_checkpoint
from .evaluation import (
    PredictionSet,
    predict_top10,
    split_report,
    write_report_csv,
    write_report_json,
)
from .exceptions import ConceptForgeError, ParseError
from .experiment import (
    FILTER_ABLATION_GRID,
    FILTERS,
    Benchmark,
    Harness,
    sweep,
    training_corpus,
    write_sweep_csv,
)
from .extractor import ConceptExtractor, vocabulary_for
from .kb import ConceptId, KnowledgeBase, load_kb, write_kb
from .pseudo import (
    AnnotationFilter,
    map_annotations_to_target,
    parse_mmi,
    read_annotations,
    select_top_candidate,
    write_annotations,
    write_mmi,
)

logger = logging.getLogger("concept_forge")

LOG_ENV = "CONCEPT_FORGE_LOG"
LOG_LEVELS = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}
SPLITS = ("train", "dev", "test")
LIBRARY_DOCS = "library.pubtator"
LIBRARY_MMI = "library.mmi"

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    def __init__(self, flag: str, message: str):
        self.flag = flag
        super().__init__(f"{flag}: {message}")


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would exit 2, which is reserved for runtime errors
        self.print_usage(sys.stderr)
        self.exit(EXIT_INVALID, f"{self.prog}: error: {message}\n")


# -- argument parsing --------------------------------------------------------

def _filters(raw: str) -> tuple[str, ...]:
    names = tuple(f for f in raw.split(",") if f and f != "none")
    bad = [f for f in names if f not in FILTERS]
    if bad:
        raise argparse.ArgumentTypeError(f"unknown filter {bad[0]!r} (choose from {','.join(FILTERS)})")
    return names


def _non_negative(kind):
    def parse(raw):
        value = kind(raw)
        if value < 0:
            raise argparse.ArgumentTypeError(f"must be >= 0, got {raw}")
        return value
    return parse


def _positive_int(raw):
    value = int(raw)
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {raw}")
    return value


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="ini file; flags override its values")
    common.add_argument("--kb", help="knowledge base (JSON lines)")
    common.add_argument("--corpus", help="directory with train/dev/test .pubtator files")
    common.add_argument("--library", help=f"directory with {LIBRARY_DOCS} and {LIBRARY_MMI}")
    common.add_argument("--out", help="output directory")
    common.add_argument("--k", type=_non_negative(int), help="augmentation threshold")
    common.add_argument("--wa", type=_non_negative(float), help="weight of augmented examples")
    common.add_argument("--seed", type=_non_negative(int))
    common.add_argument("--filters", type=_filters, help="comma list of abbrev,overlap,diversity")
    common.add_argument("--nprobe", type=_positive_int)
    common.add_argument("--topk", type=_positive_int)
    common.add_argument("--dim", type=_positive_int)
    common.add_argument("--epochs", type=_non_negative(int))
    common.add_argument("--lr", type=_non_negative(float), help="initial learning rate")
    common.add_argument("--dry-run", action="store_true", help="validate inputs, write nothing")

    parser = _Parser(prog="concept-forge", description="Concept extraction pipeline.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name, helptext in (
        ("ingest", "parse the KB and corpus, report statistics"),
        ("annotate", "top-1 pseudo-annotations from annotator output"),
        ("filter", "apply abbreviation and overlap filters"),
        ("augment", "build the augmented training set"),
        ("train", "train the document encoder"),
        ("index", "build the concept index"),
        ("extract", "predict top-k concepts per document"),
        ("evaluate", "score predictions against gold"),
        ("sweep", "run a parameter sweep end to end"),
        ("synth", "write a synthetic benchmark"),
    ):
        p = sub.add_parser(name, parents=[common], help=helptext)
        if name in ("extract", "evaluate"):
            p.add_argument("--split", choices=SPLITS, default="test")
        if name == "sweep":
            p.add_argument("--harness", choices=[h.value for h in Harness], required=True)
            p.add_argument("--grid", default="",
                           help="comma list of values; filter sets as abbrev+overlap;none;...")
            p.add_argument("--split", choices=SPLITS, default="test")
    return parser


# -- helpers -----------------------------------------------------------------

class Context:
    def __init__(self, args: argparse.Namespace, cfg: PipelineConfig):
        self.args = args
        self.cfg = cfg
        self.dry_run = args.dry_run
        self.out = Path(cfg.paths.out)

    def require(self, flag: str) -> Path:
        value = getattr(self.cfg.paths, flag)
        if not value:
            raise UsageError(f"--{flag}", "is required for this command")
        path = Path(value)
        if not path.exists():
            raise UsageError(f"--{flag}", f"{path} does not exist")
        return path

    def input(self, name: str) -> Path:
        path = self.out / name
        if not path.exists():
            raise UsageError("--out", f"{path} is missing; run the producing stage first")
        return path

    def kb(self) -> KnowledgeBase:
        return load_kb(self.require("kb"))

    def split(self, name: str, required: bool = True) -> tuple[list[Document], list[Annotation]]:
        path = self.require("corpus") / f"{name}.pubtator"
        if not path.exists():
            if required:
                raise UsageError("--corpus", f"{path} does not exist")
            return [], []
        with open(path, encoding="utf-8") as fh:
            return parse_pubtator(fh)

    def library_docs(self) -> list[Document]:
        path = self.require("library") / LIBRARY_DOCS
        if not path.exists():
            raise UsageError("--library", f"{path} does not exist")
        with open(path, encoding="utf-8") as fh:
            return parse_pubtator(fh)[0]

    def library_candidates(self, docs: Sequence[Document]):
        path = self.require("library") / LIBRARY_MMI
        if not path.exists():
            raise UsageError("--library", f"{path} does not exist")
        with open(path, encoding="utf-8") as fh:
            return parse_mmi(fh, {d.doc_id: d for d in docs})

    def benchmark(self) -> Benchmark:
        train, dev, test = (self.split(s, required=s != "dev") for s in SPLITS)
        library = self.library_docs() if self.cfg.paths.library else []
        cands = self.library_candidates(library) if library else []
        return Benchmark(self.kb(), *train, *dev, *test, library, cands)

    def write(self, name: str, writer: Callable) -> Path:
        """Write ``out/name`` (text) unless this is a dry run."""
        path = self.out / name
        if not self.dry_run:
            path.parent.mkdir(parents=True, exist_ok=True)
            with open(path, "w", encoding="utf-8", newline="") as fh:
                writer(fh)
        return path

    def finish(self) -> None:
        self.write("config.ini", lambda fh: fh.write(self.cfg.to_ini()))


def _read_jsonl(path: Path, reader):
    with open(path, encoding="utf-8") as fh:
        return reader(fh)


# -- commands ----------------------------------------------------------------

def cmd_ingest(ctx: Context) -> str:
    kb = ctx.kb()
    splits = {s: ctx.split(s, required=s != "dev") for s in SPLITS}
    train_anns = splits["train"][1]
    summary = {"kb_concepts": len(kb), "target_concepts": len(kb.target_ids())}
    for name, (docs, anns) in splits.items():
        summary[name] = {"documents": len(docs), "annotations": len(anns)}
        if name != "train" and docs:
            st = corpus_stats(train_anns, anns, kb)
            summary[name].update(
                fraction_untrained=st.fraction_untrained,
                fraction_undertrained=st.fraction_undertrained,
                fraction_non_canonical=st.fraction_non_canonical,
            )
    ctx.write("stats.json", lambda fh: fh.write(json.dumps(summary, indent=2, sort_keys=True) + "\n"))
    return (f"ingest: {len(kb)} concepts, "
            + ", ".join(f"{summary[s]['documents']} {s}" for s in SPLITS) + " documents")


def cmd_annotate(ctx: Context) -> str:
    docs = ctx.library_docs()
    raw = ctx.library_candidates(docs)
    anns = sorted((select_top_candidate(c) for c in raw),
                  key=lambda a: (a.doc_id, a.start, a.end, a.concept))
    ctx.write("pseudo_raw.jsonl", lambda fh: write_annotations(anns, fh))
    return f"annotate: {len(anns)} top-1 annotations over {len(docs)} library documents"


def cmd_filter(ctx: Context) -> str:
    kb = ctx.kb()
    docs = {d.doc_id: d for d in ctx.library_docs()}
    anns = _read_jsonl(ctx.input("pseudo_raw.jsonl"), read_annotations)
    by_doc = group_by_doc(anns)
    unknown = sorted(set(by_doc) - set(docs))
    if unknown:
        raise UsageError("--library", f"annotations reference unknown document {unknown[0]}")
    flt = AnnotationFilter(kb, abbreviation="abbrev" in ctx.cfg.filters,
                           overlap="overlap" in ctx.cfg.filters).fit()
    ids = sorted(by_doc)
    kept = [a for group in flt.transform([(docs[i], by_doc[i]) for i in ids]) for a in group]
    ctx.write("pseudo_filtered.jsonl", lambda fh: write_annotations(kept, fh))
    return f"filter: kept {len(kept)} of {len(anns)} annotations"


def cmd_augment(ctx: Context) -> str:
    bench = ctx.benchmark()
    anns = _read_jsonl(ctx.input("pseudo_filtered.jsonl"), read_annotations)
    # hand the filtered annotations to the pipeline instead of recomputing them
    docs = {d.doc_id: d for d in bench.library}
    mapped = map_annotations_to_target(anns, docs, bench.kb)
    by_doc = group_by_doc(a for a in mapped if a.concept in bench.kb)
    cfg = ctx.cfg.experiment()
    pseudo = {d: by_doc.get(d, []) for d in sorted(docs)}
    bench._cache[("pseudo", "abbrev" in cfg.filters, "overlap" in cfg.filters)] = pseudo
    corpus = training_corpus(bench, cfg)
    ctx.write("examples.jsonl", lambda fh: write_examples(corpus, fh))
    n_pseudo = sum(ex.is_pseudo for ex in corpus)
    return f"augment: {len(corpus)} examples ({len(corpus) - n_pseudo} manual, {n_pseudo} augmented, k={cfg.k})"


def _extractor(ctx: Context, kb: KnowledgeBase, vocabulary=None) -> ConceptExtractor:
    return ctx.cfg.experiment().extractor(kb, vocabulary)


def cmd_train(ctx: Context) -> str:
    kb = ctx.kb()
    examples = _read_jsonl(ctx.input("examples.jsonl"), read_examples)
    if not examples:
        raise UsageError("--out", "examples.jsonl is empty")
    if ctx.dry_run:
        return f"train: {len(examples)} examples validated"
    vocab = vocabulary_for(kb, (ex.segment.tokens for ex in examples))
    model = _extractor(ctx, kb, vocab).fit_encoder(examples)
    ctx.out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(ctx.out / "model.ckpt", model.params_, model.concept_embeddings_)
    ctx.write("train_log.csv", model.training_log_.write_csv)
    losses = model.training_log_.epoch_losses()
    last = f", final epoch loss {losses[-1]:.4f}" if losses else ""
    return f"train: {len(examples)} examples, {ctx.cfg.training.epochs} epochs{last}"


def _load_model(ctx: Context):
    params, concepts = load_checkpoint(ctx.input("model.ckpt"))
    if concepts is None:
        raise UsageError("--out", "model.ckpt carries no concept embeddings")
    return params, concepts


def cmd_index(ctx: Context) -> str:
    _, concepts = _load_model(ctx)
    if ctx.dry_run:
        return f"index: {len(concepts)} concept vectors validated"
    index = IvfIndex(fine=ctx.cfg.model.fine, seed=ctx.cfg.seed).fit(concepts)
    ctx.out.mkdir(parents=True, exist_ok=True)
    index.save(ctx.out / "index.ivf")
    return f"index: {len(concepts)} concepts in {index.n_lists} lists ({index.fine})"


def _write_predictions(preds: Sequence[PredictionSet], fh) -> None:
    fh.write("doc_id\trank\tconcept\tscore\n")
    for p in preds:
        for rank, (cid, score) in enumerate(zip(p.concepts, p.scores), 1):
            fh.write(f"{p.doc_id}\t{rank}\t{cid}\t{score!r}\n")


def read_predictions(fh) -> dict[str, PredictionSet]:
    rows: dict[str, list[tuple[int, ConceptId, float]]] = {}
    for line_no, line in enumerate(fh, 1):
        line = line.rstrip("\n")
        if line_no == 1 or not line:
            continue
        parts = line.split("\t")
        if len(parts) != 4:
            raise ParseError(f"expected 4 tab-separated fields, got {len(parts)}", line_no)
        try:
            rows.setdefault(parts[0], []).append((int(parts[1]), ConceptId.parse(parts[2]),
                                                  float(parts[3])))
        except ValueError as exc:
            raise ParseError(str(exc), line_no) from None
    out = {}
    for doc_id, items in rows.items():
        items.sort(key=lambda r: r[0])
        out[doc_id] = PredictionSet(doc_id, tuple(c for _, c, _ in items),
                                    tuple(s for _, _, s in items))
    return out


def cmd_extract(ctx: Context) -> str:
    params, _ = _load_model(ctx)
    index = IvfIndex.load(ctx.input("index.ivf"))
    docs, _ = ctx.split(ctx.args.split)
    k, nprobe = ctx.cfg.search.k, ctx.cfg.search.nprobe
    preds = [] if ctx.dry_run else [predict_top10(params, index, d, k, nprobe) for d in docs]
    ctx.write("predictions.tsv", lambda fh: _write_predictions(preds, fh))
    return f"extract: top-{k} concepts for {len(docs)} {ctx.args.split} documents"


def cmd_evaluate(ctx: Context) -> str:
    kb = ctx.kb()
    docs, anns = ctx.split(ctx.args.split)
    _, train_anns = ctx.split("train")
    with open(ctx.input("predictions.tsv"), encoding="utf-8") as fh:
        preds = read_predictions(fh)
    report = split_report(docs, anns, preds, kb, corpus_stats(train_anns, anns, kb),
                          k=ctx.cfg.search.k)
    ctx.write("metrics.csv", lambda fh: write_report_csv(report, fh))
    ctx.write("metrics.json", lambda fh: write_report_json(report, fh))
    rare = "N/A" if report.rare_f1 is None else f"{report.rare_f1:.4f}"
    return f"evaluate: {ctx.args.split} F1@{ctx.cfg.search.k} {report.f1:.4f}, rare F1 {rare}"


def _parse_grid(harness: Harness, raw: str) -> list:
    if harness is Harness.FILTER_ABLATION:
        if not raw:
            return list(FILTER_ABLATION_GRID)
        out = []
        for item in raw.split(";"):
            names = tuple(f for f in item.split("+") if f and f != "none")
            bad = [f for f in names if f not in FILTERS]
            if bad:
                raise UsageError("--grid", f"unknown filter {bad[0]!r}")
            out.append(names)
        return out
    kind = int if harness is Harness.K_SWEEP else float
    try:
        values = [kind(v) for v in raw.split(",") if v]
    except ValueError:
        raise UsageError("--grid", f"cannot parse {raw!r} as {kind.__name__} values") from None
    if not values:
        raise UsageError("--grid", "is empty")
    if any(v < 0 for v in values):
        raise UsageError("--grid", "values must be >= 0")
    return values


def cmd_sweep(ctx: Context) -> str:
    harness = Harness(ctx.args.harness)
    grid = _parse_grid(harness, ctx.args.grid)
    bench = ctx.benchmark()
    if ctx.dry_run:
        return f"sweep: {len(grid)} grid points validated"
    rows = sweep(harness, grid, bench, ctx.cfg.experiment(), split=ctx.args.split)
    ctx.write("sweep.csv", lambda fh: write_sweep_csv(rows, fh))
    best = max(rows, key=lambda r: r[1].f1)
    return f"sweep: {len(rows)} runs over {harness.value}, best F1 {best[1].f1:.4f} at {best[0]}"


def export_benchmark(bench: Benchmark, out: Path, cfg: PipelineConfig,
                     write: Callable[[str, Callable], Path]) -> PipelineConfig:
    """Write ``bench`` as CLI inputs under ``out``; returns the matching config."""
    write("kb.jsonl", lambda fh: write_kb(bench.kb, fh))
    for name in SPLITS:
        docs, anns = bench.split(name)
        write(f"corpus/{name}.pubtator", lambda fh, d=docs, a=anns: fh.write(write_pubtator(d, a)))
    write(f"library/{LIBRARY_DOCS}", lambda fh: fh.write(write_pubtator(bench.library, [])))
    write(f"library/{LIBRARY_MMI}", lambda fh: fh.write(write_mmi(bench.library_candidates, bench.kb)))
    paths = replace(cfg.paths, kb=str(out / "kb.jsonl"), corpus=str(out / "corpus"),
                    library=str(out / "library"), out=str(out / "run"))
    resolved = replace(cfg, paths=paths)
    write("pipeline.ini", lambda fh: fh.write(resolved.to_ini()))
    return resolved


def cmd_synth(ctx: Context) -> str:
    from .synthetic import TUNED_TRAINING, make_benchmark

    bench = make_benchmark(seed=ctx.cfg.seed)
    cfg = ctx.cfg
    if ctx.args.lr is None and ctx.args.epochs is None:
        cfg = replace(cfg, training=replace(cfg.training, **TUNED_TRAINING))
    export_benchmark(bench, ctx.out, cfg, ctx.write)
    return (f"synth: {len(bench.kb.target_ids())} concepts, {len(bench.train_docs)} train, "
            f"{len(bench.library)} library documents in {ctx.out}")


COMMANDS: dict[str, Callable[[Context], str]] = {
    "ingest": cmd_ingest, "annotate": cmd_annotate, "filter": cmd_filter,
    "augment": cmd_augment, "train": cmd_train, "index": cmd_index,
    "extract": cmd_extract, "evaluate": cmd_evaluate, "sweep": cmd_sweep, "synth": cmd_synth,
}


def _configure_logging() -> None:
    raw = os.environ.get(LOG_ENV, "error").lower()
    if raw not in LOG_LEVELS:
        raise UsageError(LOG_ENV, f"must be one of {', '.join(LOG_LEVELS)}, got {raw!r}")
    logging.basicConfig(level=LOG_LEVELS[raw], stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")


def resolve_config(args: argparse.Namespace) -> PipelineConfig:
    cfg = PipelineConfig.load(args.config) if args.config else PipelineConfig()
    try:
        return cfg.override(kb=args.kb, corpus=args.corpus, library=args.library, out=args.out,
                            k=args.k, wa=args.wa, seed=args.seed, filters=args.filters,
                            nprobe=args.nprobe, topk=args.topk, dim=args.dim,
                            epochs=args.epochs, lr=args.lr)
    except ValueError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError("--config", str(exc)) from None


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        _configure_logging()
        cfg = resolve_config(args)
        ctx = Context(args, cfg)
        summary = COMMANDS[args.command](ctx)
        ctx.finish()
    except (UsageError, ConfigError, ParseError) as exc:
        print(f"concept-forge {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (ConceptForgeError, OSError, ValueError, KeyError, FloatingPointError) as exc:
        print(f"concept-forge {args.command}: runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    if args.dry_run:
        summary = f"{summary} (dry run, nothing written)"
    print(summary)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
