"""Independent reference computations the pipeline is checked against.

Nothing here calls the code under test for the quantity being verified.
"""

import math
from dataclasses import dataclass

import numpy as np

from concept_forge.encoder import UNK, EncoderParams

FD_EPS = 1e-4
GRAD_RTOL = 1e-4
# below this magnitude a central difference is dominated by float rounding
GRAD_ATOL = 1e-9


def infonce_reference(sims_pos, sims_neg, tau=1.0) -> float:
    """Per-example loss straight from the definition, in plain floats."""
    e_n = sum(math.exp(s / tau) for s in sims_neg)
    terms = [-math.log(math.exp(s / tau) / (math.exp(s / tau) + e_n)) for s in sims_pos]
    return sum(terms) / len(terms)


def unit_rows(rng, n, d):
    m = rng.normal(size=(n, d))
    return m / np.linalg.norm(m, axis=1, keepdims=True)


@dataclass
class GradInstance:
    params: EncoderParams
    token_ids: list
    candidates: list
    weights: list
    concepts: np.ndarray
    temperature: float


def random_grad_instance(rng) -> GradInstance:
    dim = int(rng.integers(2, 9))
    n_vocab = int(rng.integers(3, 21))
    vocab = {UNK: 0, **{f"t{i}": i for i in range(1, n_vocab)}}
    params = EncoderParams(rng.uniform(-1, 1, (n_vocab, dim)), rng.uniform(-1, 1, (dim, dim)), vocab)
    n_concepts = 10
    concepts = unit_rows(rng, n_concepts, dim)
    n_examples = int(rng.integers(1, 5))
    token_ids, candidates, weights = [], [], []
    for _ in range(n_examples):
        token_ids.append(rng.integers(0, n_vocab, size=int(rng.integers(1, 7))))
        p = int(rng.integers(1, 4))
        n = int(rng.integers(0, 7))
        rows = rng.permutation(n_concepts)
        candidates.append((rows[:p], rows[p:p + n]))
        weights.append(1.0 if rng.random() < 0.5 else float(rng.uniform(0.1, 1.0)))
    return GradInstance(params, token_ids, candidates, weights, concepts,
                        float(rng.choice([1.0, 0.5, 2.0])))


def reference_batch_loss(inst: GradInstance, table: np.ndarray, proj: np.ndarray) -> float:
    """Weighted loss recomputed from scratch: mean-pool, project, normalize, score."""
    total = 0.0
    for ids, (pos, neg), w in zip(inst.token_ids, inst.candidates, inst.weights):
        z = table[ids].mean(axis=0) @ proj
        v = z / np.linalg.norm(z)
        sims = inst.concepts @ v
        total += w * infonce_reference(sims[pos], sims[neg], inst.temperature)
    return total


def numeric_gradients(inst: GradInstance, eps: float = FD_EPS):
    table, proj = inst.params.token_embeddings.copy(), inst.params.projection.copy()
    out = []
    for mat in (table, proj):
        grad = np.zeros_like(mat)
        for idx in np.ndindex(mat.shape):
            old = mat[idx]
            mat[idx] = old + eps
            up = reference_batch_loss(inst, table, proj)
            mat[idx] = old - eps
            down = reference_batch_loss(inst, table, proj)
            mat[idx] = old
            grad[idx] = (up - down) / (2 * eps)
        out.append(grad)
    return out


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """max over entries of |a - n| / max(|a|, |n|); entries where both are
    below GRAD_ATOL count as agreeing."""
    a, n = np.abs(analytic), np.abs(numeric)
    scale = np.maximum(a, n)
    err = np.abs(analytic - numeric)
    mask = scale > GRAD_ATOL
    if not mask.any():
        return 0.0
    return float((err[mask] / scale[mask]).max())


# -- metrics -------------------------------------------------------------------

def brute_force_report(docs, gold_pairs, preds, types, train_counts, nc_pairs, k=10):
    """Micro metrics by enumerating every (document, concept) pair.

    gold_pairs / nc_pairs: sets of (doc_id, concept); preds: doc_id -> ranked list;
    types: concept -> semantic type; train_counts: concept -> manual doc count.
    """
    def prf(hit, pred, gold):
        if gold == 0:
            return None
        p = hit / pred if pred else 0.0
        r = hit / gold
        return p, r, (2 * p * r / (p + r) if p + r else 0.0)

    scored = [d for d in docs if any((d, c) in gold_pairs for c in types)]
    res = {"n_docs": len(scored)}
    concepts = sorted(types)

    def tally(keep):
        hit = pred = gold = 0
        for d in scored:
            top = preds[d][:k]
            for c in concepts:
                if not keep(c):
                    continue
                g = (d, c) in gold_pairs
                p = c in top
                hit += g and p
                gold += g
                pred += p
        return prf(hit, pred, gold)

    hit = gold = 0
    for d in scored:
        top = preds[d][:k]
        for c in concepts:
            if (d, c) in gold_pairs:
                gold += 1
                hit += c in top
    p = hit / (k * len(scored)) if scored else 0.0
    r = hit / gold if gold else 0.0
    res["all"] = (p, r, 2 * p * r / (p + r) if p + r else 0.0)
    res["rare"] = tally(lambda c: train_counts.get(c, 0) < 10)
    res["types"] = {t: tally(lambda c, t=t: types[c] == t) for t in sorted(set(types.values()))}
    nc = [(d, c) for d in scored for c in concepts if (d, c) in nc_pairs and (d, c) in gold_pairs]
    res["nc5"] = sum(c in preds[d][:5] for d, c in nc) / len(nc) if nc else None
    res["nc10"] = sum(c in preds[d][:10] for d, c in nc) / len(nc) if nc else None
    return res


@dataclass
class ScoringCase:
    kb: object
    train_anns: list
    docs: list
    anns: list
    preds: dict
    # ground truth for the oracle, derived from how the case was drawn
    gold_pairs: set
    nc_pairs: set
    types: dict
    train_counts: dict


def random_scoring_case(rng, n_concepts=None, n_docs=None) -> ScoringCase:
    """A small random corpus with known gold, mention classes and training counts."""
    from concept_forge.corpus import Annotation, Document
    from concept_forge.evaluation import PredictionSet
    from concept_forge.kb import Concept, ConceptId, KnowledgeBase

    n_concepts = n_concepts or int(rng.integers(3, 25))
    n_docs = n_docs or int(rng.integers(1, 15))
    stypes = ["Chemical", "Disease", "Gene"][: int(rng.integers(1, 4))]
    ids = [ConceptId("MESH", f"D{i:06d}") for i in range(n_concepts)]
    types = {c: stypes[int(rng.integers(len(stypes)))] for c in ids}
    kb = KnowledgeBase.from_concepts(Concept(c, (f"Name{i}",), "", types[c]) for i, c in enumerate(ids))

    train_counts, train_anns = {}, []
    for i, c in enumerate(ids):
        n = int(rng.integers(0, 15))
        train_counts[c] = n
        train_anns += [Annotation(f"T{i}_{j}", 0, 1, f"Name{i}", c) for j in range(n)]

    docs, anns, gold, nc, preds = [], [], set(), set(), {}
    for d in range(n_docs):
        doc_id = f"D{d}"
        docs.append(Document(doc_id, "title", "body text"))
        for i in rng.choice(n_concepts, size=int(rng.integers(0, min(6, n_concepts) + 1)), replace=False):
            canon = [bool(rng.random() < 0.5) for _ in range(int(rng.integers(1, 4)))]
            for flag in canon:
                anns.append(Annotation(doc_id, 0, 1, f"Name{i}" if flag else f"other{i}", ids[i]))
            gold.add((doc_id, ids[i]))
            if not any(flag for flag in canon):
                nc.add((doc_id, ids[i]))
        size = int(rng.integers(0, min(12, n_concepts) + 1))
        ranked = tuple(ids[i] for i in rng.permutation(n_concepts)[:size])
        preds[doc_id] = PredictionSet(doc_id, ranked)
    return ScoringCase(kb, train_anns, docs, anns, preds, gold, nc, types, train_counts)


def brute_force_case(case: ScoringCase, k=10):
    return brute_force_report([d.doc_id for d in case.docs], case.gold_pairs,
                              {d: list(p.concepts) for d, p in case.preds.items()},
                              case.types, case.train_counts, case.nc_pairs, k)


def report_matches(report, expected, tol=1e-12) -> bool:
    def close(a, b):
        if a is None or b is None:
            return a is None and b is None
        return all(abs(x - y) <= tol for x, y in zip(a, b))

    rare = None if report.rare_f1 is None else (report.rare_precision, report.rare_recall, report.rare_f1)
    types = {t: v for t, v in expected["types"].items() if v is not None}
    return (
        report.n_docs == expected["n_docs"]
        and close((report.precision, report.recall, report.f1), expected["all"])
        and close(rare, expected["rare"])
        and set(report.per_type) == set(types)
        and all(close(report.per_type[t], types[t]) for t in types)
        and close(None if report.nc_recall_at_5 is None else (report.nc_recall_at_5,),
                  None if expected["nc5"] is None else (expected["nc5"],))
        and close(None if report.nc_recall_at_10 is None else (report.nc_recall_at_10,),
                  None if expected["nc10"] is None else (expected["nc10"],))
    )
