"""Contrastive training of the document encoder against frozen concept vectors.

Per-example loss (InfoNCE averaged over the P positives)::

    L = -(1/P) * sum_p log(E_p / (E_p + E_N)),  E_x = exp(sim_x / tau)

Batch loss: ``w_a * sum(pseudo losses) + sum(manual losses)``.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from typing import Iterable, Sequence, TextIO

import numpy as np

from ._random import label_key, stream
from .corpus import Segment, Source
from .encoder import ConceptEmbeddings, EncoderParams, embed_ids
from .exceptions import NonFiniteLoss
from .kb import ConceptId

logger = logging.getLogger(__name__)

N_HARD = 20
N_RANDOM = 5
LOG_FIELDS = ("epoch", "batch", "loss", "lr", "num_manual", "num_pseudo")


@dataclass(frozen=True)
class TrainingExample:
    segment: Segment
    positives: tuple[ConceptId, ...]
    source: Source = Source.MANUAL

    def __post_init__(self):
        if not self.positives:
            raise ValueError(f"example {self.key} has no positive concepts")
        object.__setattr__(self, "positives", tuple(sorted(set(self.positives))))

    @property
    def key(self) -> str:
        return f"{self.segment.doc_id}#{self.segment.index}#{self.source.value}"

    @property
    def is_pseudo(self) -> bool:
        return self.source is Source.PSEUDO


@dataclass(frozen=True)
class NegativeSet:
    hard: tuple[ConceptId, ...]
    random: tuple[ConceptId, ...]

    @property
    def all(self) -> tuple[ConceptId, ...]:
        return self.hard + self.random

    def __len__(self) -> int:
        return len(self.hard) + len(self.random)


@dataclass
class TrainConfig:
    w_a: float = 0.4
    learning_rate: float = 1e-4
    batch_size: int = 16
    temperature: float = 1.0
    epochs: int = 10
    seed: int = 0
    n_hard: int = N_HARD
    n_random: int = N_RANDOM
    resample_per_batch: bool = False

    def __post_init__(self):
        if self.w_a < 0:
            raise ValueError("w_a must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.temperature <= 0:
            raise ValueError("temperature must be > 0")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")

    def lr_at(self, epoch: int) -> float:
        """Linear decay from ``learning_rate`` towards 0 across epochs."""
        return self.learning_rate * (1.0 - epoch / self.epochs)


@dataclass
class TrainingLog:
    rows: list[tuple] = field(default_factory=list)

    def add(self, epoch, batch, loss, lr, num_manual, num_pseudo):
        self.rows.append((epoch, batch, loss, lr, num_manual, num_pseudo))

    def epoch_losses(self) -> list[float]:
        totals: dict[int, float] = {}
        for epoch, _, loss, *_ in self.rows:
            totals[epoch] = totals.get(epoch, 0.0) + loss
        return [totals[e] for e in sorted(totals)]

    def write_csv(self, fh: TextIO) -> None:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(LOG_FIELDS)
        for row in self.rows:
            writer.writerow([row[0], row[1], repr(row[2]), repr(row[3]), row[4], row[5]])


def _logsumexp(x: np.ndarray) -> float:
    if len(x) == 0:
        return -np.inf
    m = x.max()
    return float(m + np.log(np.exp(x - m).sum()))


def infonce_loss(doc_emb, pos_embs, neg_embs, temperature: float = 1.0) -> float:
    """Cosine-similarity InfoNCE of one example, averaged over its positives."""
    doc = np.asarray(doc_emb, dtype=float)
    pos = np.atleast_2d(np.asarray(pos_embs, dtype=float))
    if pos.size == 0:
        raise ValueError("at least one positive is required")
    neg = np.asarray(neg_embs, dtype=float).reshape(-1, doc.shape[0])
    doc_n = doc / np.linalg.norm(doc)

    def sims(m):
        return (m @ doc_n) / np.linalg.norm(m, axis=1)

    a_pos = sims(pos) / temperature
    lse_neg = _logsumexp(sims(neg) / temperature) if len(neg) else -np.inf
    terms = np.logaddexp(a_pos, lse_neg) - a_pos
    return float(terms.mean())


def batch_loss(examples: Sequence[TrainingExample], per_example_losses: Sequence[float],
               w_a: float) -> float:
    if len(examples) != len(per_example_losses):
        raise ValueError("examples and losses are not aligned")
    pseudo = sum(l for e, l in zip(examples, per_example_losses) if e.is_pseudo)
    manual = sum(l for e, l in zip(examples, per_example_losses) if not e.is_pseudo)
    return w_a * pseudo + manual


def sample_negatives(
    positives: Sequence[ConceptId],
    doc_emb: np.ndarray,
    concepts: ConceptEmbeddings,
    rng: np.random.Generator,
    n_hard: int = N_HARD,
    n_random: int = N_RANDOM,
) -> NegativeSet:
    """Top-``n_hard`` non-positive concepts by cosine plus uniform random draws.

    When fewer than ``n_hard + n_random`` negatives exist, all of them are
    returned and the random bucket shrinks first.
    """
    pos_rows = {concepts.row(p) for p in positives if p in concepts}
    scores = concepts.matrix @ doc_emb
    order = np.argsort(-scores, kind="stable")
    candidates = [int(i) for i in order if int(i) not in pos_rows]
    hard = candidates[:n_hard]
    rest = np.array(sorted(candidates[n_hard:]), dtype=np.int64)
    take = min(n_random, len(rest))
    random = rng.choice(rest, size=take, replace=False) if take else np.empty(0, np.int64)
    ids = concepts.ids
    return NegativeSet(tuple(ids[i] for i in hard), tuple(ids[int(i)] for i in random))


@dataclass
class BatchGradient:
    loss: float
    token_ids: np.ndarray  # rows of the embedding table touched
    token_grad: np.ndarray  # len(token_ids) x D
    projection_grad: np.ndarray  # D x D

    def dense_token_grad(self, n_tokens: int) -> np.ndarray:
        out = np.zeros((n_tokens, self.projection_grad.shape[0]))
        out[self.token_ids] = self.token_grad
        return out


def batch_loss_and_grad(
    params: EncoderParams,
    token_ids: Sequence[np.ndarray],
    candidate_rows: Sequence[tuple[np.ndarray, np.ndarray]],
    weights: Sequence[float],
    concept_matrix: np.ndarray,
    temperature: float = 1.0,
) -> BatchGradient:
    """Weighted InfoNCE batch loss and its gradient w.r.t. the encoder params.

    ``candidate_rows[i]`` holds (positive rows, negative rows) into
    ``concept_matrix`` for example ``i``. Examples with zero weight are skipped
    outright so they cannot perturb the floating-point sums.
    """
    dim = params.dim
    keep = [i for i, w in enumerate(weights) if w != 0.0 and len(token_ids[i]) > 0]
    grad_w = np.zeros((dim, dim))
    if not keep:
        return BatchGradient(0.0, np.empty(0, np.int64), np.empty((0, dim)), grad_w)

    uniq = np.unique(np.concatenate([token_ids[i] for i in keep]))
    grad_e = np.zeros((len(uniq), dim))
    E, W = params.token_embeddings, params.projection
    total = 0.0
    for i in keep:
        ids = token_ids[i]
        pos_rows, neg_rows = candidate_rows[i]
        h = E[ids].mean(axis=0)
        z = h @ W
        r = np.linalg.norm(z)
        if r == 0.0:
            continue
        v = z / r
        a_pos = concept_matrix[pos_rows] @ v / temperature
        a_neg = concept_matrix[neg_rows] @ v / temperature
        lse_neg = _logsumexp(a_neg)
        denom = np.logaddexp(a_pos, lse_neg)  # log(E_p + E_N) per positive
        n_pos = len(pos_rows)
        loss = float((denom - a_pos).mean())
        total += weights[i] * loss

        d_pos = (np.exp(a_pos - denom) - 1.0) / n_pos
        if len(neg_rows):
            d_neg = np.exp(a_neg[None, :] - denom[:, None]).sum(axis=0) / n_pos
        else:
            d_neg = np.empty(0)
        g_v = (d_pos @ concept_matrix[pos_rows] + d_neg @ concept_matrix[neg_rows]) / temperature
        g_z = weights[i] * (g_v - v * (v @ g_v)) / r
        grad_w += np.outer(h, g_z)
        g_h = W @ g_z
        np.add.at(grad_e, np.searchsorted(uniq, ids), g_h / len(ids))
    return BatchGradient(total, uniq, grad_e, grad_w)


def _batches(n: int, size: int) -> list[range]:
    return [range(s, min(s + size, n)) for s in range(0, n, size)]


def train(
    corpus: Sequence[TrainingExample],
    params: EncoderParams,
    concepts: ConceptEmbeddings,
    cfg: TrainConfig,
    log: TrainingLog | None = None,
) -> EncoderParams:
    """Mini-batch gradient descent on the weighted InfoNCE objective.

    ``params`` is left untouched; the trained copy is returned. ``concepts``
    is never modified. Batches follow corpus order (shuffle upstream) and
    skip zero-weight examples, so ``w_a=0`` reproduces manual-only training.
    """
    if not corpus:
        raise ValueError("training corpus is empty")
    params = params.copy()
    if cfg.epochs == 0:
        return params
    log = log if log is not None else TrainingLog()

    token_ids = [params.token_ids(ex.segment.tokens) for ex in corpus]
    weights = [cfg.w_a if ex.is_pseudo else 1.0 for ex in corpus]
    usable = [
        [p for p in ex.positives if p in concepts] for ex in corpus
    ]
    pos_rows = [np.array([concepts.row(p) for p in ps], dtype=np.int64) for ps in usable]
    example_keys = [label_key(ex.key) for ex in corpus]
    # zero-weight examples contribute nothing, so they do not occupy batch slots
    active = [i for i in range(len(corpus)) if weights[i] != 0.0]
    batches = [[active[j] for j in b] for b in _batches(len(active), cfg.batch_size)]

    def negatives_for(i: int, epoch: int, batch: int) -> np.ndarray:
        rng = stream(cfg.seed, "negatives", epoch, batch if cfg.resample_per_batch else 0,
                     example_keys[i])
        doc = embed_ids(params, token_ids[i])
        neg = sample_negatives(usable[i], doc, concepts, rng, cfg.n_hard, cfg.n_random)
        return np.array([concepts.row(c) for c in neg.all], dtype=np.int64)

    for epoch in range(cfg.epochs):
        lr = cfg.lr_at(epoch)
        neg_rows: dict[int, np.ndarray] = {}
        if not cfg.resample_per_batch:
            neg_rows = {i: negatives_for(i, epoch, 0) for i in active if len(pos_rows[i])}
        epoch_loss = 0.0
        for b, idx in enumerate(batches):
            members = [i for i in idx if len(pos_rows[i])]
            if cfg.resample_per_batch:
                neg_rows.update({i: negatives_for(i, epoch, b) for i in members})
            grad = batch_loss_and_grad(
                params,
                [token_ids[i] for i in members],
                [(pos_rows[i], neg_rows.get(i, np.empty(0, np.int64))) for i in members],
                [weights[i] for i in members],
                concepts.matrix,
                cfg.temperature,
            )
            if not np.isfinite(grad.loss):
                raise NonFiniteLoss(f"{epoch}:{b}", grad.loss)
            if len(grad.token_ids):
                params.token_embeddings[grad.token_ids] -= lr * grad.token_grad
                params.projection -= lr * grad.projection_grad
            n_pseudo = sum(corpus[i].is_pseudo for i in idx)
            log.add(epoch, b, grad.loss, lr, len(idx) - n_pseudo, n_pseudo)
            epoch_loss += grad.loss
        logger.info("epoch %d lr %.3g loss %.6f", epoch, lr, epoch_loss)
    return params


def read_training_log(fh: Iterable[str]) -> list[dict]:
    return list(csv.DictReader(fh))
