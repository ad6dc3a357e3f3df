"""Estimator facade over encoder, training and index."""

from __future__ import annotations

from typing import Iterable, Sequence

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from ._random import stream
from .ann_index import IvfIndex
from .corpus import Document
from .encoder import (
    DEFAULT_DIM,
    EncoderParams,
    build_vocabulary,
    precompute_concept_embeddings,
)
from .evaluation import TOP_K, PredictionSet, embed_document, predict_top10
from .kb import KnowledgeBase
from .training import TrainConfig, TrainingExample, TrainingLog, train


def vocabulary_for(kb: KnowledgeBase, texts: Iterable[Sequence[str]] = ()) -> dict[str, int]:
    concept_texts = (kb.concept_text(cid).text.split() for cid in kb.target_ids())
    return build_vocabulary([*concept_texts, *texts])


class ConceptExtractor(BaseEstimator):
    """Bi-encoder concept extractor.

    ``fit`` takes a list of :class:`TrainingExample`; ``predict`` takes
    documents and returns one :class:`PredictionSet` per document.
    Concept embeddings are computed once from the initial parameters and
    stay frozen while the document side trains.
    """

    def __init__(self, kb: KnowledgeBase | None = None, dim: int = DEFAULT_DIM,
                 epochs: int = 10, learning_rate: float = 1e-4, batch_size: int = 16,
                 temperature: float = 1.0, w_a: float = 0.4, seed: int = 0,
                 fine: str = "identity", nprobe: int | None = None, top_k: int = TOP_K,
                 vocabulary: dict[str, int] | None = None):
        self.kb = kb
        self.dim = dim
        self.epochs = epochs
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.temperature = temperature
        self.w_a = w_a
        self.seed = seed
        self.fine = fine
        self.nprobe = nprobe
        self.top_k = top_k
        self.vocabulary = vocabulary

    def _train_config(self) -> TrainConfig:
        return TrainConfig(w_a=self.w_a, learning_rate=self.learning_rate,
                           batch_size=self.batch_size, temperature=self.temperature,
                           epochs=self.epochs, seed=self.seed)

    def fit(self, X: Sequence[TrainingExample], y=None) -> "ConceptExtractor":
        self.fit_encoder(X)
        return self.fit_index()

    def fit_encoder(self, X: Sequence[TrainingExample]) -> "ConceptExtractor":
        """Train the document encoder only; no index is built."""
        if self.kb is None:
            raise ValueError("ConceptExtractor needs a knowledge base")
        cfg = self._train_config()
        vocab = self.vocabulary
        if vocab is None:
            vocab = vocabulary_for(self.kb, (ex.segment.tokens for ex in X))
        self.initial_params_ = EncoderParams.initialize(
            vocab, self.dim, stream(self.seed, "encoder"))
        self.concept_embeddings_ = precompute_concept_embeddings(self.initial_params_, self.kb)
        self.training_log_ = TrainingLog()
        self.params_ = train(X, self.initial_params_, self.concept_embeddings_, cfg,
                             self.training_log_)
        return self

    def fit_index(self) -> "ConceptExtractor":
        check_is_fitted(self, "concept_embeddings_")
        self.index_ = IvfIndex(fine=self.fine, seed=self.seed).fit(self.concept_embeddings_)
        return self

    def transform(self, X: Sequence[Document]) -> np.ndarray:
        check_is_fitted(self, "params_")
        return np.array([embed_document(self.params_, d) for d in X])

    def predict(self, X: Sequence[Document]) -> list[PredictionSet]:
        check_is_fitted(self, "params_")
        return [predict_top10(self.params_, self.index_, d, self.top_k, self.nprobe) for d in X]
