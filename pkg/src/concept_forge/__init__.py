"""Concept extraction with a bi-encoder trained on manual plus pseudo-annotated data."""

from .ann_index import IvfIndex, SearchParams, exact_search
from .augmentation import AugmentationConfig, augment_to_threshold
from .corpus import Annotation, Document, parse_pubtator
from .encoder import EncoderParams, embed_text
from .evaluation import MetricsReport, PredictionSet, split_report
from .extractor import ConceptExtractor
from .kb import Concept, ConceptId, KnowledgeBase
from .pseudo import AnnotationFilter
from .training import TrainConfig, TrainingExample, infonce_loss, train

__version__ = "0.1.0"

__all__ = [
    "Annotation", "AnnotationFilter", "AugmentationConfig", "Concept", "ConceptExtractor",
    "ConceptId", "Document", "EncoderParams", "IvfIndex", "KnowledgeBase", "MetricsReport",
    "PredictionSet", "SearchParams", "TrainConfig", "TrainingExample", "augment_to_threshold",
    "embed_text", "exact_search", "infonce_loss", "parse_pubtator", "split_report", "train",
]
