"""Embedding ingestion, experiment configs, result tables, SVG plots."""

from .config import ExperimentConfig, load_config
from .embeddings import EmbeddingFile, load_embedding_matrix, write_embedding_matrix
from .plotting import render_variance_plot

__all__ = [
    "EmbeddingFile",
    "ExperimentConfig",
    "load_config",
    "load_embedding_matrix",
    "render_variance_plot",
    "write_embedding_matrix",
]
