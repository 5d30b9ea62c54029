"""Hierarchical session-based sequence recommendation (HierTCN and baselines)."""

from ._accel import backend, set_backend, use_backend
from .data import Dataset, SessionizedHistory, SyntheticConfig, generate_synthetic, load_dataset, segment_sessions
from .embeddings import EmbeddingTable, build_embedding_table
from .models import HighState, Model, ModelConfig, preset, rank_candidates, score

__version__ = "0.1.0"

__all__ = [
    "Dataset", "EmbeddingTable", "HighState", "Model", "ModelConfig", "SessionizedHistory", "SyntheticConfig",
    "backend", "build_embedding_table", "generate_synthetic", "load_dataset", "preset", "rank_candidates",
    "score", "segment_sessions", "set_backend", "use_backend",
]
