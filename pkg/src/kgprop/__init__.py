"""Gated propagation over typed label graphs for multi-label and zero-shot tagging."""

from kgprop.diff_core import ParamStore, finite_diff_check, init_params
from kgprop.knowledge_graph import EdgeKind, GraphBuildConfig, Taxonomy, TypedGraph, build_typed_graph
from kgprop.propagation import GraphContext, ModelConfig, PropagationNet
from kgprop.semantic_space import EmbeddingTable, LabelVocabulary, load_embeddings

__all__ = [
    "EdgeKind",
    "EmbeddingTable",
    "GraphBuildConfig",
    "GraphContext",
    "LabelVocabulary",
    "ModelConfig",
    "ParamStore",
    "PropagationNet",
    "Taxonomy",
    "TypedGraph",
    "build_typed_graph",
    "finite_diff_check",
    "init_params",
    "load_embeddings",
]

__version__ = "0.1.0"
