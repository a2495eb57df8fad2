"""Rename-invariant formula graphs and order-preserving graph embeddings for premise selection."""

from .graph import (
    FormulaGraph,
    Treelet,
    build_graph,
    canonical_hash,
    enumerate_treelets,
    export_dot,
    rename_ast_variables,
    treelet_membership_counts,
)
from .hol import close_formula, free_variables, parse, parse_formula, print_formula, tokenize
from .model import ModelConfig, ModelParams, Vocabulary, embed_graph

__version__ = "0.1.0"
