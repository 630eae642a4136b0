"""Hierarchical forecasting: hierarchy construction, coherency-informed learning and GLS reconciliation."""

__version__ = "0.1.0"

from .covariance import CovarianceEstimate, ResidualStore, estimate
from .hierarchy import (
    SummationMatrix,
    Tree,
    bottom_extractor,
    build_tree,
    compose,
    layout_permutation,
    prune,
    structural_vector,
    summation_matrix,
    temporal_summation,
    temporal_tree,
)
from .learner import HierarchicalRegressor
from .metrics import EvaluationReport, coherency_ms3e, ms3e, relmse, scaled_errors
from .reconcile import GLSReconciler, reconcile_gls, reconcile_oracle
from .treebuild import WardTreeBuilder, cut, ward_cluster

__all__ = [
    "CovarianceEstimate",
    "EvaluationReport",
    "GLSReconciler",
    "HierarchicalRegressor",
    "ResidualStore",
    "SummationMatrix",
    "Tree",
    "WardTreeBuilder",
    "bottom_extractor",
    "build_tree",
    "coherency_ms3e",
    "compose",
    "cut",
    "estimate",
    "layout_permutation",
    "ms3e",
    "prune",
    "reconcile_gls",
    "reconcile_oracle",
    "relmse",
    "scaled_errors",
    "structural_vector",
    "summation_matrix",
    "temporal_summation",
    "temporal_tree",
    "ward_cluster",
]
