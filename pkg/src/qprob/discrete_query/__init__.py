"""Discrete query algebra and its exact, Monte Carlo and beam estimators."""

from .beam import (BeamSet, PrunedTree, coverage_beam_search, hybrid_estimate,
                   hybrid_variance_diagnostic, hybrid_variance_terms, split_point,
                   tail_splitting_beam_search)
from .estimators import (a_before_b_bounds, exact_enumerate, importance_estimate,
                         importance_samples, naive_estimate, naive_samples,
                         proposal_next_dist, surrogate_ground_truth)
from .query import Query, QueryBlock, build_query, load_query, query_from_dict, query_to_dict

__all__ = [
    "BeamSet", "PrunedTree", "Query", "QueryBlock", "a_before_b_bounds", "build_query",
    "coverage_beam_search", "exact_enumerate", "hybrid_estimate", "hybrid_variance_diagnostic",
    "hybrid_variance_terms", "importance_estimate", "importance_samples", "load_query",
    "naive_estimate", "naive_samples", "proposal_next_dist", "query_from_dict", "query_to_dict",
    "split_point", "surrogate_ground_truth", "tail_splitting_beam_search",
]
