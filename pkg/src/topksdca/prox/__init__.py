"""Exact projection and proximal solvers used by the SDCA updates."""

from .bipartite import in_bipartite, project_bipartite
from .entropy import (
    TopkEntropyDual,
    TopkEntropyPrimal,
    prox_ml_entropy,
    prox_topk_entropy_dual,
    solve_entropic_root,
    solve_topk_entropy_primal,
)
from .knapsack import KnapsackProblem, knapsack, solve_knapsack
from .topk import project_topk_alpha, project_topk_beta

__all__ = [
    "KnapsackProblem",
    "knapsack",
    "solve_knapsack",
    "project_topk_alpha",
    "project_topk_beta",
    "project_bipartite",
    "in_bipartite",
    "prox_topk_entropy_dual",
    "solve_topk_entropy_primal",
    "prox_ml_entropy",
    "solve_entropic_root",
    "TopkEntropyDual",
    "TopkEntropyPrimal",
]
