"""Neuron matching: linear assignment and matched averaging."""
from .hungarian import linear_assignment
from .matched_averaging import (
    COST_MODES,
    ClientMatch,
    GlobalAtoms,
    MatchConfig,
    MatchResult,
    MatchStats,
    average_layer,
    build_extended_cost,
    match_client,
    matched_average,
    objective_value,
)

__all__ = [
    "linear_assignment", "COST_MODES", "ClientMatch", "GlobalAtoms", "MatchConfig",
    "MatchResult", "MatchStats", "average_layer", "build_extended_cost", "match_client",
    "matched_average", "objective_value",
]
