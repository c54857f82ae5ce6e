"""Numerical tolerances shared by every module."""
from __future__ import annotations

from dataclasses import dataclass


@dataclass(frozen=True)
class Tolerances:
    prob_sum: float = 1e-12      # transition rows / policy rows must sum to 1
    norm: float = 1e-12          # slack on feature and coefficient norm bounds
    identity: float = 1e-9       # exact-arithmetic identities checked by DP
    solve: float = 1e-6          # critic objective accuracy and constraint slack


TOL = Tolerances()
