"""Loss-based clean/ambiguous/noisy partition, the self-paced regularizer with its
closed-form optimal weights, and the assembled training objective."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Tuple

import numpy as np

from .errors import ConfigError, NumericError

BUCKET_CLEAN = 0
BUCKET_AMBIGUOUS = 1
BUCKET_NOISY = 2
BUCKET_NAMES = ("clean", "ambiguous", "noisy")


@dataclass(frozen=True)
class Partition:
    """Disjoint index sets by per-pair loss against the two pace thresholds."""

    clean_idx: np.ndarray
    ambiguous_idx: np.ndarray
    noisy_idx: np.ndarray
    gamma1: float
    gamma2: float

    def bucket_codes(self, b: int) -> np.ndarray:
        codes = np.empty(b, dtype=np.int8)
        codes[self.clean_idx] = BUCKET_CLEAN
        codes[self.ambiguous_idx] = BUCKET_AMBIGUOUS
        codes[self.noisy_idx] = BUCKET_NOISY
        return codes


@dataclass(frozen=True)
class SplWeights:
    """Per-pair importance weights and the threshold that produced each."""

    w: np.ndarray           # (b,) in [0, 1]; 0 for the noisy bucket
    gamma_used: np.ndarray  # (b,) gamma1 for clean, gamma2 otherwise


def _check_gammas(gamma1: float, gamma2: float) -> None:
    if not (0 < gamma1 < gamma2):
        raise ConfigError(f"need 0 < gamma1 < gamma2, got gamma1={gamma1}, gamma2={gamma2}")


def partition(l_total: np.ndarray, gamma1: float, gamma2: float) -> Partition:
    """Split pairs: l < gamma1 clean, gamma1 <= l < gamma2 ambiguous, l >= gamma2 noisy."""
    _check_gammas(gamma1, gamma2)
    l = np.asarray(l_total, dtype=np.float64)
    clean = np.flatnonzero(l < gamma1)
    ambiguous = np.flatnonzero((l >= gamma1) & (l < gamma2))
    noisy = np.flatnonzero(l >= gamma2)
    return Partition(clean, ambiguous, noisy, gamma1, gamma2)


def regularizer(w, gamma: float, l) -> np.ndarray | float:
    """Self-paced penalty -(2/pi)*gamma*(w*arccos(w) - sqrt(1 - w^2)) when l < gamma, else 0.

    Its minimizer over w in [0,1] of w*l + R(w, gamma) is cos(pi/2 * l/gamma).
    """
    if gamma <= 0:
        raise ConfigError(f"gamma must be > 0, got {gamma}")
    w_arr = np.asarray(w, dtype=np.float64)
    if np.any(w_arr < 0.0) or np.any(w_arr > 1.0):
        raise NumericError(f"weights must lie in [0, 1], got {w}")
    l_arr = np.asarray(l, dtype=np.float64)
    val = -(2.0 / np.pi) * gamma * (w_arr * np.arccos(w_arr) - np.sqrt(1.0 - w_arr ** 2))
    out = np.where(l_arr < gamma, val, 0.0)
    return float(out) if out.ndim == 0 else out


def optimal_weight(l, gamma: float) -> np.ndarray | float:
    """Closed-form minimizer of w*l + R(w, gamma): cos(pi/2 * l/gamma) for l < gamma, else 0."""
    if gamma <= 0:
        raise ConfigError(f"gamma must be > 0, got {gamma}")
    l_arr = np.asarray(l, dtype=np.float64)
    out = np.where(l_arr < gamma, np.cos(0.5 * np.pi * l_arr / gamma), 0.0)
    return float(out) if out.ndim == 0 else out


def optimal_weight_oracle(l: float, gamma: float, grid_steps: int = 100_000) -> float:
    """Grid minimizer of w*l + R(w, gamma) over w in [0, 1]; test oracle only."""
    if l >= gamma:
        return 0.0
    grid = np.linspace(0.0, 1.0, grid_steps + 1)
    objective = grid * l + regularizer(grid, gamma, l)
    return float(grid[int(np.argmin(objective))])


def weighted_spl_loss(l_total: np.ndarray, weights: np.ndarray, bucket: np.ndarray,
                      gamma: float) -> float:
    """(1/b) * sum over the bucket of w_i*l_i + R(w_i, gamma); b is the full batch size."""
    l = np.asarray(l_total, dtype=np.float64)
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != l.shape:
        raise ValueError(f"weights shape {w.shape} does not match losses {l.shape}")
    b = len(l)
    if len(bucket) == 0:
        return 0.0
    lb, wb = l[bucket], w[bucket]
    return float((wb * lb + regularizer(wb, gamma, lb)).sum() / b)


def compute_weights(l_total: np.ndarray, gamma1: float, gamma2: float
                    ) -> Tuple[Partition, SplWeights]:
    """Partition the batch and assign each pair its closed-form weight.

    Clean pairs use gamma1, ambiguous pairs gamma2, noisy pairs get w=0.
    """
    part = partition(l_total, gamma1, gamma2)
    l = np.asarray(l_total, dtype=np.float64)
    w = np.zeros_like(l)
    gamma_used = np.full_like(l, gamma2)
    w[part.clean_idx] = optimal_weight(l[part.clean_idx], gamma1)
    gamma_used[part.clean_idx] = gamma1
    w[part.ambiguous_idx] = optimal_weight(l[part.ambiguous_idx], gamma2)
    return part, SplWeights(w=w, gamma_used=gamma_used)


@dataclass(frozen=True)
class ObjectiveParts:
    L_S1: float
    L_S2: float
    L_soft: float


def assemble_objective(l_total: np.ndarray, rtl_loss: float, lambda1: float, lambda2: float,
                       gamma1: float, gamma2: float
                       ) -> Tuple[float, ObjectiveParts, Partition, SplWeights]:
    """L = L_S1 + lambda1*L_S2 + lambda2*L_soft with closed-form weights per bucket."""
    if lambda1 < 0 or lambda2 < 0:
        raise ConfigError("lambda1 and lambda2 must be >= 0")
    part, weights = compute_weights(l_total, gamma1, gamma2)
    L_S1 = weighted_spl_loss(l_total, weights.w, part.clean_idx, gamma1)
    L_S2 = weighted_spl_loss(l_total, weights.w, part.ambiguous_idx, gamma2)
    total = L_S1 + lambda1 * L_S2 + lambda2 * rtl_loss
    return total, ObjectiveParts(L_S1, L_S2, rtl_loss), part, weights


def overall_objective(batch, heads, hyper):
    """Full per-batch objective for projected embeddings.

    Returns (L_overall, ObjectiveParts, Partition, SplWeights). Thin wrapper
    over the trainer's forward pass plus assemble_objective.
    """
    from .trainer import batch_objective  # local import: trainer depends on this module

    state = batch_objective(heads, batch, hyper)
    return state.loss, state.parts, state.partition, state.weights
