"""Global (cosine), local (normalized-Frobenius aggregate), and fused similarity."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, NumericError

NORM_EPS = 1e-12  # guard against division by zero without disturbing unit rows


@dataclass(frozen=True)
class SimilarityBundle:
    """Global, local, and alpha-fused similarity matrices for one batch."""

    Sg: np.ndarray
    Sl: np.ndarray
    Sf: np.ndarray
    alpha: float


def _unit_rows(x: np.ndarray, what: str) -> np.ndarray:
    norms = np.linalg.norm(x, axis=-1, keepdims=True)
    if np.any(norms == 0.0):
        raise NumericError(f"zero-norm row in {what}")
    return x / np.maximum(norms, NORM_EPS)


def global_similarity(img_globals: np.ndarray, txt_globals: np.ndarray) -> np.ndarray:
    """Pairwise cosine similarity matrix: out[i, j] = cos(img_i, txt_j)."""
    u = _unit_rows(np.asarray(img_globals, dtype=np.float64), "img_globals")
    v = _unit_rows(np.asarray(txt_globals, dtype=np.float64), "txt_globals")
    return u @ v.T


def local_similarity(img_locals: np.ndarray, txt_locals: np.ndarray,
                     aggregation: str = "frobenius",
                     block_rows: int | None = None) -> np.ndarray:
    """Aggregate local-feature similarity for every (image, text) pair.

    For pair (i, j) the d1 x d2 matrix of local cosines is reduced to a single
    score ||M||_F / sqrt(d1*d2), which lies in [0, 1]. Note the Frobenius norm
    discards the sign of individual local cosines.

    block_rows bounds peak memory by processing image rows in chunks; the
    result is bit-identical for any chunking (each output entry sums its own
    terms in a fixed order).
    """
    if aggregation != "frobenius":
        raise ConfigError(f"unknown aggregation {aggregation!r}")
    a = np.asarray(img_locals, dtype=np.float64)
    b = np.asarray(txt_locals, dtype=np.float64)
    if a.ndim != 3 or b.ndim != 3 or a.shape[2] != b.shape[2]:
        raise ConfigError("local blocks must be (n, d1, dim) and (m, d2, dim)")
    na, d1, dim = a.shape
    nb, d2, _ = b.shape
    au = _unit_rows(a, "img_locals").reshape(na * d1, dim)
    bu = _unit_rows(b, "txt_locals").reshape(nb * d2, dim)

    if block_rows is None:
        # keep the (block*d1, nb*d2) intermediate around 64 MB
        block_rows = max(1, int(64e6 / (8 * d1 * nb * d2)))
    out = np.empty((na, nb), dtype=np.float64)
    for start in range(0, na, block_rows):
        stop = min(start + block_rows, na)
        g = au[start * d1:stop * d1] @ bu.T                   # (chunk*d1, nb*d2)
        sq = (g * g).reshape(stop - start, d1, nb, d2)
        out[start:stop] = np.sqrt(sq.sum(axis=(1, 3)))
    out /= np.sqrt(d1 * d2)
    return out


def fused_similarity(Sg: np.ndarray, Sl: np.ndarray, alpha: float) -> np.ndarray:
    """Elementwise fusion alpha*Sg + (1-alpha)*Sl."""
    Sg = np.asarray(Sg, dtype=np.float64)
    Sl = np.asarray(Sl, dtype=np.float64)
    if Sg.shape != Sl.shape:
        raise ConfigError(f"shape mismatch: Sg {Sg.shape} vs Sl {Sl.shape}")
    if not 0.0 <= alpha <= 1.0:
        raise ConfigError(f"alpha must be in [0, 1], got {alpha}")
    return alpha * Sg + (1.0 - alpha) * Sl


def similarity_bundle(img_globals, txt_globals, img_locals, txt_locals,
                      alpha: float) -> SimilarityBundle:
    """Compute all three matrices for a batch."""
    Sg = global_similarity(img_globals, txt_globals)
    Sl = local_similarity(img_locals, txt_locals)
    return SimilarityBundle(Sg=Sg, Sl=Sl, Sf=fused_similarity(Sg, Sl, alpha), alpha=alpha)
