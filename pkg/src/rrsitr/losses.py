"""Symmetric InfoNCE contrastive losses and the adaptive-margin robust triplet loss."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from .errors import ConfigError


@dataclass(frozen=True)
class PerPairLoss:
    """Per-pair contrastive losses; l_total drives the self-paced partition."""

    l_g: np.ndarray       # (b,) global contrastive loss per pair
    l_l: np.ndarray       # (b,) local contrastive loss per pair
    l_total: np.ndarray   # l_g + l_l


@dataclass(frozen=True)
class RtlResult:
    """Robust triplet loss value plus the mined negatives and margins used."""

    loss: float
    mu_hat: np.ndarray        # (b,) image->text soft margins
    zeta_hat: np.ndarray      # (b,) text->image soft margins
    hard_txt_idx: np.ndarray  # (b,) hardest text negative per image anchor
    hard_img_idx: np.ndarray  # (b,) hardest image negative per text anchor


def _log_softmax(z: np.ndarray, axis: int) -> np.ndarray:
    zmax = z.max(axis=axis, keepdims=True)
    shifted = z - zmax
    return shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))


def infonce_per_pair(S: np.ndarray, tau: float) -> np.ndarray:
    """Per-pair symmetric InfoNCE: l[j] = -(log p_row[j,j] + log p_col[j,j]).

    p_row/p_col are softmax over S/tau along rows (image->text) and columns
    (text->image); the mean of l over the batch is the usual batch loss.
    """
    if tau <= 0:
        raise ConfigError(f"tau must be > 0, got {tau}")
    S = np.asarray(S, dtype=np.float64)
    if S.ndim != 2 or S.shape[0] != S.shape[1] or S.shape[0] < 2:
        raise ConfigError(f"S must be square with b >= 2, got shape {S.shape}")
    z = S / tau
    lr = np.diag(_log_softmax(z, axis=1))
    lc = np.diag(_log_softmax(z, axis=0))
    return -(lr + lc)


def infonce_batch(Sg: np.ndarray, Sl: np.ndarray, tau: float) -> Tuple[float, float, float]:
    """Batch losses (L_g, L_l, L_g + L_l) as means of the per-pair terms."""
    L_g = float(infonce_per_pair(Sg, tau).mean())
    L_l = float(infonce_per_pair(Sl, tau).mean())
    return L_g, L_l, L_g + L_l


def per_pair_losses(Sg: np.ndarray, Sl: np.ndarray, tau: float) -> PerPairLoss:
    l_g = infonce_per_pair(Sg, tau)
    l_l = infonce_per_pair(Sl, tau)
    return PerPairLoss(l_g=l_g, l_l=l_l, l_total=l_g + l_l)


def hardest_negatives(Sg: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Most-similar non-matching text per image and image per text.

    hard_txt_idx[i] = argmax_{j != i} Sg[i, j]; hard_img_idx[i] = argmax_{j != i} Sg[j, i].
    Ties break toward the lowest index (np.argmax convention).
    """
    Sg = np.asarray(Sg, dtype=np.float64)
    b = Sg.shape[0]
    if b < 2:
        raise ConfigError("need b >= 2 to mine negatives")
    masked = Sg.copy()
    np.fill_diagonal(masked, -np.inf)
    return masked.argmax(axis=1), masked.argmax(axis=0)


def adaptive_margins(Sg: np.ndarray, hard_txt_idx: np.ndarray, hard_img_idx: np.ndarray,
                     sigma: float) -> Tuple[np.ndarray, np.ndarray]:
    """Soft margins sigma*(1 + max(0, hardest_negative - positive)) per direction."""
    if sigma <= 0:
        raise ConfigError(f"sigma must be > 0, got {sigma}")
    b = Sg.shape[0]
    rows = np.arange(b)
    pos = Sg[rows, rows]
    mu_hat = sigma * (1.0 + np.maximum(0.0, Sg[rows, hard_txt_idx] - pos))
    zeta_hat = sigma * (1.0 + np.maximum(0.0, Sg[hard_img_idx, rows] - pos))
    return mu_hat, zeta_hat


def robust_triplet_loss(Sg: np.ndarray, sigma: float, adaptive: bool = True,
                        include: Optional[np.ndarray] = None) -> RtlResult:
    """Hinge loss against the hardest in-batch negatives with soft margins.

    loss = (1/b) * sum_i [mu_i - pos_i + hard_txt_i]_+ + [zeta_i - pos_i + hard_img_i]_+

    With adaptive=False the margins are the constant sigma. `include` is an
    optional boolean mask restricting which anchors contribute; the sum is
    always normalized by the full batch size.
    """
    Sg = np.asarray(Sg, dtype=np.float64)
    b = Sg.shape[0]
    if b < 2:
        raise ConfigError("need b >= 2")
    ht, hi = hardest_negatives(Sg)
    if adaptive:
        mu_hat, zeta_hat = adaptive_margins(Sg, ht, hi, sigma)
    else:
        if sigma <= 0:
            raise ConfigError(f"sigma must be > 0, got {sigma}")
        mu_hat = np.full(b, sigma)
        zeta_hat = np.full(b, sigma)
    rows = np.arange(b)
    pos = Sg[rows, rows]
    h1 = np.maximum(0.0, mu_hat - pos + Sg[rows, ht])
    h2 = np.maximum(0.0, zeta_hat - pos + Sg[hi, rows])
    if include is not None:
        mask = np.asarray(include, dtype=bool)
        if mask.shape != (b,):
            raise ConfigError("include mask must be (b,)")
        h1 = h1 * mask
        h2 = h2 * mask
    return RtlResult(loss=float((h1 + h2).sum() / b), mu_hat=mu_hat, zeta_hat=zeta_hat,
                     hard_txt_idx=ht, hard_img_idx=hi)
