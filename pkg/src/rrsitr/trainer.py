"""Trainable projection heads over precomputed embeddings, analytic gradients of the
full objective, Adam with warmup+cosine schedule, and the alternating training loop.

Per step the per-pair losses are computed without gradient, the closed-form weights
(and triplet margins / mined negatives) are frozen, and one gradient step is taken
on the resulting objective. Everything is float64 and deterministic per seed.
"""
from __future__ import annotations

import struct
import time
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Tuple

import numpy as np

from . import selfpaced
from .data import Dataset, PairBatch, batch_iter
from .errors import ConfigError, FormatError, NumericError
from .losses import RtlResult, adaptive_margins, hardest_negatives, infonce_per_pair
from .selfpaced import (BUCKET_AMBIGUOUS, BUCKET_CLEAN, BUCKET_NOISY, ObjectiveParts,
                        Partition, SplWeights, optimal_weight, regularizer)

NORM_EPS = 1e-12
RRSP_MAGIC = b"RRSP"
RRSP_VERSION = 1
ADAM_BETA1, ADAM_BETA2, ADAM_EPS = 0.9, 0.999, 1e-8


@dataclass
class Hyper:
    """All scalar knobs in one validated record.

    lr defaults to a desk-scale value; the published fine-tuning rate (7e-6)
    only makes sense for large pretrained encoders.
    """

    tau: float = 0.07
    gamma1: float = 5.0
    gamma2: float = 18.0
    sigma: float = 0.6
    lambda1: float = 0.8
    lambda2: float = 0.9
    alpha: float = 0.9
    lr: float = 1e-3
    weight_decay: float = 0.7
    warmup_steps: int = 200
    max_grad_norm: float = 50.0
    epochs: int = 50
    batch_size: int = 100
    seed: int = 0
    # optional behavior flags (defaults follow the main method)
    rtl_noisy_only: bool = False      # restrict triplet loss to the noisy bucket
    pace_epochs: int = 0              # >0: grow gamma2 linearly over this many epochs
    spl_sum_over_all: bool = False    # L_S2 sums over all pairs below gamma2, not just ambiguous

    def __post_init__(self):
        if self.tau <= 0:
            raise ConfigError(f"tau must be > 0, got {self.tau}")
        if not (0 < self.gamma1 < self.gamma2):
            raise ConfigError(f"need 0 < gamma1 < gamma2, got {self.gamma1}, {self.gamma2}")
        if self.sigma <= 0:
            raise ConfigError(f"sigma must be > 0, got {self.sigma}")
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ConfigError("lambda1 and lambda2 must be >= 0")
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError(f"alpha must be in [0, 1], got {self.alpha}")
        if self.lr <= 0:
            raise ConfigError(f"lr must be > 0, got {self.lr}")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be >= 0")
        if self.warmup_steps < 0:
            raise ConfigError("warmup_steps must be >= 0")
        if self.max_grad_norm <= 0:
            raise ConfigError("max_grad_norm must be > 0")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if self.batch_size < 2:
            raise ConfigError(f"batch_size must be >= 2, got {self.batch_size}")
        if self.seed < 0:
            raise ConfigError("seed must be a non-negative integer")


@dataclass
class ProjectionHeads:
    """Affine maps (one per modality) applied to every global and local row,
    followed by renormalization to unit length."""

    W_img: np.ndarray
    b_img: np.ndarray
    W_txt: np.ndarray
    b_txt: np.ndarray

    @property
    def dim_in(self) -> int:
        return self.W_img.shape[1]

    @property
    def dim_out(self) -> int:
        return self.W_img.shape[0]

    def copy(self) -> "ProjectionHeads":
        return ProjectionHeads(self.W_img.copy(), self.b_img.copy(),
                               self.W_txt.copy(), self.b_txt.copy())

    def params(self) -> Dict[str, np.ndarray]:
        return {"W_img": self.W_img, "b_img": self.b_img,
                "W_txt": self.W_txt, "b_txt": self.b_txt}


def init_heads(dim_in: int, dim_out: Optional[int] = None, seed: int = 0,
               noise_std: float = 0.01) -> ProjectionHeads:
    """Identity-padded init plus small Gaussian noise; biases start at zero."""
    if dim_out is None:
        dim_out = dim_in
    rng = np.random.default_rng(seed)
    def w():
        return np.eye(dim_out, dim_in) + noise_std * rng.normal(size=(dim_out, dim_in))
    return ProjectionHeads(W_img=w(), b_img=np.zeros(dim_out),
                           W_txt=w(), b_txt=np.zeros(dim_out))


# ---------------------------------------------------------------------------
# ablation variants

@dataclass(frozen=True)
class VariantSpec:
    use_local: bool = True
    weighting: str = "spl"          # spl | uniform | hard_to_easy | random
    merge_ambiguous: bool = False   # single threshold gamma1; rest is noisy
    use_rtl: bool = True
    adaptive_margin: bool = True


VARIANTS: Dict[str, VariantSpec] = {
    "full": VariantSpec(),
    "no_local": VariantSpec(use_local=False),
    "no_spl": VariantSpec(weighting="uniform"),
    "no_rtl": VariantSpec(use_rtl=False),
    "none_of_three": VariantSpec(use_local=False, weighting="uniform", use_rtl=False),
    "spl_hard_to_easy": VariantSpec(weighting="hard_to_easy"),
    "spl_random_weights": VariantSpec(weighting="random"),
    "spl_no_ambiguous": VariantSpec(merge_ambiguous=True),
    "fixed_margin_rtl": VariantSpec(adaptive_margin=False),
}
_VARIANT_ALIASES = {f"#{k}": name for k, name in enumerate(
    ["no_local", "no_spl", "no_rtl", "none_of_three", "spl_hard_to_easy",
     "spl_random_weights", "spl_no_ambiguous", "fixed_margin_rtl"], start=1)}


def resolve_variant(name: str) -> VariantSpec:
    key = _VARIANT_ALIASES.get(name, name)
    if key not in VARIANTS:
        raise ConfigError(f"unknown variant {name!r}; choose from "
                          f"{sorted(VARIANTS) + sorted(_VARIANT_ALIASES)}")
    return VARIANTS[key]


# ---------------------------------------------------------------------------
# forward pass

def _project_rows(X: np.ndarray, W: np.ndarray, b: np.ndarray):
    Z = X @ W.T + b
    r = np.maximum(np.linalg.norm(Z, axis=1, keepdims=True), NORM_EPS)
    return Z / r, r


@dataclass
class _Projected:
    """Unit-norm projected blocks plus what backward needs."""

    Uig: np.ndarray   # (b, dout) image globals
    Uil: np.ndarray   # (b*d1, dout) image locals, flattened
    Utg: np.ndarray
    Utl: np.ndarray   # (b*d2, dout)
    rig: np.ndarray
    ril: np.ndarray
    rtg: np.ndarray
    rtl: np.ndarray
    d1: int
    d2: int


def _project_batch(heads: ProjectionHeads, batch: PairBatch) -> _Projected:
    if batch.image_global.shape[1] != heads.dim_in:
        raise ConfigError(f"dataset dim {batch.image_global.shape[1]} does not match "
                          f"heads dim_in {heads.dim_in}")
    b, d1, dim = batch.image_local.shape
    d2 = batch.text_local.shape[1]
    Uig, rig = _project_rows(batch.image_global, heads.W_img, heads.b_img)
    Uil, ril = _project_rows(batch.image_local.reshape(b * d1, dim), heads.W_img, heads.b_img)
    Utg, rtg = _project_rows(batch.text_global, heads.W_txt, heads.b_txt)
    Utl, rtl = _project_rows(batch.text_local.reshape(b * d2, dim), heads.W_txt, heads.b_txt)
    return _Projected(Uig, Uil, Utg, Utl, rig, ril, rtg, rtl, d1, d2)


def forward(heads: ProjectionHeads, batch: PairBatch) -> PairBatch:
    """Apply both heads to all four embedding blocks and renormalize."""
    p = _project_batch(heads, batch)
    b = batch.size
    return PairBatch(
        indices=batch.indices,
        image_global=p.Uig,
        image_local=p.Uil.reshape(b, p.d1, -1),
        text_global=p.Utg,
        text_local=p.Utl.reshape(b, p.d2, -1),
        y=batch.y,
    )


def _local_similarity_from_units(p: _Projected, b: int):
    """Sl plus the intermediates reused by backward."""
    G = p.Uil @ p.Utl.T                                    # (b*d1, b*d2) local cosines
    sq = (G * G).reshape(b, p.d1, b, p.d2)
    norms = np.sqrt(sq.sum(axis=(1, 3)))                   # Frobenius norm per (i, j)
    Sl = norms / np.sqrt(p.d1 * p.d2)
    return Sl, G, norms


# ---------------------------------------------------------------------------
# objective with frozen weights / margins

@dataclass
class FrozenPlan:
    """Everything held constant during the parameter-update step.

    w1/w2 are the effective per-pair weights entering L_S1/L_S2 (zero outside
    their scope); r1/r2 are the corresponding regularizer values (constants).
    """

    w1: np.ndarray
    r1: np.ndarray
    w2: np.ndarray
    r2: np.ndarray
    mu_hat: Optional[np.ndarray]
    zeta_hat: Optional[np.ndarray]
    hard_txt_idx: Optional[np.ndarray]
    hard_img_idx: Optional[np.ndarray]
    rtl_mask: Optional[np.ndarray]    # boolean anchor mask or None for all
    variant: VariantSpec


def _build_plan(l_total: np.ndarray, hyper: Hyper, variant: VariantSpec,
                gamma2: float, weight_rng: Optional[np.random.Generator]
                ) -> Tuple[FrozenPlan, Partition, SplWeights]:
    b = len(l_total)
    g1 = hyper.gamma1
    part = selfpaced.partition(l_total, g1, gamma2)
    zeros = np.zeros(b)

    if variant.merge_ambiguous:
        # single threshold: former ambiguous pairs are treated as noisy
        part = Partition(part.clean_idx,
                         np.empty(0, dtype=np.int64),
                         np.sort(np.concatenate([part.ambiguous_idx, part.noisy_idx])),
                         g1, gamma2)

    clean_mask = np.zeros(b, dtype=bool)
    clean_mask[part.clean_idx] = True
    amb_mask = np.zeros(b, dtype=bool)
    amb_mask[part.ambiguous_idx] = True

    if variant.weighting == "uniform":
        w1, r1, w2, r2 = np.ones(b), zeros, zeros, zeros
        w_report = np.ones(b)
    elif variant.weighting == "random":
        if weight_rng is None:
            raise ConfigError("random weighting needs an RNG")
        w1 = weight_rng.uniform(size=b)
        r1, w2, r2 = zeros, zeros, zeros
        w_report = w1
    else:
        reverse = variant.weighting == "hard_to_easy"
        if variant.weighting not in ("spl", "hard_to_easy"):
            raise ConfigError(f"unknown weighting {variant.weighting!r}")
        wc = np.asarray(optimal_weight(l_total, g1))
        wa = np.asarray(optimal_weight(l_total, gamma2))
        if reverse:
            wc = np.where(l_total < g1, 1.0 - wc, 0.0)
            wa = np.where(l_total < gamma2, 1.0 - wa, 0.0)
        w1 = np.where(clean_mask, wc, 0.0)
        r1 = np.where(clean_mask, regularizer(np.clip(w1, 0, 1), g1, l_total), 0.0)
        scope2 = (l_total < gamma2) if hyper.spl_sum_over_all else amb_mask
        if variant.merge_ambiguous:
            scope2 = np.zeros(b, dtype=bool)
        w2 = np.where(scope2, wa, 0.0)
        r2 = np.where(scope2, regularizer(np.clip(w2, 0, 1), gamma2, l_total), 0.0)
        w_report = np.where(clean_mask, w1, np.where(amb_mask, wa, 0.0))

    gamma_used = np.where(clean_mask, g1, gamma2)
    weights = SplWeights(w=w_report, gamma_used=gamma_used)

    rtl_mask = None
    if variant.use_rtl and hyper.rtl_noisy_only:
        rtl_mask = np.zeros(b, dtype=bool)
        rtl_mask[part.noisy_idx] = True

    plan = FrozenPlan(w1=w1, r1=r1, w2=w2, r2=r2, mu_hat=None, zeta_hat=None,
                      hard_txt_idx=None, hard_img_idx=None, rtl_mask=rtl_mask,
                      variant=variant)
    return plan, part, weights


@dataclass
class BatchState:
    """Result of one objective evaluation at the current parameters."""

    loss: float
    parts: ObjectiveParts
    partition: Partition
    weights: SplWeights
    l_total: np.ndarray
    l_g: np.ndarray
    l_l: Optional[np.ndarray]
    rtl: Optional[RtlResult]
    plan: FrozenPlan
    gamma2_effective: float


def _frozen_rtl_terms(Sg: np.ndarray, plan: FrozenPlan):
    b = Sg.shape[0]
    rows = np.arange(b)
    pos = Sg[rows, rows]
    h1 = np.maximum(0.0, plan.mu_hat - pos + Sg[rows, plan.hard_txt_idx])
    h2 = np.maximum(0.0, plan.zeta_hat - pos + Sg[plan.hard_img_idx, rows])
    if plan.rtl_mask is not None:
        h1 = h1 * plan.rtl_mask
        h2 = h2 * plan.rtl_mask
    return h1, h2


def _objective_value(l_total: np.ndarray, Sg: np.ndarray, plan: FrozenPlan,
                     hyper: Hyper) -> Tuple[float, float, float, float]:
    b = len(l_total)
    L_S1 = float((plan.w1 * l_total + plan.r1).sum() / b)
    L_S2 = float((plan.w2 * l_total + plan.r2).sum() / b)
    if plan.variant.use_rtl and hyper.lambda2 > 0:
        h1, h2 = _frozen_rtl_terms(Sg, plan)
        L_soft = float((h1 + h2).sum() / b)
    else:
        L_soft = 0.0
    total = L_S1 + hyper.lambda1 * L_S2 + hyper.lambda2 * L_soft
    return total, L_S1, L_S2, L_soft


def batch_objective(heads: ProjectionHeads, batch: PairBatch, hyper: Hyper,
                    variant: VariantSpec = VARIANTS["full"],
                    weight_rng: Optional[np.random.Generator] = None,
                    gamma2: Optional[float] = None) -> BatchState:
    """Forward pass: per-pair losses, partition, frozen weights, objective value."""
    g2 = hyper.gamma2 if gamma2 is None else gamma2
    p = _project_batch(heads, batch)
    b = batch.size
    Sg = p.Uig @ p.Utg.T
    l_g = infonce_per_pair(Sg, hyper.tau)
    l_l = None
    if variant.use_local:
        Sl, _, _ = _local_similarity_from_units(p, b)
        l_l = infonce_per_pair(Sl, hyper.tau)
        l_total = l_g + l_l
    else:
        l_total = l_g.copy()

    plan, part, weights = _build_plan(l_total, hyper, variant, g2, weight_rng)

    rtl = None
    if variant.use_rtl and hyper.lambda2 > 0:
        ht, hi = hardest_negatives(Sg)
        if variant.adaptive_margin:
            mu, zeta = adaptive_margins(Sg, ht, hi, hyper.sigma)
        else:
            mu = np.full(b, hyper.sigma)
            zeta = np.full(b, hyper.sigma)
        plan.mu_hat, plan.zeta_hat = mu, zeta
        plan.hard_txt_idx, plan.hard_img_idx = ht, hi

    total, L_S1, L_S2, L_soft = _objective_value(l_total, Sg, plan, hyper)
    if variant.use_rtl and hyper.lambda2 > 0:
        rtl = RtlResult(loss=L_soft, mu_hat=plan.mu_hat, zeta_hat=plan.zeta_hat,
                        hard_txt_idx=plan.hard_txt_idx, hard_img_idx=plan.hard_img_idx)
    return BatchState(loss=total, parts=ObjectiveParts(L_S1, L_S2, L_soft),
                      partition=part, weights=weights, l_total=l_total, l_g=l_g,
                      l_l=l_l, rtl=rtl, plan=plan, gamma2_effective=g2)


def objective_with_frozen(heads: ProjectionHeads, batch: PairBatch, hyper: Hyper,
                          plan: FrozenPlan) -> float:
    """Objective value at the current parameters with an externally frozen plan.

    This is the function the gradient step actually descends; finite-difference
    checks must perturb parameters through this, not through batch_objective.
    """
    p = _project_batch(heads, batch)
    b = batch.size
    Sg = p.Uig @ p.Utg.T
    l_g = infonce_per_pair(Sg, hyper.tau)
    if plan.variant.use_local:
        Sl, _, _ = _local_similarity_from_units(p, b)
        l_total = l_g + infonce_per_pair(Sl, hyper.tau)
    else:
        l_total = l_g
    total, _, _, _ = _objective_value(l_total, Sg, plan, hyper)
    return total


# ---------------------------------------------------------------------------
# analytic gradients

def _softmax(z: np.ndarray, axis: int) -> np.ndarray:
    e = np.exp(z - z.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def _infonce_grad(S: np.ndarray, c: np.ndarray, tau: float) -> np.ndarray:
    """Gradient of sum_i c_i * l_i(S) w.r.t. S for the symmetric per-pair InfoNCE."""
    z = S / tau
    P_row = _softmax(z, axis=1)
    P_col = _softmax(z, axis=0)
    G = P_row * c[:, None] + P_col * c[None, :]
    idx = np.arange(S.shape[0])
    G[idx, idx] -= 2.0 * c
    return G / tau


def _renorm_backward(dU: np.ndarray, U: np.ndarray, r: np.ndarray) -> np.ndarray:
    # U = Z / r with r = max(||Z||, eps): dZ = (dU - (dU . U) U) / r
    return (dU - (dU * U).sum(axis=1, keepdims=True) * U) / r


def gradients(heads: ProjectionHeads, batch: PairBatch, hyper: Hyper,
              variant: VariantSpec = VARIANTS["full"],
              weight_rng: Optional[np.random.Generator] = None,
              gamma2: Optional[float] = None
              ) -> Tuple[Dict[str, np.ndarray], BatchState]:
    """Analytic gradients of the objective w.r.t. all head parameters.

    Weights, margins, mined negatives, and the partition are treated as
    constants (they are recomputed from the current parameters, then frozen).
    """
    g2 = hyper.gamma2 if gamma2 is None else gamma2
    p = _project_batch(heads, batch)
    b = batch.size
    dim = heads.dim_in
    Sg = p.Uig @ p.Utg.T
    l_g = infonce_per_pair(Sg, hyper.tau)
    Sl = G_loc = norms = l_l = None
    if variant.use_local:
        Sl, G_loc, norms = _local_similarity_from_units(p, b)
        l_l = infonce_per_pair(Sl, hyper.tau)
        l_total = l_g + l_l
    else:
        l_total = l_g.copy()

    plan, part, weights = _build_plan(l_total, hyper, variant, g2, weight_rng)

    rtl = None
    if variant.use_rtl and hyper.lambda2 > 0:
        ht, hi = hardest_negatives(Sg)
        if variant.adaptive_margin:
            mu, zeta = adaptive_margins(Sg, ht, hi, hyper.sigma)
        else:
            mu = np.full(b, hyper.sigma)
            zeta = np.full(b, hyper.sigma)
        plan.mu_hat, plan.zeta_hat = mu, zeta
        plan.hard_txt_idx, plan.hard_img_idx = ht, hi

    total, L_S1, L_S2, L_soft = _objective_value(l_total, Sg, plan, hyper)
    if not np.isfinite(total):
        raise NumericError(
            f"non-finite objective: L_S1={L_S1}, L_S2={L_S2}, L_soft={L_soft}")
    if variant.use_rtl and hyper.lambda2 > 0:
        rtl = RtlResult(loss=L_soft, mu_hat=plan.mu_hat, zeta_hat=plan.zeta_hat,
                        hard_txt_idx=plan.hard_txt_idx, hard_img_idx=plan.hard_img_idx)

    # d(total)/d(l_i): weights frozen
    c = (plan.w1 + hyper.lambda1 * plan.w2) / b

    # global similarity gradient: contrastive part + triplet hinges
    Gg = _infonce_grad(Sg, c, hyper.tau)
    if variant.use_rtl and hyper.lambda2 > 0:
        h1, h2 = _frozen_rtl_terms(Sg, plan)
        a1 = (h1 > 0).astype(np.float64)
        a2 = (h2 > 0).astype(np.float64)
        coef = hyper.lambda2 / b
        rows = np.arange(b)
        Gg[rows, plan.hard_txt_idx] += coef * a1
        Gg[plan.hard_img_idx, rows] += coef * a2
        Gg[rows, rows] -= coef * (a1 + a2)

    dUig = Gg @ p.Utg
    dUtg = Gg.T @ p.Uig

    if variant.use_local:
        Gl = _infonce_grad(Sl, c, hyper.tau)
        # Sl = ||M||_F / sqrt(d1 d2) per (i, j): dM = Gl * M / (||M||_F sqrt(d1 d2))
        denom = np.maximum(norms, NORM_EPS) * np.sqrt(p.d1 * p.d2)
        W4 = Gl / denom
        dGflat = (G_loc.reshape(b, p.d1, b, p.d2) * W4[:, None, :, None]
                  ).reshape(b * p.d1, b * p.d2)
        dUil = dGflat @ p.Utl
        dUtl = dGflat.T @ p.Uil
    else:
        dUil = np.zeros_like(p.Uil)
        dUtl = np.zeros_like(p.Utl)

    dZig = _renorm_backward(dUig, p.Uig, p.rig)
    dZil = _renorm_backward(dUil, p.Uil, p.ril)
    dZtg = _renorm_backward(dUtg, p.Utg, p.rtg)
    dZtl = _renorm_backward(dUtl, p.Utl, p.rtl)

    Xig = batch.image_global
    Xil = batch.image_local.reshape(b * p.d1, dim)
    Xtg = batch.text_global
    Xtl = batch.text_local.reshape(b * p.d2, dim)
    grads = {
        "W_img": dZig.T @ Xig + dZil.T @ Xil,
        "b_img": dZig.sum(axis=0) + dZil.sum(axis=0),
        "W_txt": dZtg.T @ Xtg + dZtl.T @ Xtl,
        "b_txt": dZtg.sum(axis=0) + dZtl.sum(axis=0),
    }
    state = BatchState(loss=total, parts=ObjectiveParts(L_S1, L_S2, L_soft),
                       partition=part, weights=weights, l_total=l_total, l_g=l_g,
                       l_l=l_l, rtl=rtl, plan=plan, gamma2_effective=g2)
    return grads, state


def clip_gradients(grads: Dict[str, np.ndarray], max_norm: float) -> float:
    """In-place global-norm clipping; returns the pre-clip norm."""
    total = np.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if total > max_norm:
        scale = max_norm / total
        for g in grads.values():
            g *= scale
    return total


def lr_at(step: int, total_steps: int, hyper: Hyper) -> float:
    """Linear warmup from 0 to lr, then cosine decay to 0 at the final step."""
    if step < 0:
        raise ConfigError("step must be >= 0")
    if hyper.warmup_steps > 0 and step < hyper.warmup_steps:
        return hyper.lr * step / hyper.warmup_steps
    span = max(total_steps - hyper.warmup_steps, 1)
    progress = min((step - hyper.warmup_steps) / span, 1.0)
    return hyper.lr * 0.5 * (1.0 + np.cos(np.pi * progress))


class Adam:
    """AdamW-style optimizer: decoupled weight decay on the W matrices only."""

    def __init__(self, heads: ProjectionHeads, weight_decay: float = 0.0):
        self.heads = heads
        self.weight_decay = weight_decay
        self.t = 0
        params = heads.params()
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, grads: Dict[str, np.ndarray], lr: float) -> None:
        self.t += 1
        params = self.heads.params()
        bc1 = 1.0 - ADAM_BETA1 ** self.t
        bc2 = 1.0 - ADAM_BETA2 ** self.t
        for k, param in params.items():
            g = grads[k]
            self.m[k] = ADAM_BETA1 * self.m[k] + (1 - ADAM_BETA1) * g
            self.v[k] = ADAM_BETA2 * self.v[k] + (1 - ADAM_BETA2) * (g * g)
            update = (self.m[k] / bc1) / (np.sqrt(self.v[k] / bc2) + ADAM_EPS)
            param -= lr * update
            if self.weight_decay > 0 and k.startswith("W"):
                param -= lr * self.weight_decay * param


# ---------------------------------------------------------------------------
# training loop and logs

@dataclass
class EpochRecord:
    epoch: int
    loss_overall: float
    loss_s1: float
    loss_s2: float
    loss_soft: float
    n_clean: int
    n_ambiguous: int
    n_noisy: int
    mean_weight: float
    mean_weight_true: Optional[float]    # y=1 pairs
    mean_weight_false: Optional[float]   # y=0 pairs
    weight_hist: List[int]               # 10 uniform bins over [0, 1]
    mean_margin: Optional[float]
    grad_norm: float
    lr: float
    val_mr: Optional[float]
    wall_clock_sec: float

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass
class EpochTrace:
    """Per-pair snapshot of one epoch: loss, weight, and bucket for every pair seen."""

    epoch: int
    pair_id: np.ndarray
    y: np.ndarray
    l_total: np.ndarray
    w: np.ndarray
    bucket: np.ndarray  # 0 clean, 1 ambiguous, 2 noisy

    def to_csv(self, path: str) -> None:
        with open(path, "w") as f:
            f.write("epoch,pair_id,y,l_total,w,bucket\n")
            for i in range(len(self.pair_id)):
                f.write(f"{self.epoch},{self.pair_id[i]},{self.y[i]},"
                        f"{self.l_total[i]:.10g},{self.w[i]:.10g},{self.bucket[i]}\n")


@dataclass
class TrainLog:
    records: List[EpochRecord] = field(default_factory=list)
    traces: Dict[int, EpochTrace] = field(default_factory=dict)
    final_trace: Optional[EpochTrace] = None
    best_epoch: Optional[int] = None
    variant: str = "full"

    def to_jsonl(self, path: str) -> None:
        import json
        with open(path, "w") as f:
            for rec in self.records:
                f.write(json.dumps(rec.to_dict()) + "\n")


def _mean_or_none(values: np.ndarray, mask: np.ndarray) -> Optional[float]:
    return float(values[mask].mean()) if mask.any() else None


def train(dataset: Dataset, hyper: Hyper, val_dataset: Optional[Dataset] = None,
          variant: str = "full", trace_epochs: Iterable[int] = (),
          ) -> Tuple[ProjectionHeads, TrainLog]:
    """Alternating optimization: closed-form weights, then one Adam step per batch.

    Deterministic for fixed (dataset, hyper, seed). If val_dataset is given the
    returned heads are the best-validation-mR checkpoint, otherwise the final
    parameters. The final epoch's per-pair trace is always retained.
    """
    from .evaluation import evaluate  # local import to avoid a module cycle

    vspec = resolve_variant(variant)
    heads = init_heads(dataset.dim, seed=hyper.seed)
    log = TrainLog(variant=variant)
    if hyper.epochs == 0:
        return heads, log

    n = dataset.n_pairs
    bs = hyper.batch_size
    rem = n % bs
    steps_per_epoch = n // bs + (1 if rem >= 2 else 0)
    if steps_per_epoch == 0:
        raise ConfigError(f"dataset of {n} pairs yields no batch of size >= 2")
    total_steps = hyper.epochs * steps_per_epoch

    opt = Adam(heads, weight_decay=hyper.weight_decay)
    weight_rng = np.random.default_rng((hyper.seed, 0x5EED))
    trace_wanted = set(int(e) for e in trace_epochs)
    best_mr = -np.inf
    best_heads = heads.copy()
    step = 0

    for epoch in range(1, hyper.epochs + 1):
        t0 = time.perf_counter()
        if hyper.pace_epochs > 0:
            frac = min(1.0, epoch / hyper.pace_epochs)
            g2 = hyper.gamma1 + (hyper.gamma2 - hyper.gamma1) * frac
        else:
            g2 = hyper.gamma2

        sums = np.zeros(4)  # loss, s1, s2, soft
        counts = np.zeros(3, dtype=np.int64)
        margin_sum, margin_n = 0.0, 0
        grad_norm_sum = 0.0
        n_batches = 0
        ep_ids, ep_y, ep_l, ep_w, ep_bucket = [], [], [], [], []

        for batch in batch_iter(dataset, bs, epoch_seed=hyper.seed * 1_000_003 + epoch):
            try:
                grads, state = gradients(heads, batch, hyper, vspec, weight_rng, gamma2=g2)
            except NumericError as e:
                raise NumericError(
                    f"training diverged at epoch {epoch} step {step}: {e}") from e
            if not np.isfinite(state.loss):
                raise NumericError(f"training diverged at epoch {epoch} step {step}")
            grad_norm_sum += clip_gradients(grads, hyper.max_grad_norm)
            cur_lr = lr_at(step, total_steps, hyper)
            opt.step(grads, cur_lr)
            step += 1
            n_batches += 1

            sums += (state.loss, state.parts.L_S1, state.parts.L_S2, state.parts.L_soft)
            part = state.partition
            counts += (len(part.clean_idx), len(part.ambiguous_idx), len(part.noisy_idx))
            if state.rtl is not None:
                margin_sum += float(state.rtl.mu_hat.sum() + state.rtl.zeta_hat.sum())
                margin_n += 2 * batch.size
            ep_ids.append(batch.indices)
            ep_y.append(batch.y)
            ep_l.append(state.l_total)
            ep_w.append(state.weights.w)
            ep_bucket.append(part.bucket_codes(batch.size))

        ids = np.concatenate(ep_ids)
        order = np.argsort(ids, kind="stable")
        trace = EpochTrace(epoch=epoch,
                           pair_id=ids[order],
                           y=np.concatenate(ep_y)[order],
                           l_total=np.concatenate(ep_l)[order],
                           w=np.concatenate(ep_w)[order],
                           bucket=np.concatenate(ep_bucket)[order])
        if epoch in trace_wanted:
            log.traces[epoch] = trace
        log.final_trace = trace

        val_mr = None
        if val_dataset is not None:
            val_mr = evaluate(heads, val_dataset, hyper).mr
            if val_mr > best_mr:
                best_mr = val_mr
                best_heads = heads.copy()
                log.best_epoch = epoch

        w_all = trace.w
        y_all = trace.y
        log.records.append(EpochRecord(
            epoch=epoch,
            loss_overall=float(sums[0] / n_batches),
            loss_s1=float(sums[1] / n_batches),
            loss_s2=float(sums[2] / n_batches),
            loss_soft=float(sums[3] / n_batches),
            n_clean=int(counts[0]),
            n_ambiguous=int(counts[1]),
            n_noisy=int(counts[2]),
            mean_weight=float(w_all.mean()),
            mean_weight_true=_mean_or_none(w_all, y_all == 1),
            mean_weight_false=_mean_or_none(w_all, y_all == 0),
            weight_hist=np.histogram(w_all, bins=10, range=(0.0, 1.0))[0].tolist(),
            mean_margin=(margin_sum / margin_n) if margin_n else None,
            grad_norm=float(grad_norm_sum / n_batches),
            lr=float(lr_at(step - 1, total_steps, hyper)),
            val_mr=val_mr,
            wall_clock_sec=time.perf_counter() - t0,
        ))

    if val_dataset is not None:
        return best_heads, log
    return heads, log


def ablate(dataset: Dataset, hyper: Hyper, variant: str,
           val_dataset: Optional[Dataset] = None,
           trace_epochs: Iterable[int] = ()) -> Tuple[ProjectionHeads, TrainLog]:
    """Train with one of the named objective substitutions (or 'full')."""
    resolve_variant(variant)  # fail fast on unknown names
    return train(dataset, hyper, val_dataset=val_dataset, variant=variant,
                 trace_epochs=trace_epochs)


# ---------------------------------------------------------------------------
# checkpoints

def save_heads(heads: ProjectionHeads, path: str) -> None:
    """RRSP binary: header then float64 blocks W_img, b_img, W_txt, b_txt."""
    with open(path, "wb") as f:
        f.write(RRSP_MAGIC)
        f.write(struct.pack("<3I", RRSP_VERSION, heads.dim_out, heads.dim_in))
        for arr in (heads.W_img, heads.b_img, heads.W_txt, heads.b_txt):
            f.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_heads(path: str) -> ProjectionHeads:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != RRSP_MAGIC:
            raise FormatError(f"bad magic {magic!r} at byte offset 0, expected {RRSP_MAGIC!r}")
        header = f.read(12)
        if len(header) != 12:
            raise FormatError("truncated checkpoint header")
        version, dout, din = struct.unpack("<3I", header)
        if version != RRSP_VERSION:
            raise FormatError(f"unsupported checkpoint version {version}")
        if dout < 1 or din < 1:
            raise FormatError(f"invalid checkpoint dims {dout}x{din}")

        def block(shape, name):
            count = int(np.prod(shape))
            buf = f.read(8 * count)
            if len(buf) != 8 * count:
                raise FormatError(f"truncated checkpoint: section '{name}'")
            return np.frombuffer(buf, dtype="<f8").reshape(shape).copy()

        return ProjectionHeads(
            W_img=block((dout, din), "W_img"),
            b_img=block((dout,), "b_img"),
            W_txt=block((dout, din), "W_txt"),
            b_txt=block((dout,), "b_txt"),
        )
