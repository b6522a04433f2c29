"""Training objectives: logloss, cosine homogeneity, contrastive losses, total.

Batch sums are divided by the batch size B so the loss weights do not
depend on B. Similarities are cosine similarities throughout.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Iterable, Optional

import numpy as np

from . import autodiff as ad

log = logging.getLogger(__name__)

PROB_CLAMP = 1e-7


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 0.2
    beta1: float = 0.3
    beta2: float = 0.2
    tau: float = 0.2

    def __post_init__(self):
        if not self.tau > 0:
            raise ValueError(f"temperature must be positive, got {self.tau}")
        for name in ("alpha", "beta1", "beta2"):
            v = getattr(self, name)
            if not np.isfinite(v) or v < 0:
                raise ValueError(f"{name} must be finite and >= 0, got {v}")

    def ablated(self, ablations: Iterable[str]) -> "LossWeights":
        ablations = set(ablations)
        return LossWeights(
            0.0 if "CL" in ablations else self.alpha,
            0.0 if "COS" in ablations else self.beta1,
            0.0 if "COS" in ablations else self.beta2,
            self.tau,
        )


@dataclass
class LossBreakdown:
    total: ad.Var
    ctr: float
    cl: float
    cos1: float
    cos2: float
    weights: LossWeights

    def as_dict(self) -> dict:
        w = self.weights
        return {
            "total": float(self.total.value),
            "ctr": self.ctr,
            "cl": self.cl,
            "cos1": self.cos1,
            "cos2": self.cos2,
            "cl_term": w.alpha * self.cl,
            "cos1_term": w.beta1 * self.cos1,
            "cos2_term": w.beta2 * self.cos2,
        }


def logloss(prob: ad.Var, labels) -> ad.Var:
    """Mean binary cross-entropy; probabilities are clamped to [1e-7, 1 - 1e-7]."""
    y = np.asarray(labels, dtype=np.float64).reshape(prob.shape)
    p = ad.clip(prob, PROB_CLAMP, 1.0 - PROB_CLAMP)
    tape = prob.tape
    pos = ad.mul(tape.constant(y), ad.log(p))
    neg = ad.mul(tape.constant(1.0 - y), ad.log(1.0 - p))
    return -ad.mean(pos + neg)


def _normalized(v: ad.Var) -> ad.Var:
    out = ad.l2_normalize_rows(v)
    if out.degenerate_rows:
        log.warning("%d zero-norm rows in a cosine similarity; their similarity is taken as 0", out.degenerate_rows)
    return out


def cosine_sim(a: ad.Var, b: ad.Var) -> ad.Var:
    """Row-wise cosine similarity of two [B, d] (or [d]) Vars; [B] result."""
    if a.shape != b.shape:
        raise ad.DimensionError(f"cosine_sim: shapes {a.shape} and {b.shape} differ")
    if a.value.ndim == 1:
        a = ad.reshape(a, (1, a.shape[0]))
        b = ad.reshape(b, (1, b.shape[0]))
    return ad.sum(ad.mul(_normalized(a), _normalized(b)), axis=1)


def cos_loss(v: ad.Var, v_aux: ad.Var) -> ad.Var:
    """mean_i (1 - cos(V_i, V'_i))."""
    return ad.mean(1.0 - cosine_sim(v, v_aux))


def do_infonce(v1: ad.Var, v2: ad.Var, tau: float) -> ad.Var:
    """Denominator-only InfoNCE, averaged over the batch.

    Per instance: -log(exp(1/tau) / sum_j exp(cos(V'_i, V''_j)/tau)),
    evaluated as logsumexp_j(cos_ij / tau) - 1/tau. The j sum includes j = i.
    """
    if v1.shape != v2.shape:
        raise ad.DimensionError(f"do_infonce: shapes {v1.shape} and {v2.shape} differ")
    lse = ad.gram_logsumexp(_normalized(v1), _normalized(v2), scale=1.0 / tau)
    return ad.mean(lse) - 1.0 / tau


def infonce(v1: ad.Var, v2: ad.Var, tau: float) -> ad.Var:
    """Standard InfoNCE with the diagonal pairs as positives, batch-averaged."""
    if v1.shape != v2.shape:
        raise ad.DimensionError(f"infonce: shapes {v1.shape} and {v2.shape} differ")
    a, c = _normalized(v1), _normalized(v2)
    lse = ad.gram_logsumexp(a, c, scale=1.0 / tau)
    pos = ad.scale(ad.sum(ad.mul(a, c), axis=1), 1.0 / tau)
    return ad.mean(lse - pos)


CONTRASTIVE = {"do_infonce": do_infonce, "infonce": infonce}


def total_loss(
    ctr: ad.Var,
    v_main: Optional[ad.Var],
    v_ep: Optional[ad.Var],
    v_ip: Optional[ad.Var],
    weights: LossWeights,
    ablations: Iterable[str] = (),
    contrastive: str = "do_infonce",
) -> LossBreakdown:
    """ctr + alpha*cl + beta1*cos(V, V') + beta2*cos(V, V'').

    Terms whose weight is zero (including via the CL / COS ablations) are
    not built and report 0.
    """
    w = weights.ablated(ablations)
    total = ctr
    cl = cos1 = cos2 = 0.0
    if w.alpha > 0:
        term = CONTRASTIVE[contrastive](v_ep, v_ip, w.tau)
        cl = float(term.value)
        total = total + ad.scale(term, w.alpha)
    if w.beta1 > 0:
        term = cos_loss(v_main, v_ep)
        cos1 = float(term.value)
        total = total + ad.scale(term, w.beta1)
    if w.beta2 > 0:
        term = cos_loss(v_main, v_ip)
        cos2 = float(term.value)
        total = total + ad.scale(term, w.beta2)
    return LossBreakdown(total, float(ctr.value), cl, cos1, cos2, w)
