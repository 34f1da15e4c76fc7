"""Iterative bi-directional adaptation loss and test-time prediction.

One adaptation step repeats the bi-directional support/query prediction T
times, supervising every iteration: the support base loss is computed once
from the averaged support prototype, and each iteration contributes a query
loss and a back-predicted support loss.  The total is a weighted sum with a
shared weight for the extra iterations (j >= 1).

Testing uses only the forward support-to-query direction: averaged support
prototype, one self-support refinement, one soft-mask prediction.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor, NumericError
from .protos import (
    PrototypePair,
    SoftMask,
    SspConfig,
    binary_cross_entropy,
    predict_soft_mask,
    proto_from_mask,
    self_support,
)


@dataclass(frozen=True)
class LossWeights:
    support_base: float = 0.2   # weight on the direct support prediction loss
    query: float = 1.0          # weight on the first query prediction loss
    support_back: float = 0.4   # weight on the first back-prediction loss
    iteration: float = 0.1      # shared weight on all j >= 1 iteration losses

    def __post_init__(self):
        if min(self.support_base, self.query, self.support_back, self.iteration) < 0:
            raise ValueError("loss weights must be non-negative")


@dataclass(frozen=True)
class AdaptConfig:
    iterations: int = 3
    weights: LossWeights = LossWeights()
    ssp: SspConfig = SspConfig()

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")


@dataclass
class IterationRecord:
    query_proto: np.ndarray
    support_proto: np.ndarray
    query_soft_mask: np.ndarray
    support_soft_mask: np.ndarray
    query_loss: float
    support_loss: float


@dataclass
class AdaptTrace:
    """Per-iteration record of one adaptation step, plus the totals."""

    support_base_loss: float = 0.0
    iterations: list = field(default_factory=list)  # [IterationRecord]
    total: float = 0.0
    weights: LossWeights = LossWeights()

    @property
    def term_count(self) -> int:
        return 1 + 2 * len(self.iterations)

    def loss_terms(self) -> list:
        terms = [self.support_base_loss]
        for rec in self.iterations:
            terms.extend([rec.query_loss, rec.support_loss])
        return terms

    def weighted_total(self) -> float:
        """Recompute the total from the recorded terms (reconstruction check)."""
        w = self.weights
        total = w.support_base * self.support_base_loss
        for j, rec in enumerate(self.iterations):
            if j == 0:
                total += w.query * rec.query_loss + w.support_back * rec.support_loss
            else:
                total += w.iteration * (rec.query_loss + rec.support_loss)
        return total

    def to_dict(self) -> dict:
        return {
            "support_base_loss": self.support_base_loss,
            "query_losses": [r.query_loss for r in self.iterations],
            "support_losses": [r.support_loss for r in self.iterations],
            "total": self.total,
            "term_count": self.term_count,
        }


def _average_protos(protos: list) -> PrototypePair:
    k = float(len(protos))
    fg = protos[0].fg
    bg = protos[0].bg
    for p in protos[1:]:
        fg = fg + p.fg
        bg = bg + p.bg
    return PrototypePair(fg=fg / k, bg=bg / k)


def _check_finite(value: float, where: str):
    if not np.isfinite(value):
        raise NumericError(f"non-finite loss at {where}")


def adapt_step(
    f_s: list, m_s: list, f_q: Tensor, m_q: np.ndarray, cfg: AdaptConfig
) -> tuple:
    """Full T-iteration adaptation loss for one episode.

    ``f_s``/``m_s`` are K support features and their feature-resolution binary
    masks; ``m_q`` supervises the query (a real mask during source training,
    an augmentation-derived one during target fine-tuning).

    Returns (loss Tensor, AdaptTrace).  The trace holds 1 + 2*T loss terms
    and the scalar total equals their weighted reconstruction.
    """
    if len(f_s) != len(m_s) or not f_s:
        raise ValueError("need K >= 1 support features with matching masks")
    w = cfg.weights
    ssp = cfg.ssp

    support_protos = [proto_from_mask(f, m) for f, m in zip(f_s, m_s)]
    p_s_avg = _average_protos(support_protos)

    base_losses = [
        binary_cross_entropy(predict_soft_mask(f, p_s_avg, ssp.temperature), m)
        for f, m in zip(f_s, m_s)
    ]
    l_bs = sum(base_losses[1:], base_losses[0]) / float(len(base_losses))
    _check_finite(l_bs.item(), "support base loss")

    trace = AdaptTrace(support_base_loss=l_bs.item(), weights=w)
    total = l_bs * w.support_base

    p_s_cur = p_s_avg
    for j in range(cfg.iterations):
        p_q = self_support(f_q, p_s_cur, ssp)
        query_pred = predict_soft_mask(f_q, p_q, ssp.temperature)
        l_q = binary_cross_entropy(query_pred, m_q)

        back_protos = []
        back_losses = []
        back_pred = None
        for f, m in zip(f_s, m_s):
            p_back = self_support(f, p_q, ssp)
            back_pred = predict_soft_mask(f, p_back, ssp.temperature)
            back_protos.append(p_back)
            back_losses.append(binary_cross_entropy(back_pred, m))
        l_s = sum(back_losses[1:], back_losses[0]) / float(len(back_losses))
        _check_finite(l_q.item(), f"query loss, iteration {j}")
        _check_finite(l_s.item(), f"support loss, iteration {j}")

        if j == 0:
            total = total + l_q * w.query + l_s * w.support_back
        else:
            total = total + (l_q + l_s) * w.iteration

        p_s_cur = _average_protos(back_protos)
        trace.iterations.append(
            IterationRecord(
                query_proto=p_q.fg.data.copy(),
                support_proto=p_s_cur.fg.data.copy(),
                query_soft_mask=query_pred.fg.data.copy(),
                support_soft_mask=back_pred.fg.data.copy(),
                query_loss=l_q.item(),
                support_loss=l_s.item(),
            )
        )

    trace.total = total.item()
    return total, trace


def train_step_loss(f_s: Tensor, m_s: np.ndarray, f_q: Tensor, m_q: np.ndarray,
                    weights: LossWeights = LossWeights(), ssp: SspConfig = SspConfig()) -> tuple:
    """Single-iteration, single-support loss used during source training."""
    cfg = AdaptConfig(iterations=1, weights=weights, ssp=ssp)
    return adapt_step([f_s], [m_s], f_q, m_q, cfg)


def predict_query(f_s: list, m_s: list, f_q: Tensor, cfg: AdaptConfig) -> SoftMask:
    """Support-to-query prediction only (testing): no iteration, no loss."""
    support_protos = [proto_from_mask(f, m) for f, m in zip(f_s, m_s)]
    p_s_avg = _average_protos(support_protos)
    p_q = self_support(f_q, p_s_avg, cfg.ssp)
    return predict_soft_mask(f_q, p_q, cfg.ssp.temperature)
