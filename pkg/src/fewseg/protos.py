"""Prototype extraction, self-support matching, and mask prediction losses.

The matching head is prototype-based: a foreground/background prototype pair
is pooled from mask-selected feature columns, each pixel is scored by cosine
similarity against both prototypes, and a temperature-scaled 2-way softmax
turns the similarities into a soft mask trained with binary cross entropy.

Self-support matching refines a prototype against the target feature map:
the incoming foreground prototype selects confident foreground/background
regions by thresholded similarity, fresh prototypes are pooled from those
regions, and the result is blended with the input.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from PIL import Image

from .autodiff import Tensor

_NORM_EPS = 1e-12
_BCE_EPS = 1e-7


class DegenerateMaskError(ValueError):
    """Mask selected zero pixels where at least one is required."""


@dataclass
class PrototypePair:
    """Foreground vector plus background representation.

    ``bg`` is a C-vector normally, or a CxHxW per-pixel field when adaptive
    background pooling is enabled.
    """

    fg: Tensor
    bg: Tensor


@dataclass
class SoftMask:
    fg: Tensor  # H'xW' foreground probability
    bg: Tensor  # H'xW' background probability, fg + bg = 1 per pixel


@dataclass(frozen=True)
class SspConfig:
    fg_threshold: float = 0.7
    bg_threshold: float = 0.6
    blend: float = 0.5
    refine_passes: int = 1
    temperature: float = 10.0
    adaptive_bg: bool = False

    def __post_init__(self):
        if not (0 < self.fg_threshold < 1 and 0 < self.bg_threshold < 1):
            raise ValueError("thresholds must lie in (0,1)")
        if self.bg_threshold >= self.fg_threshold:
            raise ValueError("bg_threshold must be below fg_threshold")
        if not (0 <= self.blend <= 1):
            raise ValueError("blend must lie in [0,1]")
        if self.refine_passes < 0 or self.temperature <= 0:
            raise ValueError("refine_passes >= 0 and temperature > 0 required")


def shrink_mask(mask: np.ndarray, shape: tuple) -> np.ndarray:
    """Resize a binary HxW mask to feature resolution: bilinear then 0.5 cut."""
    if mask.shape == tuple(shape):
        return mask.astype(np.float64)
    img = Image.fromarray(mask.astype(np.float32), mode="F")
    small = img.resize((shape[1], shape[0]), Image.BILINEAR)
    return (np.asarray(small) > 0.5).astype(np.float64)


def masked_avg_pool(feature: Tensor, mask: np.ndarray, on_empty: str = "raise") -> Tensor:
    """Mean of feature columns where mask == 1 (masked average pooling).

    ``on_empty`` decides the all-zero-mask fallback: "raise" signals
    DegenerateMaskError, "zero" returns a zero vector.
    """
    mask = np.asarray(mask, dtype=feature.dtype)
    if mask.shape != feature.shape[1:]:
        raise ValueError(f"mask {mask.shape} does not match feature {feature.shape[1:]}")
    count = mask.sum()
    if count == 0:
        if on_empty == "zero":
            return Tensor(np.zeros(feature.shape[0], dtype=feature.dtype))
        raise DegenerateMaskError("mask selects no pixels")
    return (feature * Tensor(mask)).sum(axis=(1, 2)) / float(count)


def _cosine_one(feature: Tensor, proto: Tensor) -> Tensor:
    """Per-pixel cosine similarity of CxHxW features against one prototype.

    ``proto`` is a C-vector or a CxHxW per-pixel field.  Zero-norm pixels or
    prototypes score 0 by convention (tiny epsilon inside both norms).
    """
    if proto.data.ndim == 1:
        proto = proto.reshape(-1, 1, 1)
    dot = (feature * proto).sum(axis=0)
    nf = ((feature * feature).sum(axis=0) + _NORM_EPS).sqrt()
    npr = ((proto * proto).sum(axis=0) + _NORM_EPS).sqrt()
    return dot / (nf * npr)


def cosine_map(feature: Tensor, proto: PrototypePair) -> Tensor:
    """2xH'xW' stack: channel 0 foreground, channel 1 background similarity."""
    return Tensor.stack([_cosine_one(feature, proto.fg), _cosine_one(feature, proto.bg)])


def predict_soft_mask(feature: Tensor, proto: PrototypePair, temperature: float = 10.0) -> SoftMask:
    """Temperature-scaled 2-way softmax over the similarity channels.

    softmax([a*fg, a*bg]) for two logits reduces to a sigmoid of the scaled
    similarity gap, which keeps fg + bg = 1 exact per pixel.
    """
    fg_sim = _cosine_one(feature, proto.fg)
    bg_sim = _cosine_one(feature, proto.bg)
    z = (fg_sim - bg_sim) * float(temperature)
    p_fg = 1.0 / (1.0 + (-z).exp())
    return SoftMask(fg=p_fg, bg=1.0 - p_fg)


def _first_max_mask(sim: np.ndarray) -> np.ndarray:
    """One-pixel mask at the row-major first maximum of a similarity map."""
    mask = np.zeros_like(sim, dtype=np.float64)
    idx = np.unravel_index(int(np.argmax(sim)), sim.shape)
    mask[idx] = 1.0
    return mask


def _first_min_mask(sim: np.ndarray) -> np.ndarray:
    mask = np.zeros_like(sim, dtype=np.float64)
    idx = np.unravel_index(int(np.argmin(sim)), sim.shape)
    mask[idx] = 1.0
    return mask


def _adaptive_bg_field(feature: Tensor, bg_mask: np.ndarray, temperature: float) -> Tensor:
    """Per-pixel background prototype field.

    Each pixel gets its own background prototype: a softmax-weighted (by
    cosine affinity to that pixel) average of the background-candidate
    feature columns.  The candidate selection is detached; weights and
    pooling are differentiable.
    """
    c, h, w = feature.shape
    n = h * w
    flat = feature.reshape(c, n)  # (C, N)
    idx = np.flatnonzero(bg_mask.ravel())
    sel = np.zeros((n, len(idx)), dtype=feature.dtype)
    sel[idx, np.arange(len(idx))] = 1.0
    cand = flat.matmul(Tensor(sel))  # (C, B)

    pix_norm = ((flat * flat).sum(axis=0) + _NORM_EPS).sqrt().reshape(n, 1)
    cand_norm = ((cand * cand).sum(axis=0) + _NORM_EPS).sqrt().reshape(1, -1)
    affinity = flat.T.matmul(cand) / (pix_norm * cand_norm)  # (N, B) cosine

    logits = affinity * float(temperature)
    shifted = logits - Tensor(logits.data.max(axis=1, keepdims=True))
    e = shifted.exp()
    weights = e / e.sum(axis=1).reshape(n, 1)  # rows sum to 1
    field = cand.matmul(weights.T)  # (C, N)
    return field.reshape(c, h, w)


def binary_cross_entropy(pred: SoftMask, target: np.ndarray) -> Tensor:
    """Mean per-pixel BCE with probabilities clamped to [eps, 1-eps]."""
    t = np.asarray(target, dtype=pred.fg.dtype)
    if t.shape != pred.fg.shape:
        raise ValueError(f"target {t.shape} does not match prediction {pred.fg.shape}")
    p_fg = pred.fg.clip(_BCE_EPS, 1 - _BCE_EPS)
    p_bg = pred.bg.clip(_BCE_EPS, 1 - _BCE_EPS)
    return -(Tensor(t) * p_fg.log() + Tensor(1.0 - t) * p_bg.log()).mean()


def _self_support_pass(feature: Tensor, proto: PrototypePair, cfg: SspConfig) -> PrototypePair:
    if cfg.blend == 0:
        return proto  # exact identity; the self branch would get weight 0 anyway
    sim = _cosine_one(feature, proto.fg).data  # region selection is detached
    fg_region = (sim > cfg.fg_threshold).astype(np.float64)
    if fg_region.sum() == 0:
        fg_region = _first_max_mask(sim)  # deterministic row-major fallback
    bg_region = (sim < cfg.bg_threshold).astype(np.float64)
    if bg_region.sum() == 0:
        bg_region = _first_min_mask(sim)

    self_fg = masked_avg_pool(feature, fg_region)
    if cfg.adaptive_bg:
        self_bg = _adaptive_bg_field(feature, bg_region, cfg.temperature)
    else:
        self_bg = masked_avg_pool(feature, bg_region)

    b = float(cfg.blend)
    fg = self_fg * b + proto.fg * (1.0 - b)
    bg_in = proto.bg
    if self_bg.data.ndim == 3 and bg_in.data.ndim == 1:
        bg_in = bg_in.reshape(-1, 1, 1)
    bg = self_bg * b + bg_in * (1.0 - b)
    return PrototypePair(fg=fg, bg=bg)


def self_support(feature: Tensor, proto: PrototypePair, cfg: SspConfig) -> PrototypePair:
    """Refine a prototype pair against a feature map by self-matching.

    Runs 1 + ``refine_passes`` passes, feeding each pass's output back in.
    With blend 0 this is the identity on prototypes, exactly.
    """
    out = proto
    for _ in range(cfg.refine_passes + 1):
        out = _self_support_pass(feature, out, cfg)
    return out


def proto_from_mask(feature: Tensor, mask: np.ndarray) -> PrototypePair:
    """Pool a fg/bg prototype pair from a feature map and its binary mask.

    An empty foreground raises DegenerateMaskError; an empty background
    (all-foreground mask) yields a zero bg vector, which scores cosine 0
    everywhere by convention.
    """
    fg = masked_avg_pool(feature, mask)
    bg = masked_avg_pool(feature, 1.0 - np.asarray(mask, dtype=np.float64), on_empty="zero")
    return PrototypePair(fg=fg, bg=bg)


@dataclass
class BidirectionalOutputs:
    """Prototypes and soft masks from one support->query->support pass."""

    support_proto: PrototypePair
    query_proto: PrototypePair
    back_proto: PrototypePair
    support_pred: SoftMask
    query_pred: SoftMask
    back_pred: SoftMask


def bidirectional_forward(
    f_s: Tensor, m_s: np.ndarray, f_q: Tensor, cfg: SspConfig
) -> BidirectionalOutputs:
    """Support->query prediction plus the reverse query->support prediction.

    ``m_s`` must already live at feature resolution (see shrink_mask).  Query
    predictions are computed over the query feature map so they align with
    query-pixel supervision.
    """
    p_s = proto_from_mask(f_s, m_s)
    support_pred = predict_soft_mask(f_s, p_s, cfg.temperature)
    p_q = self_support(f_q, p_s, cfg)
    query_pred = predict_soft_mask(f_q, p_q, cfg.temperature)
    p_back = self_support(f_s, p_q, cfg)
    back_pred = predict_soft_mask(f_s, p_back, cfg.temperature)
    return BidirectionalOutputs(
        support_proto=p_s,
        query_proto=p_q,
        back_proto=p_back,
        support_pred=support_pred,
        query_pred=query_pred,
        back_pred=back_pred,
    )
