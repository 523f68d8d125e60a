"""Contrastive, orthogonality and aggregate objectives."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Value

TERMS = ("nce", "commit", "rec", "occ", "orth", "kl")


def info_nce(f3d: Value, f2d: Value, tau: float) -> Value:
    """Point-to-pixel InfoNCE: 3D anchors, positives on the diagonal, 2D negatives."""
    m = f3d.shape[0]
    if m < 2:
        raise ValueError(f"InfoNCE needs at least 2 pairs, got {m}")
    if f2d.shape != f3d.shape:
        raise ad.ShapeError(f"pair shapes differ: {f3d.shape} vs {f2d.shape}")
    if tau <= 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    logits = ad.mul(ad.matmul(f3d, ad.transpose(f2d)), 1.0 / tau)
    diag = ad.mul(ad.log_softmax_rows(logits), ad.constant(np.eye(m)))
    return ad.mul(ad.total(diag), -1.0 / m)


def sample_pairs(survivors: np.ndarray, f3d: Value, f2d_pixels: Value, image_width: int,
                 m_max: int, seed) -> tuple[Value, Value] | None:
    """Up to ``m_max`` surviving pairs, shuffled; ``None`` when fewer than two survive."""
    corr = np.asarray(survivors, dtype=np.int64).reshape(-1, 3)
    if len(corr) < 2:
        return None
    rng = np.random.default_rng(seed)
    pick = rng.permutation(len(corr))[:m_max]
    chosen = corr[pick]
    pix = chosen[:, 1] * image_width + chosen[:, 2]
    return ad.rows(f3d, chosen[:, 0]), ad.rows(f2d_pixels, pix)


def orthogonal_loss(pairs) -> Value:
    """Sum over modalities of ||F^T G||_F^2 / m^2 (rows scaled by 1/sqrt(m))."""
    out = ad.constant(0.0)
    for f, g in pairs:
        if f.shape[0] != g.shape[0]:
            raise ad.ShapeError(f"row mismatch {f.shape} vs {g.shape}")
        m = f.shape[0]
        cross = ad.matmul(ad.transpose(f), g)
        out = ad.add(out, ad.mul(ad.total(ad.square(cross)), 1.0 / (m * m)))
    return out


# --- auxiliary KL slot ------------------------------------------------------

_KL_IMPL: Callable | None = None


def register_kl(fn: Callable) -> None:
    """Install ``fn(g3d_specific, metadata) -> scalar Value`` as the KL term."""
    global _KL_IMPL
    _KL_IMPL = fn


def unregister_kl() -> None:
    global _KL_IMPL
    _KL_IMPL = None


def kl_slot(g3d_specific: Value, metadata: dict | None = None) -> Value:
    if _KL_IMPL is None:
        return ad.constant(0.0)
    out = _KL_IMPL(g3d_specific, metadata or {})
    out = ad.lift(out)
    if out.shape != (1, 1) or not math.isfinite(out.item()) or out.item() < 0:
        raise ValueError(f"KL implementation returned {out.data.ravel()[:3]}; need a finite non-negative scalar")
    return out


# --- aggregation ----------------------------------------------------------

@dataclass
class LossBundle:
    terms: dict[str, Value]
    weights: dict[str, float]
    total: Value
    values: dict[str, float] = field(default_factory=dict)


def total_loss(terms: dict, weights: dict | None = None) -> LossBundle:
    weights = {t: 1.0 for t in TERMS} | (weights or {})
    total = ad.constant(0.0)
    values = {}
    for name in TERMS:
        term = ad.lift(terms.get(name, 0.0))
        v = term.item()
        if not math.isfinite(v):
            raise FloatingPointError(f"loss term {name!r} is not finite ({v})")
        values[name] = v
        w = weights.get(name, 1.0)
        if w != 0.0:
            total = ad.add(total, ad.mul(term, w))
    values["total"] = total.item()
    return LossBundle(dict(terms), weights, total, values)
