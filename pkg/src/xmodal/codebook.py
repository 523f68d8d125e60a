"""Unified vector-quantization codebook shared by the 2D and 3D branches."""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import kernels
from .autodiff import Value

MODALITIES = ("2d", "3d")


class Codebook:
    """Codeword table, EMA decay and per-modality usage counters.

    ``entries`` is a tape leaf so stop-gradient can be checked, but it is
    never handed to the optimizer; only :func:`ema_update` and
    :func:`revive_dead_codes` change it.
    """

    def __init__(self, entries, gamma: float = 0.99):
        if not 0.0 < gamma < 1.0:
            raise ValueError(f"gamma must lie in (0, 1), got {gamma}")
        e = np.asarray(entries, dtype=np.float64)
        if not np.all(np.isfinite(e)):
            raise ValueError("codebook entries must be finite")
        self.entries = ad.parameter(e, "codebook")
        self.gamma = float(gamma)
        v = e.shape[0]
        self.usage_2d = np.zeros(v, dtype=np.int64)
        self.usage_3d = np.zeros(v, dtype=np.int64)
        self.steps_since_use = np.zeros(v, dtype=np.int64)

    @property
    def size(self) -> int:
        return self.entries.shape[0]

    @property
    def dim(self) -> int:
        return self.entries.shape[1]

    @classmethod
    def from_features(cls, features: np.ndarray, size: int, gamma: float,
                      rng: np.random.Generator, noise: float = 1e-2) -> "Codebook":
        f = np.asarray(features, dtype=np.float64)
        pick = rng.choice(len(f), size=size, replace=len(f) < size)
        return cls(f[pick] + noise * rng.standard_normal((size, f.shape[1])), gamma)

    def record_usage(self, indices, modality: str) -> None:
        counts = np.bincount(np.asarray(indices, dtype=np.int64), minlength=self.size)
        if modality == "2d":
            self.usage_2d += counts
        elif modality == "3d":
            self.usage_3d += counts
        else:
            raise ValueError(f"unknown modality {modality!r}")

    def reset_usage(self) -> None:
        self.usage_2d[:] = 0
        self.usage_3d[:] = 0

    def state_dict(self) -> dict:
        return {
            "entries": self.entries.data, "gamma": self.gamma,
            "usage_2d": self.usage_2d, "usage_3d": self.usage_3d,
            "steps_since_use": self.steps_since_use,
        }

    @classmethod
    def from_state(cls, state: dict) -> "Codebook":
        book = cls(np.asarray(state["entries"], dtype=np.float64), float(state["gamma"]))
        book.usage_2d = np.asarray(state["usage_2d"], dtype=np.int64)
        book.usage_3d = np.asarray(state["usage_3d"], dtype=np.int64)
        book.steps_since_use = np.asarray(state["steps_since_use"], dtype=np.int64)
        return book


def nearest(features: np.ndarray, book: Codebook) -> np.ndarray:
    """argmin_k ||f - e_k||, lowest index on ties."""
    return kernels.nearest_codeword(features, book.entries.data)


def quantize(features: Value, book: Codebook, update_usage_for: str | None = None):
    """Snap each row to its nearest codeword; gradients pass straight through."""
    if features.shape[1] != book.dim:
        raise ad.ShapeError(f"feature width {features.shape[1]} != codeword width {book.dim}")
    idx = nearest(features.data, book)
    q = ad.straight_through(features, book.entries.data[idx])
    if update_usage_for is not None:
        book.record_usage(idx, update_usage_for)
    return q, idx


def ema_update(book: Codebook, f2d: np.ndarray, idx2d: np.ndarray,
               f3d: np.ndarray, idx3d: np.ndarray) -> None:
    """e_v <- gamma e_v + (1 - gamma) / (n2d_v + n3d_v) * (sum of assigned 2D and 3D rows).

    Codewords nothing was assigned to keep their value and age by one step.
    """
    v, c = book.size, book.dim
    sums = np.zeros((v, c))
    counts = np.zeros(v)
    for f, idx in ((f2d, idx2d), (f3d, idx3d)):
        f = np.asarray(f, dtype=np.float64).reshape(-1, c)
        idx = np.asarray(idx, dtype=np.int64)
        np.add.at(sums, idx, f)
        counts += np.bincount(idx, minlength=v)
    used = counts > 0
    e = book.entries.data
    g = book.gamma
    e[used] = g * e[used] + (1.0 - g) / counts[used, None] * sums[used]
    book.steps_since_use[used] = 0
    book.steps_since_use[~used] += 1


def commitment_loss(f2d: Value, f3d: Value, book: Codebook, anchor: str = "3d") -> Value:
    """Mean over matched pairs of ||F2d - sg[e]||^2 + ||F3d - sg[e]||^2.

    With ``anchor="3d"`` both rows commit to the codeword nearest the 3D
    feature. ``anchor="per_modality"`` is the plain VQ baseline where each
    row commits to its own nearest codeword.
    """
    m = f3d.shape[0]
    if f2d.shape[0] != m:
        raise ad.ShapeError(f"unpaired rows: {f2d.shape[0]} 2D vs {m} 3D")
    if m == 0:
        warnings.warn("commitment loss over zero pairs is defined as 0")
        return ad.constant(0.0)
    v3 = nearest(f3d.data, book)
    e3 = ad.detach(ad.rows(book.entries, v3))
    if anchor == "3d":
        e2 = e3
    elif anchor == "per_modality":
        e2 = ad.detach(ad.rows(book.entries, nearest(f2d.data, book)))
    else:
        raise ValueError(f"unknown anchor {anchor!r}")
    err = ad.add(ad.total(ad.square(ad.sub(f2d, e2))), ad.total(ad.square(ad.sub(f3d, e3))))
    return ad.mul(err, 1.0 / m)


@dataclass
class UsageStats:
    count_2d: np.ndarray
    count_3d: np.ndarray
    joint_fraction: float
    perplexity: float

    def to_csv(self) -> str:
        lines = ["codeword,count_2d,count_3d,joint"]
        for v, (a, b) in enumerate(zip(self.count_2d, self.count_3d)):
            lines.append(f"{v},{int(a)},{int(b)},{int(a > 0 and b > 0)}")
        return "\n".join(lines) + "\n"


def usage_stats(book: Codebook) -> UsageStats:
    u2, u3 = book.usage_2d.copy(), book.usage_3d.copy()
    tot = (u2 + u3).astype(np.float64)
    active = tot > 0
    if not active.any():
        return UsageStats(u2, u3, 0.0, 0.0)
    joint = float(np.sum((u2 > 0) & (u3 > 0)) / np.sum(active))
    p = tot[active] / tot.sum()
    return UsageStats(u2, u3, joint, float(np.exp(-np.sum(p * np.log(p)))))


def revive_dead_codes(book: Codebook, donor_features: np.ndarray, threshold_steps: int,
                      seed: int | np.random.Generator, noise: float = 1e-3) -> int:
    """Reset codewords idle for ``threshold_steps`` to random donor rows plus small noise."""
    donors = np.asarray(donor_features, dtype=np.float64)
    if len(donors) == 0:
        raise ValueError("revive_dead_codes needs at least one donor row")
    stale = np.flatnonzero(book.steps_since_use >= threshold_steps)
    if len(stale) == 0:
        return 0
    rng = np.random.default_rng(seed)
    pick = rng.integers(len(donors), size=len(stale))
    book.entries.data[stale] = donors[pick] + noise * rng.standard_normal((len(stale), book.dim))
    book.steps_since_use[stale] = 0
    return int(len(stale))
