"""Masked image modeling with geometry substitution, and occupancy estimation."""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from . import autodiff as ad
from . import kernels
from .autodiff import Value
from .encoders import glorot, patchify


@dataclass(frozen=True)
class MaskPlan:
    masked_patch_ids: np.ndarray  # sorted
    mask_ratio: float
    seed: int
    grid: tuple[int, int]

    @property
    def n_patches(self) -> int:
        return self.grid[0] * self.grid[1]


def make_mask(grid: tuple[int, int], ratio: float, seed) -> MaskPlan:
    if not 0.0 < ratio < 1.0:
        raise ValueError(f"mask ratio must lie in (0, 1), got {ratio}")
    total = grid[0] * grid[1]
    n = int(np.floor(ratio * total + 0.5))
    rng = np.random.default_rng(seed)
    ids = np.sort(rng.choice(total, size=n, replace=False)).astype(np.int64)
    return MaskPlan(ids, float(ratio), seed if isinstance(seed, int) else -1, tuple(grid))


def empty_mask(grid: tuple[int, int]) -> MaskPlan:
    return MaskPlan(np.zeros(0, dtype=np.int64), 0.0, -1, tuple(grid))


def pixel_patch_ids(rows, cols, grid: tuple[int, int], patch: int) -> np.ndarray:
    return (np.asarray(rows) // patch) * grid[1] + np.asarray(cols) // patch


def masked_pixel_flags(plan: MaskPlan, patch: int) -> np.ndarray:
    """Boolean over pixels (row-major) marking those inside masked patches."""
    gh, gw = plan.grid
    flags = np.zeros(gh * gw, dtype=bool)
    flags[plan.masked_patch_ids] = True
    return np.repeat(np.repeat(flags.reshape(gh, gw), patch, 0), patch, 1).ravel()


def filter_pairs(correspondences: np.ndarray, plan: MaskPlan, patch: int) -> np.ndarray:
    """Drop pairs whose pixel falls in a masked patch; order kept."""
    corr = np.asarray(correspondences, dtype=np.int64).reshape(-1, 3)
    masked = np.zeros(plan.n_patches, dtype=bool)
    masked[plan.masked_patch_ids] = True
    keep = ~masked[pixel_patch_ids(corr[:, 1], corr[:, 2], plan.grid, patch)]
    out = corr[keep]
    if len(corr) and not len(out):
        warnings.warn("every point-pixel pair is masked; contrastive term skipped")
    return out


def substitute_masked_features(f2d_quantized: Value, plan: MaskPlan, correspondences: np.ndarray,
                               f3d_quantized: Value, mask_token: Value, patch: int,
                               use_geometry: bool = True) -> Value:
    """Fill masked pixels with the mean 3D feature of their points, else the mask token.

    With ``use_geometry=False`` every masked pixel takes the mask token.
    """
    n_pix = f2d_quantized.shape[0]
    width = plan.grid[1] * patch
    masked = masked_pixel_flags(plan, patch)
    if not masked.any():
        return f2d_quantized
    corr = np.asarray(correspondences, dtype=np.int64).reshape(-1, 3)
    pix = corr[:, 1] * width + corr[:, 2]
    covered = np.zeros(n_pix, dtype=bool)
    parts = [ad.mul(f2d_quantized, ad.constant(np.repeat((~masked)[:, None], f2d_quantized.shape[1], 1)))]
    if use_geometry:
        sel = masked[pix]
        if sel.any():
            counts = np.bincount(pix[sel], minlength=n_pix)
            s = sp.csr_matrix((1.0 / counts[pix[sel]], (pix[sel], corr[sel, 0])),
                              shape=(n_pix, f3d_quantized.shape[0]))
            parts.append(ad.linear_map(s, f3d_quantized))
            covered[pix[sel]] = True
    fill = (masked & ~covered).astype(np.float64)[:, None]
    parts.append(ad.matmul(ad.constant(fill), mask_token))
    out = parts[0]
    for p in parts[1:]:
        out = ad.add(out, p)
    return out


def init_image_decoder(shared_dim: int, patch: int, rng: np.random.Generator) -> dict[str, Value]:
    return {
        "mim.w": ad.parameter(glorot(rng, 2 * shared_dim, patch * patch * 3), "mim.w"),
        "mim.b": ad.parameter(np.zeros((1, patch * patch * 3)), "mim.b"),
    }


def init_occupancy_decoder(shared_dim: int, rng: np.random.Generator, hidden: int = 32) -> dict[str, Value]:
    return {
        "occ.w1": ad.parameter(glorot(rng, shared_dim + 3, hidden), "occ.w1"),
        "occ.b1": ad.parameter(np.zeros((1, hidden)), "occ.b1"),
        "occ.w2": ad.parameter(glorot(rng, hidden, 1), "occ.w2"),
        "occ.b2": ad.parameter(np.zeros((1, 1)), "occ.b2"),
    }


def patch_pool_matrix(patch_ids: np.ndarray, grid: tuple[int, int], patch: int) -> sp.csr_matrix:
    """Rows average the pixels of each listed patch."""
    gw = grid[1]
    width = gw * patch
    rows, cols = [], []
    for i, pid in enumerate(patch_ids):
        r0, c0 = (pid // gw) * patch, (pid % gw) * patch
        rr, cc = np.meshgrid(np.arange(r0, r0 + patch), np.arange(c0, c0 + patch), indexing="ij")
        cols.extend((rr * width + cc).ravel())
        rows.extend([i] * patch * patch)
    n_pix = grid[0] * grid[1] * patch * patch
    return sp.csr_matrix((np.full(len(rows), 1.0 / patch ** 2), (rows, cols)), shape=(len(patch_ids), n_pix))


def decode_patches(shared: Value, specific: Value, decoder: dict, patch_ids: np.ndarray,
                   grid: tuple[int, int], patch: int) -> Value:
    pooled = ad.linear_map(patch_pool_matrix(patch_ids, grid, patch), ad.hcat([shared, specific]))
    return ad.add_row(pooled @ decoder["mim.w"], decoder["mim.b"])


def mim_loss(shared: Value, specific: Value, decoder: dict, image: np.ndarray,
             plan: MaskPlan, patch: int) -> Value:
    """MSE between decoded and true pixels, averaged over masked patches only."""
    ids = plan.masked_patch_ids
    if len(ids) == 0:
        warnings.warn("empty mask: reconstruction loss is 0")
        return ad.constant(0.0)
    target = patchify(np.asarray(image, dtype=np.float64), patch)[ids]
    pred = decode_patches(shared, specific, decoder, ids, plan.grid, patch)
    return ad.mean(ad.square(ad.sub(pred, ad.constant(target))))


def occupancy_weights(queries: np.ndarray, points: np.ndarray, k: int = 4):
    """Inverse-distance weights over the k nearest points, as a sparse Q x N matrix."""
    q = np.atleast_2d(np.asarray(queries, dtype=np.float64))
    idx, dist = kernels.knn(q, points, k)
    w = 1.0 / (dist + 1e-6)
    w /= w.sum(axis=1, keepdims=True)
    kk = idx.shape[1]
    return sp.csr_matrix((w.ravel(), (np.repeat(np.arange(len(q)), kk), idx.ravel())),
                         shape=(len(q), points.shape[0]))


def occupancy_features(queries: np.ndarray, points: np.ndarray, combined: Value, k: int = 4):
    """Pooled neighbor features and offset from the weighted neighbor centroid."""
    w = occupancy_weights(queries, points, k)
    pooled = ad.linear_map(w, combined)
    offset = np.atleast_2d(queries) - w @ points
    return pooled, offset


def predict_occupancy(pooled: Value, offset: np.ndarray, decoder: dict) -> Value:
    x = ad.hcat([pooled, ad.constant(offset)])
    h = ad.relu(ad.add_row(x @ decoder["occ.w1"], decoder["occ.b1"]))
    return ad.sigmoid(ad.add_row(h @ decoder["occ.w2"], decoder["occ.b2"]))


def occupancy_loss(occupied, predicted: Value) -> Value:
    """Binary cross-entropy, fully negated and averaged over queries."""
    o = np.asarray(occupied, dtype=np.float64).reshape(-1, 1)
    if len(o) == 0:
        raise ValueError("occupancy loss needs at least one query")
    if predicted.shape != o.shape:
        raise ad.ShapeError(f"predictions {predicted.shape} vs labels {o.shape}")
    pos = ad.mul(ad.constant(o), ad.log(predicted))
    neg = ad.mul(ad.constant(1.0 - o), ad.log(ad.sub(1.0, predicted)))
    return ad.mul(ad.total(ad.add(pos, neg)), -1.0 / len(o))
