"""Toy point and image encoders plus the shared/specific projection heads."""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import scipy.sparse as sp

from . import autodiff as ad
from . import kernels
from .autodiff import Value


@dataclass(frozen=True)
class EncoderConfig:
    latent: int = 32
    shared_dim: int = 16
    patch: int = 4
    knn_k: int = 8


@dataclass
class FeatureBundle:
    f2d_shared: Value  # (H*W) x C, unit rows
    f3d_shared: Value  # N x C, unit rows
    g2d_specific: Value
    g3d_specific: Value
    f2d_quantized: Value | None = None
    f3d_quantized: Value | None = None


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    a = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=(fan_in, fan_out))


def init_encoder_params(cfg: EncoderConfig, rng: np.random.Generator) -> dict[str, Value]:
    L, C, p = cfg.latent, cfg.shared_dim, cfg.patch
    shapes = {
        "point.w1": (3, L), "point.w2": (L, L), "point.edge": (3, L), "point.w3": (3 * L, L),
        "patch.embed": (p * p * 3, L), "patch.mlp": (L, L),
        "head.shared_2d": (L, C), "head.shared_3d": (L, C),
        "head.specific_2d": (L, C), "head.specific_3d": (L, C),
    }
    params = {}
    for name, (fi, fo) in shapes.items():
        params[name] = ad.parameter(glorot(rng, fi, fo), name)
        if name.startswith("head."):
            continue  # heads are bias-free linear maps
        # a small positive bias keeps fully masked regions away from the zero vector
        params[name.replace(".w", ".b") if ".w" in name else name + ".b"] = ad.parameter(np.full((1, fo), 0.01))
    params["mask_token"] = ad.parameter(np.zeros((1, C)), "mask_token")
    for name, v in params.items():
        v.name = name
    return params


def _dense(x: Value, params: dict, name: str, act: bool = True) -> Value:
    y = x @ params[name]
    b = params.get(name.replace(".w", ".b") if ".w" in name else name + ".b")
    if b is not None:
        y = ad.add_row(y, b)
    return ad.relu(y) if act else y


# --- points -------------------------------------------------------------------

def normalize_points(points: np.ndarray) -> np.ndarray:
    """Zero mean, unit max radius."""
    c = points - points.mean(axis=0)
    r = np.sqrt((c * c).sum(axis=1)).max()
    return c / r if r > 0 else c


OFFSET_SCALE = 10.0  # neighbor offsets are ~0.05 in normalized units


@dataclass(frozen=True)
class Neighborhood:
    """k-NN structure of one cloud: pooling matrix and scaled neighbor offsets."""
    mean: sp.csr_matrix  # N x N, rows average the k neighbors (self included)
    edge_mean: sp.csr_matrix  # N x (N*k), rows average that point's edges
    offsets: np.ndarray  # (N*k) x 3


def knn_mean_matrix(points: np.ndarray, k: int) -> sp.csr_matrix:
    return neighborhood(points, k).mean


def neighborhood(points: np.ndarray, k: int) -> Neighborhood:
    pts = np.asarray(points, dtype=np.float64)
    n = pts.shape[0]
    idx, _ = kernels.knn(pts, pts, k)
    kk = idx.shape[1]
    owner = np.repeat(np.arange(n), kk)
    w = np.full(n * kk, 1.0 / kk)
    mean = sp.csr_matrix((w, (owner, idx.ravel())), shape=(n, n))
    edge_mean = sp.csr_matrix((w, (owner, np.arange(n * kk))), shape=(n, n * kk))
    x = normalize_points(pts)
    offsets = OFFSET_SCALE * (x[idx.ravel()] - x[owner])
    return Neighborhood(mean, edge_mean, offsets)


def encode_points(points: np.ndarray, params: dict, cfg: EncoderConfig,
                  neighbors: Neighborhood | None = None) -> Value:
    """Per-point MLP and one k-NN round that pools both the neighbors' features
    and an edge MLP of their offsets; the three parts are re-projected to the latent width."""
    pts = np.asarray(points, dtype=np.float64)
    if pts.shape[0] < 1:
        raise ValueError("encode_points needs at least one point")
    if neighbors is None:
        neighbors = neighborhood(pts, cfg.knn_k)
    x = ad.constant(normalize_points(pts))
    h = _dense(_dense(x, params, "point.w1"), params, "point.w2")
    agg = ad.linear_map(neighbors.mean, h)
    edges = ad.linear_map(neighbors.edge_mean, _dense(ad.constant(neighbors.offsets), params, "point.edge"))
    return _dense(ad.hcat([h, agg, edges]), params, "point.w3")


# --- image --------------------------------------------------------------------

def patchify(image: np.ndarray, p: int) -> np.ndarray:
    h, w, c = image.shape
    if h % p or w % p:
        raise ad.ShapeError(f"image {h}x{w} not divisible by patch size {p}")
    gh, gw = h // p, w // p
    return image.reshape(gh, p, gw, p, c).transpose(0, 2, 1, 3, 4).reshape(gh * gw, p * p * c)


def unpatchify(patches: np.ndarray, grid: tuple[int, int], p: int) -> np.ndarray:
    gh, gw = grid
    return patches.reshape(gh, gw, p, p, -1).transpose(0, 2, 1, 3, 4).reshape(gh * p, gw * p, -1)


@lru_cache(maxsize=32)
def neighbor_mix_matrix(gh: int, gw: int) -> sp.csr_matrix:
    """Half self, half mean of the available 4-neighbors."""
    rows, cols, vals = [], [], []
    for r in range(gh):
        for c in range(gw):
            i = r * gw + c
            nb = [(r + dr) * gw + (c + dc) for dr, dc in ((-1, 0), (1, 0), (0, -1), (0, 1))
                  if 0 <= r + dr < gh and 0 <= c + dc < gw]
            rows.append(i), cols.append(i), vals.append(0.5 if nb else 1.0)
            for j in nb:
                rows.append(i), cols.append(j), vals.append(0.5 / len(nb))
    return sp.csr_matrix((vals, (rows, cols)), shape=(gh * gw, gh * gw))


def encode_image(image: np.ndarray, params: dict, cfg: EncoderConfig,
                 masked_patches=None) -> Value:
    """Patch embed, patch MLP, one 4-neighborhood mixing step.

    Patches listed in ``masked_patches`` are zeroed in the input.
    """
    p = cfg.patch
    patches = patchify(np.asarray(image, dtype=np.float64), p)
    if masked_patches is not None and len(masked_patches):
        patches = patches.copy()
        patches[np.asarray(masked_patches, dtype=np.int64)] = 0.0
    h, w = image.shape[:2]
    emb = _dense(ad.constant(patches), params, "patch.embed", act=False)
    hid = _dense(emb, params, "patch.mlp")
    return ad.linear_map(neighbor_mix_matrix(h // p, w // p), hid)


def _interp_1d(n_in: int, factor: int) -> np.ndarray:
    n_out = n_in * factor
    m = np.zeros((n_out, n_in))
    for o in range(n_out):
        s = min(max((o + 0.5) / factor - 0.5, 0.0), n_in - 1)
        i0 = int(np.floor(s))
        i1 = min(i0 + 1, n_in - 1)
        t = s - i0
        m[o, i0] += 1.0 - t
        m[o, i1] += t
    return m


@lru_cache(maxsize=32)
def upsample_matrix(gh: int, gw: int, factor: int) -> sp.csr_matrix:
    return sp.csr_matrix(np.kron(_interp_1d(gh, factor), _interp_1d(gw, factor)))


def upsample_bilinear(features: Value, grid: tuple[int, int], factor: int, patch: int = 4) -> Value:
    """Bilinear upsampling of a row-major patch grid, align_corners=False."""
    if factor != patch:
        raise ValueError(f"upsample factor {factor} must equal the patch size {patch}")
    gh, gw = grid
    if features.shape[0] != gh * gw:
        raise ad.ShapeError(f"{features.shape[0]} rows do not match grid {grid}")
    return ad.linear_map(upsample_matrix(gh, gw, factor), features)


def project_heads(point_latent: Value, patch_latent: Value, params: dict,
                  grid: tuple[int, int], patch: int) -> FeatureBundle:
    pix = upsample_bilinear(patch_latent, grid, patch, patch)
    return FeatureBundle(
        f2d_shared=ad.l2_normalize_rows(_dense(pix, params, "head.shared_2d", act=False)),
        f3d_shared=ad.l2_normalize_rows(_dense(point_latent, params, "head.shared_3d", act=False)),
        g2d_specific=_dense(pix, params, "head.specific_2d", act=False),
        g3d_specific=_dense(point_latent, params, "head.specific_3d", act=False),
    )
