"""Central finite-difference checks for every differentiable operation."""
from __future__ import annotations

from typing import Callable

import numpy as np

from . import autodiff as ad
from . import codebook as cb
from . import encoders as enc
from . import objectives as obj
from . import pretext as pt

TOLERANCE = 1e-5


def numeric_grad(f: Callable[[], float], x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central differences of ``f`` w.r.t. the array ``x`` (perturbed in place)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        fp = f()
        x[i] = old - h
        fm = f()
        x[i] = old
        g[i] = (fp - fm) / (2.0 * h)
    return g


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """max |a - n| scaled by the larger of the two gradients' max magnitude."""
    scale = max(np.max(np.abs(analytic)), np.max(np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric)) / scale)


def check(build: Callable[..., ad.Value], inputs: list[np.ndarray], h: float = 1e-5) -> float:
    """Max relative error over all ``inputs`` of the scalar ``build(*params)``."""
    params = [ad.parameter(x.copy()) for x in inputs]
    out = build(*params)
    out.backward()
    worst = 0.0
    for p in params:
        def f():
            return build(*[ad.constant(q.data) for q in params]).item()
        num = numeric_grad(f, p.data, h)
        worst = max(worst, relative_error(p.grad, num))
    return worst


def _scalarize(rng, shape):
    """Fixed random weights so every output entry matters."""
    w = rng.standard_normal(shape)
    return lambda v: ad.total(ad.mul(v, ad.constant(w)))


def _case_matmul(rng):
    s = _scalarize(rng, (3, 2))
    return (lambda a, b: s(ad.matmul(a, b))), [rng.standard_normal((3, 4)), rng.standard_normal((4, 2))]


def _unary(op, lo=-2.0, hi=2.0, avoid_zero=False):
    def case(rng):
        s = _scalarize(rng, (3, 4))
        x = rng.uniform(lo, hi, (3, 4))
        if avoid_zero:
            x = np.where(np.abs(x) < 0.1, x + np.sign(x + 1e-300) * 0.2, x)
        return (lambda a: s(ad.elementwise(op, a))), [x]
    return case


def _binary(op):
    def case(rng):
        s = _scalarize(rng, (3, 4))
        return (lambda a, b: s(ad.elementwise(op, a, b))), [rng.standard_normal((3, 4)),
                                                             rng.standard_normal((3, 4))]
    return case


def _case_scalar_broadcast(rng):
    s = _scalarize(rng, (3, 4))
    return (lambda a, c: s(ad.mul(ad.add(a, c), c))), [rng.standard_normal((3, 4)), rng.standard_normal((1, 1))]


def _case_softmax(rng):
    s = _scalarize(rng, (4, 5))
    return (lambda a: s(ad.softmax_rows(a))), [rng.standard_normal((4, 5))]


def _case_log_softmax(rng):
    s = _scalarize(rng, (4, 5))
    return (lambda a: s(ad.log_softmax_rows(a))), [rng.standard_normal((4, 5))]


def _case_l2(rng):
    s = _scalarize(rng, (4, 3))
    return (lambda a: s(ad.l2_normalize_rows(a))), [rng.standard_normal((4, 3)) + 0.5]


def _case_structural(rng):
    s = _scalarize(rng, (5, 3))
    idx = np.array([0, 2, 2, 1, 3])

    def build(a, b, bias):
        x = ad.hcat([a, ad.transpose(b)])  # 4 x 3
        x = ad.add_row(x, bias)
        return s(ad.rows(x, idx)) + ad.total(ad.row_sum(ad.square(x)))
    return build, [rng.standard_normal((4, 2)), rng.standard_normal((1, 4)), rng.standard_normal((1, 3))]


def _case_upsample(rng):
    grid = (2, 3)
    s = _scalarize(rng, (grid[0] * 4 * grid[1] * 4, 2))
    return (lambda f: s(enc.upsample_bilinear(f, grid, 4, 4))), [rng.standard_normal((6, 2))]


def _case_info_nce(rng):
    def build(a, b):
        return obj.info_nce(ad.l2_normalize_rows(a), ad.l2_normalize_rows(b), 0.5)
    return build, [rng.standard_normal((5, 4)), rng.standard_normal((5, 4))]


def _case_commitment(rng):
    book = cb.Codebook(rng.standard_normal((6, 3)), 0.9)

    def build(a, b):
        return cb.commitment_loss(a, b, book, "3d")
    return build, [rng.standard_normal((4, 3)), rng.standard_normal((4, 3))]


def _case_mim(rng):
    grid, p = (2, 2), 4
    image = rng.uniform(0, 1, (8, 8, 3))
    plan = pt.MaskPlan(np.array([0, 3]), 0.5, 0, grid)

    def build(shared, specific, w, b):
        return pt.mim_loss(shared, specific, {"mim.w": w, "mim.b": b}, image, plan, p)
    return build, [rng.standard_normal((64, 2)), rng.standard_normal((64, 2)),
                   0.3 * rng.standard_normal((4, 48)), rng.standard_normal((1, 48))]


def _case_occupancy(rng):
    points = rng.uniform(-1, 1, (12, 3))
    queries = rng.uniform(-1, 1, (6, 3))
    occupied = rng.integers(0, 2, size=6)

    def build(feats, w1, b1, w2, b2):
        pooled, offset = pt.occupancy_features(queries, points, feats, 4)
        dec = {"occ.w1": w1, "occ.b1": b1, "occ.w2": w2, "occ.b2": b2}
        return pt.occupancy_loss(occupied, pt.predict_occupancy(pooled, offset, dec))
    return build, [rng.standard_normal((12, 2)), rng.standard_normal((5, 4)), rng.uniform(0.2, 1, (1, 4)),
                   rng.standard_normal((4, 1)), rng.standard_normal((1, 1))]


def _case_orthogonal(rng):
    return (lambda f1, g1, f2, g2: obj.orthogonal_loss([(f1, g1), (f2, g2)])), \
        [rng.standard_normal((5, 3)), rng.standard_normal((5, 3)),
         rng.standard_normal((4, 3)), rng.standard_normal((4, 3))]


def _case_total(rng):
    w = {t: float(x) for t, x in zip(obj.TERMS, rng.uniform(0.5, 2.0, len(obj.TERMS)))}

    def build(a, b):
        terms = {"nce": ad.total(ad.square(a)), "rec": ad.mean(ad.exp(b)),
                 "orth": ad.total(ad.mul(a, b))}
        return obj.total_loss(terms, w).total
    return build, [rng.standard_normal((3, 3)), rng.standard_normal((3, 3))]


CASES: dict[str, Callable] = {
    "matmul": _case_matmul,
    "add": _binary("add"),
    "sub": _binary("sub"),
    "mul": _binary("mul"),
    "scalar_broadcast": _case_scalar_broadcast,
    "exp": _unary("exp"),
    "log": _unary("log", 0.1, 3.0),
    "relu": _unary("relu", avoid_zero=True),
    "sigmoid": _unary("sigmoid", -4.0, 4.0),
    "square": _unary("square"),
    "softmax_rows": _case_softmax,
    "log_softmax_rows": _case_log_softmax,
    "l2_normalize_rows": _case_l2,
    "structural": _case_structural,
    "upsample_bilinear": _case_upsample,
    "info_nce": _case_info_nce,
    "commitment": _case_commitment,
    "mim": _case_mim,
    "occupancy_bce": _case_occupancy,
    "orthogonal": _case_orthogonal,
    "total": _case_total,
}


def run_suite(n_trials: int = 10, seed: int = 0, names=None) -> dict[str, float]:
    """Worst relative error per operation over ``n_trials`` random inputs."""
    out = {}
    for k, name in enumerate(names or CASES):
        worst = 0.0
        for t in range(n_trials):
            rng = np.random.default_rng([seed, k, t])
            build, inputs = CASES[name](rng)
            worst = max(worst, check(build, inputs))
        out[name] = worst
    return out
