"""Exact entropies and mutual informations over small discrete joints (nats).

A joint is a probability table with named axes. The three-variable tables
used for the verifier name them ``P`` (point-cloud input), ``I`` (image
input) and ``Y`` (task label); a deterministic representation of ``P`` is
added as axis ``F`` by :func:`with_representation`.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

CLAMP = 1e-12
MAX_ALPHABET = 8


@dataclass(frozen=True)
class DiscreteJoint:
    probs: np.ndarray
    names: tuple[str, ...] = ("P", "I", "Y")

    def __post_init__(self):
        p = np.asarray(self.probs, dtype=np.float64)
        object.__setattr__(self, "probs", p)
        if p.ndim != len(self.names):
            raise ValueError(f"{p.ndim}-d table for names {self.names}")
        if np.any(p < 0):
            raise ValueError("probabilities must be non-negative")
        if abs(p.sum() - 1.0) > 1e-12:
            raise ValueError(f"total mass {p.sum()!r} != 1")

    @property
    def sizes(self) -> tuple[int, ...]:
        return self.probs.shape

    def axes(self, subset) -> tuple[int, ...]:
        return tuple(self.names.index(n) for n in subset)

    def marginal(self, subset) -> np.ndarray:
        """Marginal table with axes ordered as in ``subset``."""
        keep = self.axes(subset)
        drop = tuple(i for i in range(len(self.names)) if i not in keep)
        m = self.probs.sum(axis=drop)
        order = sorted(keep)
        return np.transpose(m, [order.index(a) for a in keep])


@dataclass(frozen=True)
class DeterministicMap:
    table: np.ndarray  # value of F for each value of P
    n_values: int

    def __post_init__(self):
        t = np.asarray(self.table, dtype=np.int64)
        object.__setattr__(self, "table", t)
        if np.any(t < 0) or np.any(t >= self.n_values):
            raise ValueError("map values out of range")


def _check_subset(subset) -> tuple[str, ...]:
    s = tuple(subset)
    if not s:
        raise ValueError("empty variable subset")
    return s


def _h(p: np.ndarray) -> float:
    p = p[p > 0]
    val = float(-np.sum(p * np.log(p)))
    return max(val, 0.0) if val > -CLAMP else val


def entropy(joint: DiscreteJoint, subset) -> float:
    return _h(joint.marginal(_check_subset(subset)))


def conditional_entropy(joint: DiscreteJoint, a, given) -> float:
    a, z = _check_subset(a), tuple(given)
    return entropy(joint, a + z) - (entropy(joint, z) if z else 0.0)


def _disjoint(*groups) -> None:
    seen = set()
    for g in groups:
        if seen & set(g):
            raise ValueError(f"variable subsets overlap: {groups}")
        seen |= set(g)


def mutual_info(joint: DiscreteJoint, a, b) -> float:
    """sum p(a,b) log p(a,b) / (p(a) p(b))."""
    a, b = _check_subset(a), _check_subset(b)
    _disjoint(a, b)
    pab = joint.marginal(a + b).reshape(int(np.prod(joint.marginal(a).shape)), -1)
    pa = pab.sum(axis=1, keepdims=True)
    pb = pab.sum(axis=0, keepdims=True)
    nz = pab > 0
    val = float(np.sum(pab[nz] * np.log(pab[nz] / (pa @ pb)[nz])))
    return max(val, 0.0) if val > -CLAMP else val


def conditional_mi(joint: DiscreteJoint, a, b, given) -> float:
    """sum p(a,b,z) log p(a,b,z) p(z) / (p(a,z) p(b,z))."""
    a, b, z = _check_subset(a), _check_subset(b), _check_subset(given)
    _disjoint(a, b, z)
    na = int(np.prod([joint.sizes[i] for i in joint.axes(a)]))
    nb = int(np.prod([joint.sizes[i] for i in joint.axes(b)]))
    pabz = joint.marginal(z + a + b).reshape(-1, na, nb)
    pz = pabz.sum(axis=(1, 2), keepdims=True)
    paz = pabz.sum(axis=2, keepdims=True)
    pbz = pabz.sum(axis=1, keepdims=True)
    nz = pabz > 0
    ratio = (pabz * pz)[nz] / (paz * pbz)[nz]
    val = float(np.sum(pabz[nz] * np.log(ratio)))
    return max(val, 0.0) if val > -CLAMP else val


def bayes_error(joint: DiscreteJoint, predictors, target: str = "Y") -> float:
    """1 - sum_f max_y p(f, y)."""
    f = _check_subset(predictors)
    if target in f:
        raise ValueError("predictor set must exclude the target")
    pfy = joint.marginal(f + (target,)).reshape(-1, joint.sizes[joint.names.index(target)])
    return float(1.0 - pfy.max(axis=1).sum())


def with_representation(joint: DiscreteJoint, fmap: DeterministicMap, source: str = "P",
                        name: str = "F") -> DiscreteJoint:
    """Append axis ``name`` holding ``fmap`` applied to axis ``source``."""
    src = joint.names.index(source)
    if len(fmap.table) != joint.sizes[src]:
        raise ValueError(f"map covers {len(fmap.table)} values, {source} has {joint.sizes[src]}")
    onehot = np.zeros((joint.sizes[src], fmap.n_values))
    onehot[np.arange(joint.sizes[src]), fmap.table] = 1.0
    shape = [1] * joint.probs.ndim + [fmap.n_values]
    shape[src] = joint.sizes[src]
    ext = joint.probs[..., None] * onehot.reshape(shape)
    return DiscreteJoint(ext, joint.names + (name,))


def random_joint(sizes, seed) -> DiscreteJoint:
    sizes = tuple(int(s) for s in sizes)
    if any(s < 1 or s > MAX_ALPHABET for s in sizes):
        raise ValueError(f"alphabet sizes must lie in 1..{MAX_ALPHABET}, got {sizes}")
    rng = np.random.default_rng(seed)
    p = rng.dirichlet(np.ones(int(np.prod(sizes)))).reshape(sizes)
    p /= p.sum()
    return DiscreteJoint(p)


def random_map(n_source: int, n_values: int, seed) -> DeterministicMap:
    rng = np.random.default_rng(seed)
    return DeterministicMap(rng.integers(n_values, size=n_source), n_values)


# --- suboptimality and Bayes-bound checks -----------------------------------------------------------

@dataclass
class SuboptimalityReport:
    chain_rule_residual: float
    coinformation_residual: float
    contrastive_info: float  # I(P,I;Y) - I(P;Y|I) - I(I;Y|P)
    input_info: float  # I(P;Y)
    eps_u: float  # I(P;Y|I)
    image_specific: float  # I(I;Y|P)
    strict_inequality: bool
    assumption_holds: bool

    def passed(self, tol: float = 1e-10, eps: float = 1e-6) -> bool:
        ok = self.chain_rule_residual <= tol and self.coinformation_residual <= tol
        if self.eps_u > eps:
            ok = ok and self.strict_inequality
        return ok

    def to_dict(self) -> dict:
        return asdict(self)


def verify_suboptimality(joint: DiscreteJoint) -> SuboptimalityReport:
    i_joint = mutual_info(joint, ("P", "I"), ("Y",))
    i_py = mutual_info(joint, ("P",), ("Y",))
    i_iy_p = conditional_mi(joint, ("I",), ("Y",), ("P",))
    i_py_i = conditional_mi(joint, ("P",), ("Y",), ("I",))
    i_pi = mutual_info(joint, ("P",), ("I",))
    i_pi_y = conditional_mi(joint, ("P",), ("I",), ("Y",))
    q = i_joint - i_py_i - i_iy_p
    return SuboptimalityReport(
        chain_rule_residual=abs(i_joint - (i_py + i_iy_p)),
        coinformation_residual=abs((i_py - i_py_i) - (i_pi - i_pi_y)),
        contrastive_info=q,
        input_info=i_py,
        eps_u=i_py_i,
        image_specific=i_iy_p,
        strict_inequality=bool(q < i_py - 1e-12),
        assumption_holds=bool(i_py_i > 0),
    )


@dataclass
class BayesBoundReport:
    bayes_error: float
    cond_entropy: float  # H(Y|F)
    fano_lhs: float  # -ln(1 - P_e)
    fano_ok: bool
    decomposition_residual: float
    bound: float | None  # 1 - exp(-H(Y) + I(F;I) + I(F;P|I) - I(F;P|Y))
    bound_ok: bool
    vacuous: bool

    def passed(self, tol: float = 1e-10) -> bool:
        return self.fano_ok and self.decomposition_residual <= tol and self.bound_ok

    def to_dict(self) -> dict:
        return asdict(self)


def verify_bayes_bound(joint: DiscreteJoint, fmap: DeterministicMap) -> BayesBoundReport:
    ext = with_representation(joint, fmap)
    pe = bayes_error(ext, ("F",))
    h_y_f = conditional_entropy(ext, ("Y",), ("F",))
    i_fy = mutual_info(ext, ("F",), ("Y",))
    i_fi = mutual_info(ext, ("F",), ("I",))
    i_fp_i = conditional_mi(ext, ("F",), ("P",), ("I",))
    i_fp_y = conditional_mi(ext, ("F",), ("P",), ("Y",))
    exponent = -entropy(ext, ("Y",)) + i_fi + i_fp_i - i_fp_y
    vacuous = pe >= 1.0
    fano_lhs = math.inf if vacuous else -math.log(1.0 - pe)
    bound = 1.0 - math.exp(exponent)
    return BayesBoundReport(
        bayes_error=pe,
        cond_entropy=h_y_f,
        fano_lhs=fano_lhs,
        fano_ok=bool(vacuous or fano_lhs <= h_y_f + 1e-12),
        decomposition_residual=abs(i_fy - (i_fi + i_fp_i - i_fp_y)),
        bound=bound,
        bound_ok=bool(vacuous or pe <= bound + 1e-12),
        vacuous=bool(vacuous),
    )


def verification_report(n_seeds: int = 100, seed: int = 0, max_alphabet: int = 4) -> dict:
    """Run both checks over seeded random joints; JSON-ready."""
    ss = np.random.SeedSequence(seed)
    t1, t2 = [], []
    for child in ss.spawn(n_seeds):
        s_joint, s_sizes, s_map = (int(x) for x in child.generate_state(3))
        sizes = np.random.default_rng(s_sizes).integers(2, max_alphabet + 1, size=4)
        joint = random_joint(sizes[:3], s_joint)
        fmap = random_map(int(sizes[0]), int(sizes[3]), s_map)
        r1, r2 = verify_suboptimality(joint), verify_bayes_bound(joint, fmap)
        t1.append({"seed": s_joint, "sizes": [int(x) for x in sizes[:3]], "passed": r1.passed(), **r1.to_dict()})
        t2.append({"seed": s_joint, "map_seed": s_map, "map_values": int(sizes[3]),
                   "passed": r2.passed(), **r2.to_dict()})
    return {
        "n_seeds": n_seeds,
        "root_seed": seed,
        "suboptimality": {"passed": all(r["passed"] for r in t1),
                     "max_chain_rule_residual": max(r["chain_rule_residual"] for r in t1),
                     "max_coinformation_residual": max(r["coinformation_residual"] for r in t1),
                     "cases": t1},
        "bayes_bound": {"passed": all(r["passed"] for r in t2),
                     "max_decomposition_residual": max(r["decomposition_residual"] for r in t2),
                     "cases": t2},
        "passed": all(r["passed"] for r in t1) and all(r["passed"] for r in t2),
    }
