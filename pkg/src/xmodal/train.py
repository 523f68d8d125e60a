"""Pretraining loop, optimizer, schedule, linear probing and checkpoints."""
from __future__ import annotations

import csv
import dataclasses
import io
import json
import logging
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import codebook as cb
from . import encoders as enc
from . import jsonio
from . import objectives as obj
from . import pretext as pt
from .synthdata import SceneSample, sample_occupancy_queries

log = logging.getLogger(__name__)

SCHEMA_VERSION = "1"
METRIC_COLUMNS = ("step", "epoch", "lr", "nce", "commit", "rec", "occ", "orth", "kl", "total",
                  "joint_usage", "perplexity")


class ConfigError(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    def __init__(self, msg: str, last_row: dict | None):
        super().__init__(msg)
        self.last_row = last_row


def derive_seed(root: int, *counters: int) -> int:
    """Independent stream per (purpose, epoch, scene, ...) counter tuple."""
    ss = np.random.SeedSequence(int(root), spawn_key=tuple(int(c) for c in counters))
    return int(ss.generate_state(1, dtype=np.uint64)[0])


# stream ids for derive_seed
_S_INIT, _S_ORDER, _S_MASK, _S_PAIRS, _S_QUERIES, _S_BOOK, _S_REVIVE = range(7)


@dataclass
class TrainConfig:
    epochs: int = 50
    lr_max: float = 1e-3
    batch_size: int = 4
    mask_ratio: float = 0.5
    n_queries: int = 200
    occ_delta: float = 0.2
    occ_k: int = 4
    tau: float = 0.07
    codebook_size: int = 64
    gamma: float = 0.99
    pairs_max: int = 256
    weights: dict = field(default_factory=lambda: {t: 1.0 for t in obj.TERMS})
    terms: dict = field(default_factory=lambda: {t: True for t in obj.TERMS})
    codebook: bool = True
    geometry: bool = True
    commitment_anchor: str = "3d"
    revive_every: int = 25
    revive_threshold: int = 50
    latent: int = 32
    shared_dim: int = 16
    patch: int = 4
    knn_k: int = 8
    seed: int = 0
    schema_version: str = SCHEMA_VERSION

    def __post_init__(self):
        if set(self.terms) != set(obj.TERMS):
            raise ConfigError(f"terms must cover exactly {obj.TERMS}, got {sorted(self.terms)}")
        if not 0.0 < self.mask_ratio < 1.0:
            raise ConfigError("mask_ratio must lie in (0, 1)")
        for name in ("epochs", "lr_max", "batch_size", "n_queries", "tau", "codebook_size",
                     "pairs_max", "occ_delta"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive")
        if not 0.0 < self.gamma < 1.0:
            raise ConfigError("gamma must lie in (0, 1)")
        if self.terms["commit"] and not self.codebook:
            raise ConfigError("the commitment term needs the codebook enabled")
        if self.commitment_anchor not in ("3d", "per_modality"):
            raise ConfigError(f"unknown commitment_anchor {self.commitment_anchor!r}")
        self.weights = {t: 1.0 for t in obj.TERMS} | dict(self.weights)

    @property
    def encoder(self) -> enc.EncoderConfig:
        return enc.EncoderConfig(self.latent, self.shared_dim, self.patch, self.knn_k)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        version = d.get("schema_version", SCHEMA_VERSION)
        if version != SCHEMA_VERSION:
            raise ConfigError(f"config schema_version {version!r}, expected {SCHEMA_VERSION!r}")
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    def replace(self, **kw) -> "TrainConfig":
        return dataclasses.replace(self, **kw)


# ablation rows: pixel-point contrast, +reconstruction, +codebook, +geometry, +kl slot
ABLATIONS = {
    "pp": dict(terms={"nce": True, "commit": False, "rec": False, "occ": False, "orth": False, "kl": False},
               codebook=False, geometry=False),
    "rec": dict(terms={"nce": True, "commit": False, "rec": True, "occ": True, "orth": True, "kl": False},
                codebook=False, geometry=False),
    "codebook": dict(terms={"nce": True, "commit": True, "rec": True, "occ": True, "orth": True, "kl": False},
                     codebook=True, geometry=False),
    "geo": dict(terms={"nce": True, "commit": True, "rec": True, "occ": True, "orth": True, "kl": False},
                codebook=True, geometry=True),
    "kl": dict(terms={t: True for t in obj.TERMS}, codebook=True, geometry=True),
}


def ablation_config(base: TrainConfig, row: str) -> TrainConfig:
    return base.replace(**ABLATIONS[row])


# --- optimizer and schedule -----------------------------------------------------

@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict[str, ad.Value], state: AdamState, lr: float) -> None:
    """One bias-corrected Adam update from each parameter's ``.grad``."""
    for name, p in params.items():
        if not np.all(np.isfinite(p.grad)):
            raise FloatingPointError(f"non-finite gradient for parameter {name!r}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name, p in params.items():
        g = p.grad
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(g)
            state.v[name] = np.zeros_like(g)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


def one_cycle_lr(step: int, total_steps: int, lr_max: float, warmup: float = 0.3,
                 div_start: float = 25.0, div_end: float = 1e4) -> float:
    """Linear warmup from lr_max/25 to lr_max over 30% of steps, cosine down to lr_max/1e4."""
    if step > total_steps:
        warnings.warn(f"step {step} beyond schedule end {total_steps}; clamped")
        step = total_steps
    lr0, lr_end = lr_max / div_start, lr_max / div_end
    peak = warmup * total_steps
    if step <= peak:
        frac = step / peak if peak > 0 else 1.0
        return lr_max * frac + lr0 * (1.0 - frac)
    frac = (step - peak) / (total_steps - peak)
    return lr_end + (lr_max - lr_end) * 0.5 * (1.0 + math.cos(math.pi * frac))


# --- model --------------------------------------------------------------------

@dataclass
class Model:
    config: TrainConfig
    params: dict[str, ad.Value]
    book: cb.Codebook | None = None
    step: int = 0

    @classmethod
    def init(cls, config: TrainConfig) -> "Model":
        rng = np.random.default_rng(derive_seed(config.seed, _S_INIT))
        ec = config.encoder
        params = enc.init_encoder_params(ec, rng)
        params |= pt.init_image_decoder(ec.shared_dim, ec.patch, rng)
        params |= pt.init_occupancy_decoder(ec.shared_dim, rng)
        return cls(config, params)


@dataclass
class PreparedScene:
    scene: SceneSample
    neighbors: object
    grid: tuple[int, int]
    width: int


def prepare(scene: SceneSample, cfg: TrainConfig) -> PreparedScene:
    h, w = scene.image.shape[:2]
    return PreparedScene(scene, enc.neighborhood(scene.points, cfg.knn_k),
                         (h // cfg.patch, w // cfg.patch), w)


def encode(model: Model, ps: PreparedScene, masked_patches=None) -> tuple[ad.Value, enc.FeatureBundle]:
    ec = model.config.encoder
    point_lat = enc.encode_points(ps.scene.points, model.params, ec, neighbors=ps.neighbors)
    patch_lat = enc.encode_image(ps.scene.image, model.params, ec, masked_patches)
    return point_lat, enc.project_heads(point_lat, patch_lat, model.params, ps.grid, ec.patch)


@dataclass
class SceneOutput:
    terms: dict[str, ad.Value]
    bundle: enc.FeatureBundle
    survivors: np.ndarray
    idx2d: np.ndarray | None = None
    idx3d: np.ndarray | None = None


def scene_forward(model: Model, ps: PreparedScene, seeds: tuple[int, int, int]) -> SceneOutput:
    cfg = model.config
    on = cfg.terms
    scene, p = ps.scene, cfg.patch
    plan = pt.make_mask(ps.grid, cfg.mask_ratio, seeds[0]) if on["rec"] else pt.empty_mask(ps.grid)
    _, fb = encode(model, ps, plan.masked_patch_ids)
    survivors = pt.filter_pairs(scene.correspondences, plan, p)
    pix = survivors[:, 1] * ps.width + survivors[:, 2]
    pts = survivors[:, 0]
    terms: dict[str, ad.Value] = {}
    out = SceneOutput(terms, fb, survivors)

    if on["nce"]:
        pairs = obj.sample_pairs(survivors, fb.f3d_shared, fb.f2d_shared, ps.width, cfg.pairs_max, seeds[1])
        if pairs is not None:
            terms["nce"] = obj.info_nce(pairs[0], pairs[1], cfg.tau)

    if cfg.codebook and model.book is not None:
        q2d, i2d = cb.quantize(fb.f2d_shared, model.book)
        q3d, i3d = cb.quantize(fb.f3d_shared, model.book)
        out.idx2d, out.idx3d = i2d[pix], i3d[pts]
        if on["commit"]:
            terms["commit"] = cb.commitment_loss(ad.rows(fb.f2d_shared, pix), ad.rows(fb.f3d_shared, pts),
                                                 model.book, cfg.commitment_anchor)
    else:
        q2d, q3d = fb.f2d_shared, fb.f3d_shared
    fb.f2d_quantized, fb.f3d_quantized = q2d, q3d

    if on["rec"]:
        filled = pt.substitute_masked_features(q2d, plan, scene.correspondences, q3d,
                                               model.params["mask_token"], p, cfg.geometry)
        terms["rec"] = pt.mim_loss(filled, fb.g2d_specific, model.params, scene.image, plan, p)

    if on["occ"]:
        qs = sample_occupancy_queries(scene, cfg.n_queries, cfg.occ_delta, seeds[2])
        combined = ad.add(q3d, fb.g3d_specific)
        pooled, offset = pt.occupancy_features(qs.positions, scene.points, combined, cfg.occ_k)
        terms["occ"] = pt.occupancy_loss(qs.occupied, pt.predict_occupancy(pooled, offset, model.params))

    if on["orth"]:
        terms["orth"] = obj.orthogonal_loss([(fb.f2d_shared, fb.g2d_specific),
                                             (fb.f3d_shared, fb.g3d_specific)])
    if on["kl"]:
        terms["kl"] = obj.kl_slot(fb.g3d_specific, {"scene_seed": scene.scene_seed})
    return out


def _init_codebook(model: Model, batch: list[PreparedScene]) -> None:
    feats = []
    for ps in batch:
        _, fb = encode(model, ps)
        c = ps.scene.correspondences
        feats.append(fb.f3d_shared.data[c[:, 0]])
        feats.append(fb.f2d_shared.data[c[:, 1] * ps.width + c[:, 2]])
    rng = np.random.default_rng(derive_seed(model.config.seed, _S_BOOK))
    model.book = cb.Codebook.from_features(np.vstack(feats), model.config.codebook_size,
                                           model.config.gamma, rng)


def _usage_from_indices(size: int, idx2d: list, idx3d: list) -> cb.UsageStats:
    tmp = cb.Codebook(np.zeros((size, 1)), 0.5)
    for i in idx2d:
        tmp.record_usage(i, "2d")
    for i in idx3d:
        tmp.record_usage(i, "3d")
    return cb.usage_stats(tmp)


def pretrain(config: TrainConfig, scenes: list[SceneSample], model: Model | None = None,
             on_row=None) -> tuple[Model, list[dict]]:
    """Train all enabled terms; returns the model and one metrics row per step."""
    if not scenes:
        raise ValueError("pretrain needs a non-empty dataset")
    model = model or Model.init(config)
    prepared = [prepare(s, config) for s in scenes]
    n = len(prepared)
    bs = min(config.batch_size, n)
    steps_per_epoch = math.ceil(n / bs)
    total_steps = config.epochs * steps_per_epoch
    params = model.params
    adam = AdamState()
    rows: list[dict] = []
    last_row = None

    for epoch in range(config.epochs):
        order = np.random.default_rng(derive_seed(config.seed, _S_ORDER, epoch)).permutation(n)
        for b in range(steps_per_epoch):
            batch_ids = order[b * bs:(b + 1) * bs]
            batch = [prepared[i] for i in batch_ids]
            if config.codebook and model.book is None:
                _init_codebook(model, batch)
            step = model.step
            lr = one_cycle_lr(step, max(total_steps - 1, 1), config.lr_max)
            for p in params.values():
                p.zero_grad()
            bundles = []
            for j, ps in enumerate(batch):
                seeds = tuple(derive_seed(config.seed, s, step, j) for s in (_S_MASK, _S_PAIRS, _S_QUERIES))
                so = scene_forward(model, ps, seeds)
                bundles.append((so, obj.total_loss(so.terms, config.weights)))
            values = {t: float(np.mean([lb.values[t] for _, lb in bundles])) for t in obj.TERMS + ("total",)}
            row = {"step": step, "epoch": epoch, "lr": lr, **values}
            if model.book is not None:
                st = _usage_from_indices(model.book.size, [so.idx2d for so, _ in bundles],
                                         [so.idx3d for so, _ in bundles])
                row["joint_usage"], row["perplexity"] = st.joint_fraction, st.perplexity
            else:
                row["joint_usage"], row["perplexity"] = 0.0, 0.0
            if not math.isfinite(values["total"]):
                raise TrainingDiverged(f"non-finite total loss at step {step}", last_row)

            root = bundles[0][1].total
            for _, lb in bundles[1:]:
                root = ad.add(root, lb.total)
            root = ad.mul(root, 1.0 / len(bundles))
            if root.requires_grad:
                root.backward()
                adam_step(params, adam, lr)

            if model.book is not None:
                sos = [so for so, _ in bundles]
                f2d = np.vstack([so.bundle.f2d_shared.data[so.survivors[:, 1] * ps.width + so.survivors[:, 2]]
                                 for so, ps in zip(sos, batch)])
                f3d = np.vstack([so.bundle.f3d_shared.data[so.survivors[:, 0]] for so in sos])
                i2d = np.concatenate([so.idx2d for so in sos])
                i3d = np.concatenate([so.idx3d for so in sos])
                model.book.record_usage(i2d, "2d")
                model.book.record_usage(i3d, "3d")
                cb.ema_update(model.book, f2d, i2d, f3d, i3d)
                if config.revive_every and (step + 1) % config.revive_every == 0 and len(f3d):
                    cb.revive_dead_codes(model.book, np.vstack([f2d, f3d]), config.revive_threshold,
                                         derive_seed(config.seed, _S_REVIVE, step))
            model.step += 1
            rows.append(row)
            last_row = row
            if on_row is not None:
                on_row(row)
    return model, rows


# --- evaluation ---------------------------------------------------------------

def point_latents(model: Model, scene: SceneSample) -> np.ndarray:
    ps = prepare(scene, model.config)
    return enc.encode_points(scene.points, model.params, model.config.encoder, ps.neighbors).data


def softmax_regression(x_train, y_train, x_test, n_classes: int, steps: int = 300,
                       lr: float = 0.05) -> np.ndarray:
    """Multinomial logistic regression by full-batch Adam; returns test predictions."""
    mu = x_train.mean(axis=0)
    sd = x_train.std(axis=0) + 1e-8
    xtr = ad.constant((x_train - mu) / sd)
    onehot = ad.constant(np.eye(n_classes)[y_train])
    params = {"w": ad.parameter(np.zeros((x_train.shape[1], n_classes))),
              "b": ad.parameter(np.zeros((1, n_classes)))}
    state = AdamState()
    for _ in range(steps):
        for p in params.values():
            p.zero_grad()
        logits = ad.add_row(xtr @ params["w"], params["b"])
        loss = ad.mul(ad.total(ad.mul(ad.log_softmax_rows(logits), onehot)), -1.0 / len(y_train))
        loss.backward()
        adam_step(params, state, lr)
    logits = ((x_test - mu) / sd) @ params["w"].data + params["b"].data
    return np.argmax(logits, axis=1)


def linear_probe(model: Model, labeled: list[SceneSample], heldout: list[SceneSample],
                 n_classes: int | None = None, steps: int = 300, lr: float = 0.05) -> float:
    """Held-out per-point accuracy of a linear classifier on frozen pre-head latents."""
    xtr = np.vstack([point_latents(model, s) for s in labeled])
    ytr = np.concatenate([s.labels for s in labeled])
    xte = np.vstack([point_latents(model, s) for s in heldout])
    yte = np.concatenate([s.labels for s in heldout])
    return probe_accuracy(xtr, ytr, xte, yte, n_classes, steps, lr)


def probe_accuracy(xtr, ytr, xte, yte, n_classes=None, steps: int = 300, lr: float = 0.05) -> float:
    ytr = np.asarray(ytr, dtype=np.int64)
    if len(np.unique(ytr)) < 2:
        raise ValueError("linear probe needs at least two classes in the training labels")
    k = n_classes or int(max(ytr.max(), np.max(yte)) + 1)
    pred = softmax_regression(np.asarray(xtr), ytr, np.asarray(xte), k, steps, lr)
    return float(np.mean(pred == np.asarray(yte)))


def occupancy_accuracy(model: Model, scenes: list[SceneSample], n_queries: int = 200,
                       seed: int = 12345) -> float:
    """Accuracy of thresholded occupancy predictions (0.5) on freshly sampled queries."""
    cfg = model.config
    correct = total = 0
    for i, s in enumerate(scenes):
        ps = prepare(s, cfg)
        _, fb = encode(model, ps)
        q3d = cb.quantize(fb.f3d_shared, model.book)[0] if (cfg.codebook and model.book) else fb.f3d_shared
        qs = sample_occupancy_queries(s, n_queries, cfg.occ_delta, derive_seed(seed, i))
        pooled, offset = pt.occupancy_features(qs.positions, s.points, ad.add(q3d, fb.g3d_specific), cfg.occ_k)
        pred = pt.predict_occupancy(pooled, offset, model.params).data.ravel() >= 0.5
        correct += int(np.sum(pred == (qs.occupied == 1)))
        total += len(qs)
    return correct / total


def reconstruction_mse(model: Model, scenes: list[SceneSample], seed: int = 777,
                       use_geometry: bool | None = None) -> float:
    """Masked-patch MSE on the given scenes with the model's own fill rule."""
    cfg = model.config
    geo = cfg.geometry if use_geometry is None else use_geometry
    vals = []
    for i, s in enumerate(scenes):
        ps = prepare(s, cfg)
        plan = pt.make_mask(ps.grid, cfg.mask_ratio, derive_seed(seed, i))
        _, fb = encode(model, ps, plan.masked_patch_ids)
        if cfg.codebook and model.book is not None:
            q2d, q3d = cb.quantize(fb.f2d_shared, model.book)[0], cb.quantize(fb.f3d_shared, model.book)[0]
        else:
            q2d, q3d = fb.f2d_shared, fb.f3d_shared
        filled = pt.substitute_masked_features(q2d, plan, s.correspondences, q3d,
                                               model.params["mask_token"], cfg.patch, geo)
        vals.append(pt.mim_loss(filled, fb.g2d_specific, model.params, s.image, plan, cfg.patch).item())
    return float(np.mean(vals))


def evaluate_usage(model: Model, scenes: list[SceneSample]) -> cb.UsageStats:
    """Fresh usage counts over all matched pairs of ``scenes`` (no masking)."""
    if model.book is None:
        raise ValueError("model has no codebook")
    i2d, i3d = [], []
    for s in scenes:
        ps = prepare(s, model.config)
        _, fb = encode(model, ps)
        c = s.correspondences
        i2d.append(cb.nearest(fb.f2d_shared.data[c[:, 1] * ps.width + c[:, 2]], model.book))
        i3d.append(cb.nearest(fb.f3d_shared.data[c[:, 0]], model.book))
    return _usage_from_indices(model.book.size, i2d, i3d)


def orthogonality(model: Model, scenes: list[SceneSample]) -> dict[str, float]:
    """Mean normalized ||F^T G||_F per modality."""
    out = {"2d": [], "3d": []}
    for s in scenes:
        _, fb = encode(model, prepare(s, model.config))
        for key, f, g in (("2d", fb.f2d_shared, fb.g2d_specific), ("3d", fb.f3d_shared, fb.g3d_specific)):
            m = f.shape[0]
            out[key].append(float(np.linalg.norm(f.data.T @ g.data) / m))
    return {k: float(np.mean(v)) for k, v in out.items()}


# --- persistence ----------------------------------------------------------------

def checkpoint_dict(model: Model) -> dict:
    return {
        "schema_version": SCHEMA_VERSION,
        "config": model.config.to_dict(),
        "step": model.step,
        "params": {k: v.data for k, v in model.params.items()},
        "codebook": model.book.state_dict() if model.book is not None else None,
    }


def save_checkpoint(model: Model, path) -> None:
    jsonio.write(path, checkpoint_dict(model))


def load_checkpoint(path) -> Model:
    with open(path, encoding="utf-8") as fh:
        d = json.load(fh)
    if d.get("schema_version") != SCHEMA_VERSION:
        raise ConfigError(f"checkpoint schema_version {d.get('schema_version')!r}")
    model = Model.init(TrainConfig.from_dict(d["config"]))
    for k, v in d["params"].items():
        model.params[k].data = np.asarray(v, dtype=np.float64).reshape(model.params[k].shape)
        model.params[k].grad = np.zeros_like(model.params[k].data)
    if d.get("codebook") is not None:
        model.book = cb.Codebook.from_state(d["codebook"])
    model.step = int(d["step"])
    return model


def metrics_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRIC_COLUMNS)
    for r in rows:
        w.writerow([r[c] if c in ("step", "epoch") else format(r[c], ".17g") for c in METRIC_COLUMNS])
    return buf.getvalue()
