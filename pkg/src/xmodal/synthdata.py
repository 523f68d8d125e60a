"""Synthetic paired LiDAR/camera scenes.

A scene is a handful of colored spheres and boxes resting on an (invisible)
ground plane in front of a co-mounted LiDAR and pinhole camera. World frame:
x forward, y left, z up, meters.

Each class has its own shape, size range and base color, so point labels
are recoverable both from image color and from local geometry.
"""
from __future__ import annotations

import dataclasses
import json
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import jsonio, kernels

SCHEMA_VERSION = "1"

# (shape, size ranges, rgb)
CLASS_PALETTE = (
    ("sphere", ((0.35, 0.6),), (0.85, 0.20, 0.15)),
    ("sphere", ((0.9, 1.3),), (0.20, 0.75, 0.25)),
    ("box", ((1.2, 2.0), (1.2, 2.0), (0.6, 1.0)), (0.20, 0.30, 0.85)),
    ("box", ((0.4, 0.7), (0.4, 0.7), (1.8, 2.6)), (0.90, 0.80, 0.20)),
)

# camera axes in world coordinates: x_c right (-y_w), y_c down (-z_w), z_c forward (x_w)
_CAM_ROTATION = np.array([[0.0, -1.0, 0.0], [0.0, 0.0, -1.0], [1.0, 0.0, 0.0]])


class SceneGenerationError(RuntimeError):
    pass


class DatasetFormatError(ValueError):
    pass


class SchemaVersionError(ValueError):
    pass


@dataclass(frozen=True)
class SceneConfig:
    n_primitives: tuple[int, int] = (3, 8)
    n_classes: int = 4
    n_rays: int = 512
    image_size: tuple[int, int] = (32, 32)
    focal: float = 22.0
    lidar_origin: tuple[float, float, float] = (0.0, 0.0, 1.6)
    camera_center: tuple[float, float, float] = (0.0, 0.0, 1.4)
    depth_range: tuple[float, float] = (3.5, 8.0)
    color_jitter: float = 0.08
    color_coupling: float = 1.0  # chance an object wears its class color, else a random palette color
    max_retries: int = 10

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in dataclasses.asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "SceneConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items() if k in known})


@dataclass
class Calibration:
    focal: float
    principal_point: tuple[float, float]  # (u0, v0), pixels
    image_size: tuple[int, int]  # (H, W)
    rotation: np.ndarray  # world -> camera
    translation: np.ndarray

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if not self.focal > 0:
            raise ValueError(f"focal must be positive, got {self.focal}")
        if min(self.image_size) <= 0:
            raise ValueError(f"image size must be positive, got {self.image_size}")
        r = self.rotation
        if not (np.allclose(r @ r.T, np.eye(3), atol=1e-9) and abs(np.linalg.det(r) - 1) <= 1e-9):
            raise ValueError("rotation must be orthonormal with determinant 1")

    @property
    def center(self) -> np.ndarray:
        return -self.rotation.T @ self.translation

    def to_camera(self, points: np.ndarray) -> np.ndarray:
        return points @ self.rotation.T + self.translation


@dataclass
class Primitives:
    spheres: np.ndarray  # S x 4: center, radius
    boxes: np.ndarray  # B x 6: min corner, max corner
    classes: np.ndarray  # S + B, spheres first
    colors: np.ndarray  # (S + B) x 3

    def __len__(self) -> int:
        return len(self.classes)


@dataclass
class SceneSample:
    points: np.ndarray  # N x 3
    image: np.ndarray  # H x W x 3 in [0, 1]
    calib: Calibration
    correspondences: np.ndarray  # M x 3: point index, pixel row, pixel col
    ray_origins: np.ndarray  # N x 3
    ray_dirs: np.ndarray  # N x 3, unit
    ray_hits: np.ndarray  # N
    labels: np.ndarray  # N
    primitives: Primitives
    scene_seed: int

    @property
    def n_points(self) -> int:
        return self.points.shape[0]


@dataclass
class OccupancyQuery:
    position: np.ndarray
    occupied: int
    source_ray: int | None


@dataclass
class QuerySet:
    positions: np.ndarray  # Q x 3
    occupied: np.ndarray  # Q, {0, 1}
    source_ray: np.ndarray  # Q

    def __len__(self) -> int:
        return len(self.occupied)

    def __getitem__(self, i: int) -> OccupancyQuery:
        return OccupancyQuery(self.positions[i], int(self.occupied[i]), int(self.source_ray[i]))


@dataclass
class Projection:
    index: np.ndarray
    row: np.ndarray
    col: np.ndarray
    depth: np.ndarray
    n_excluded: int = field(default=0)


def make_calibration(config: SceneConfig) -> Calibration:
    h, w = config.image_size
    rot = _CAM_ROTATION.copy()
    return Calibration(
        focal=config.focal,
        principal_point=((w - 1) / 2.0, (h - 1) / 2.0),
        image_size=(h, w),
        rotation=rot,
        translation=-rot @ np.asarray(config.camera_center, dtype=np.float64),
    )


def project_points(points, calib: Calibration) -> Projection:
    """Pinhole projection; keeps points in front of the camera and inside the image.

    Pixel (r, c) is centered at continuous coordinates (v, u) = (r, c).
    """
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    cam = calib.to_camera(pts)
    u0, v0 = calib.principal_point
    h, w = calib.image_size
    z = cam[:, 2]
    front = z > 0
    safe_z = np.where(front, z, 1.0)
    u = u0 + calib.focal * cam[:, 0] / safe_z
    v = v0 + calib.focal * cam[:, 1] / safe_z
    inside = front & (u >= -0.5) & (u < w - 0.5) & (v >= -0.5) & (v < h - 0.5)
    idx = np.flatnonzero(inside)
    return Projection(idx, v[idx], u[idx], z[idx], int(len(pts) - len(idx)))


def raycast(origin, direction, primitives: Primitives) -> float | None:
    d = np.asarray(direction, dtype=np.float64)
    if abs(np.linalg.norm(d) - 1.0) > 1e-9:
        raise ValueError(f"direction must be unit norm, got |d| = {np.linalg.norm(d)}")
    dist, _ = kernels.raycast(np.asarray(origin, dtype=np.float64)[None], d[None],
                              primitives.spheres, primitives.boxes)
    return float(dist[0]) if np.isfinite(dist[0]) else None


def _sample_primitives(config: SceneConfig, rng: np.random.Generator) -> Primitives:
    lo, hi = config.n_primitives
    n = int(rng.integers(lo, hi + 1)) if hi >= lo else 0
    spheres, boxes, s_cls, b_cls, s_col, b_col = [], [], [], [], [], []
    near, far = config.depth_range
    for _ in range(n):
        cls = int(rng.integers(config.n_classes))
        shape, sizes, rgb = CLASS_PALETTE[cls % len(CLASS_PALETTE)]
        x = rng.uniform(near, far)
        y = rng.uniform(-0.55 * x, 0.55 * x)
        if rng.uniform() >= config.color_coupling:
            rgb = CLASS_PALETTE[int(rng.integers(len(CLASS_PALETTE)))][2]
        color = np.clip(np.asarray(rgb) + rng.uniform(-config.color_jitter, config.color_jitter, 3), 0, 1)
        if shape == "sphere":
            r = rng.uniform(*sizes[0])
            spheres.append([x, y, r, r])
            s_cls.append(cls)
            s_col.append(color)
        else:
            dx, dy, dz = (rng.uniform(*s) for s in sizes)
            boxes.append([x - dx / 2, y - dy / 2, 0.0, x + dx / 2, y + dy / 2, dz])
            b_cls.append(cls)
            b_col.append(color)
    return Primitives(
        spheres=np.asarray(spheres, dtype=np.float64).reshape(-1, 4),
        boxes=np.asarray(boxes, dtype=np.float64).reshape(-1, 6),
        classes=np.asarray(s_cls + b_cls, dtype=np.int64),
        colors=np.asarray(s_col + b_col, dtype=np.float64).reshape(-1, 3),
    )


def _normals(hit: np.ndarray, prim: np.ndarray, p: Primitives) -> np.ndarray:
    out = np.zeros_like(hit)
    ns = len(p.spheres)
    for j in np.unique(prim[prim >= 0]):
        sel = prim == j
        if j < ns:
            c, r = p.spheres[j, :3], p.spheres[j, 3]
            out[sel] = (hit[sel] - c) / r
        else:
            b = p.boxes[j - ns]
            center, half = (b[:3] + b[3:]) / 2, (b[3:] - b[:3]) / 2
            rel = (hit[sel] - center) / half
            axis = np.argmax(np.abs(rel), axis=1)
            out[sel, axis] = np.sign(rel[np.arange(len(axis)), axis])
    return out


def _render(calib: Calibration, p: Primitives) -> np.ndarray:
    h, w = calib.image_size
    u0, v0 = calib.principal_point
    rr, cc = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    d_cam = np.stack([(cc - u0) / calib.focal, (rr - v0) / calib.focal, np.ones_like(rr, dtype=float)], -1)
    d_cam = d_cam.reshape(-1, 3)
    d_world = d_cam @ calib.rotation
    d_world /= np.linalg.norm(d_world, axis=1, keepdims=True)
    origin = np.broadcast_to(calib.center, d_world.shape)
    dist, prim = kernels.raycast(origin, d_world, p.spheres, p.boxes)
    hit = np.isfinite(dist)
    img = np.empty((h * w, 3))
    sky = np.array([0.55, 0.62, 0.72]) * (0.85 + 0.15 * rr.reshape(-1, 1) / h)
    ground = np.array([0.36, 0.34, 0.31])
    img[:] = np.where(d_world[:, 2:3] < 0, ground, sky)
    if hit.any():
        pts = origin[hit] + dist[hit, None] * d_world[hit]
        n = _normals(pts, prim[hit], p)
        shade = 0.35 + 0.65 * np.clip(-(n * d_world[hit]).sum(1), 0, 1)
        img[hit] = p.colors[prim[hit]] * shade[:, None]
    return np.clip(img, 0.0, 1.0).reshape(h, w, 3)


def _cast_lidar(config: SceneConfig, p: Primitives, rng: np.random.Generator):
    origin = np.asarray(config.lidar_origin, dtype=np.float64)
    need = config.n_rays
    dirs_out, hits_out, prim_out = [], [], []
    got = 0
    for _ in range(20):
        m = 2 * need
        j = rng.integers(len(p), size=m)
        lo = np.empty((m, 3))
        hi = np.empty((m, 3))
        ns = len(p.spheres)
        for i, jj in enumerate(j):
            if jj < ns:
                c, r = p.spheres[jj, :3], p.spheres[jj, 3]
                lo[i], hi[i] = c - r, c + r
            else:
                lo[i], hi[i] = p.boxes[jj - ns, :3], p.boxes[jj - ns, 3:]
        target = lo + rng.random((m, 3)) * (hi - lo)
        d = target - origin
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        dist, prim = kernels.raycast(np.broadcast_to(origin, d.shape), d, p.spheres, p.boxes)
        ok = np.flatnonzero(np.isfinite(dist))[: need - got]
        dirs_out.append(d[ok])
        hits_out.append(dist[ok])
        prim_out.append(prim[ok])
        got += len(ok)
        if got >= need:
            break
    return origin, np.vstack(dirs_out), np.concatenate(hits_out), np.concatenate(prim_out)


def _visible(points: np.ndarray, calib: Calibration, p: Primitives) -> np.ndarray:
    c = calib.center
    d = points - c
    dist = np.linalg.norm(d, axis=1)
    d = d / dist[:, None]
    hit, _ = kernels.raycast(np.broadcast_to(c, d.shape), d, p.spheres, p.boxes)
    return hit >= dist - 1e-6 * np.maximum(1.0, dist)


def _try_scene(config: SceneConfig, rng: np.random.Generator, seed: int) -> SceneSample | None:
    prims = _sample_primitives(config, rng)
    if len(prims) == 0:
        return None
    origin, dirs, hits, prim = _cast_lidar(config, prims, rng)
    if len(hits) < config.n_rays:
        return None
    points = origin + hits[:, None] * dirs
    calib = make_calibration(config)
    proj = project_points(points, calib)
    keep = _visible(points[proj.index], calib, prims)
    idx = proj.index[keep]
    if len(idx) < 2:
        return None
    corr = np.stack([idx, np.rint(proj.row[keep]), np.rint(proj.col[keep])], axis=1).astype(np.int64)
    return SceneSample(
        points=points,
        image=_render(calib, prims),
        calib=calib,
        correspondences=corr,
        ray_origins=np.broadcast_to(origin, points.shape).copy(),
        ray_dirs=dirs,
        ray_hits=hits,
        labels=prims.classes[prim],
        primitives=prims,
        scene_seed=int(seed),
    )


def generate_scene(config: SceneConfig, seed: int) -> SceneSample:
    rng = np.random.default_rng(seed)
    for _ in range(config.max_retries):
        scene = _try_scene(config, rng, seed)
        if scene is not None:
            return scene
    raise SceneGenerationError(f"seed {seed}: no visible primitives after {config.max_retries} layouts")


def generate_dataset(config: SceneConfig, n_scenes: int, seed: int) -> list[SceneSample]:
    seeds = np.random.SeedSequence(seed).generate_state(n_scenes, dtype=np.uint64)
    return [generate_scene(config, int(s)) for s in seeds]


def classify_depth(d, hit, delta: float):
    """1 inside the surface band, 0 in visible free space, -1 beyond (unobserved)."""
    d = np.asarray(d, dtype=np.float64)
    half = delta / 2.0
    return np.where(np.abs(d - hit) <= half, 1, np.where(d < hit - half, 0, -1))


def sample_occupancy_queries(sample: SceneSample, n_queries: int, delta: float = 0.2,
                             seed: int = 0, max_rounds: int = 50) -> QuerySet:
    if n_queries <= 0 or delta <= 0:
        raise ValueError("n_queries and delta must be positive")
    rng = np.random.default_rng(seed)
    quota = {1: n_queries // 2, 0: n_queries - n_queries // 2}
    picked: dict[int, list] = {0: [], 1: []}
    n_rays = len(sample.ray_hits)
    for _ in range(max_rounds):
        m = 8 * n_queries
        ray = rng.integers(n_rays, size=m)
        d = rng.random(m) * (sample.ray_hits[ray] + delta)
        lab = classify_depth(d, sample.ray_hits[ray], delta)
        for label in (0, 1):
            room = quota[label] - sum(len(a[0]) for a in picked[label])
            if room > 0:
                sel = np.flatnonzero(lab == label)[:room]
                picked[label].append((ray[sel], d[sel]))
        if all(sum(len(a[0]) for a in picked[k]) >= quota[k] for k in (0, 1)):
            break
    ray = np.concatenate([a[0] for k in (0, 1) for a in picked[k]]).astype(np.int64)
    d = np.concatenate([a[1] for k in (0, 1) for a in picked[k]])
    occ = np.concatenate([np.full(sum(len(a[0]) for a in picked[k]), k) for k in (0, 1)]).astype(np.int64)
    if len(occ) < n_queries:
        warnings.warn(f"occupancy queries unbalanced: {occ.sum()} occupied of {len(occ)}")
        # top up with whatever the sampler yields
        while len(occ) < n_queries:
            r = rng.integers(n_rays, size=n_queries)
            dd = rng.random(n_queries) * (sample.ray_hits[r] + delta)
            lab = classify_depth(dd, sample.ray_hits[r], delta)
            ok = np.flatnonzero(lab >= 0)[: n_queries - len(occ)]
            ray, d, occ = np.concatenate([ray, r[ok]]), np.concatenate([d, dd[ok]]), np.concatenate([occ, lab[ok]])
    order = rng.permutation(len(occ))
    ray, d, occ = ray[order], d[order], occ[order]
    pos = sample.ray_origins[ray] + d[:, None] * sample.ray_dirs[ray]
    return QuerySet(pos, occ, ray)


# --- serialization -----------------------------------------------------------

def _scene_to_dict(s: SceneSample) -> dict:
    c = s.calib
    return {
        "scene_seed": s.scene_seed,
        "points": s.points,
        "image": s.image,
        "calib": {
            "focal": c.focal,
            "principal_point": list(c.principal_point),
            "image_size": list(c.image_size),
            "rotation": c.rotation,
            "translation": c.translation,
        },
        "correspondences": s.correspondences,
        "ray_origins": s.ray_origins,
        "ray_dirs": s.ray_dirs,
        "ray_hits": s.ray_hits,
        "labels": s.labels,
        "primitives": {
            "spheres": s.primitives.spheres,
            "boxes": s.primitives.boxes,
            "classes": s.primitives.classes,
            "colors": s.primitives.colors,
        },
    }


def _f(x, shape=None):
    a = np.asarray(x, dtype=np.float64)
    return a.reshape(shape) if shape is not None else a


def _scene_from_dict(d: dict) -> SceneSample:
    c = d["calib"]
    p = d["primitives"]
    return SceneSample(
        points=_f(d["points"], (-1, 3)),
        image=_f(d["image"]),
        calib=Calibration(float(c["focal"]), tuple(c["principal_point"]), tuple(c["image_size"]),
                          _f(c["rotation"]), _f(c["translation"])),
        correspondences=np.asarray(d["correspondences"], dtype=np.int64).reshape(-1, 3),
        ray_origins=_f(d["ray_origins"], (-1, 3)),
        ray_dirs=_f(d["ray_dirs"], (-1, 3)),
        ray_hits=_f(d["ray_hits"]),
        labels=np.asarray(d["labels"], dtype=np.int64),
        primitives=Primitives(_f(p["spheres"], (-1, 4)), _f(p["boxes"], (-1, 6)),
                              np.asarray(p["classes"], dtype=np.int64), _f(p["colors"], (-1, 3))),
        scene_seed=int(d["scene_seed"]),
    )


def dataset_to_text(samples, config: SceneConfig | None = None) -> str:
    record = {
        "schema_version": SCHEMA_VERSION,
        "config": config.to_dict() if config is not None else {},
        "scenes": [_scene_to_dict(s) for s in samples],
    }
    return jsonio.dumps(record) + "\n"


def serialize_dataset(samples, path, config: SceneConfig | None = None) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(dataset_to_text(samples, config))


def parse_dataset(text: str) -> tuple[list[SceneSample], dict]:
    try:
        record = json.loads(text)
    except json.JSONDecodeError as e:
        offset = len(text[: e.pos].encode("utf-8"))
        raise DatasetFormatError(f"malformed dataset at byte offset {offset}: {e.msg}") from None
    if not isinstance(record, dict) or "schema_version" not in record:
        raise DatasetFormatError("dataset record lacks schema_version")
    if record["schema_version"] != SCHEMA_VERSION:
        raise SchemaVersionError(
            f"dataset schema_version {record['schema_version']!r}, reader supports {SCHEMA_VERSION!r}")
    scenes = []
    for i, s in enumerate(record.get("scenes", [])):
        try:
            scenes.append(_scene_from_dict(s))
        except (KeyError, TypeError, ValueError) as e:
            raise DatasetFormatError(f"scene record {i}: {e!r}") from None
    return scenes, record.get("config", {})


def load_dataset(path) -> list[SceneSample]:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_dataset(fh.read())[0]
