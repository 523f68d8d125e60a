"""Ablation runs shared by the CLI and the acceptance suite."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import train as tr
from .synthdata import SceneConfig, SceneSample, generate_dataset


@dataclass
class RunResult:
    row: str
    seed: int
    probe: float | None
    joint_usage: float | None
    mse: float | None
    occupancy: float | None
    orth_2d: float | None
    orth_3d: float | None
    first_epoch_total: float
    last_epoch_total: float

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Splits:
    train: list[SceneSample]
    labeled: list[SceneSample]
    heldout: list[SceneSample]


def make_splits(scene_config: SceneConfig | None = None, n_train: int = 64, n_labeled: int = 16,
                n_heldout: int = 32, seed: int = 1) -> Splits:
    """Pretraining scenes, a labeled subset of them for the probe, and fresh held-out scenes."""
    cfg = scene_config or SceneConfig()
    train = generate_dataset(cfg, n_train, seed)
    heldout = generate_dataset(cfg, n_heldout, seed + 10_000)
    return Splits(train, train[:n_labeled], heldout)


def _epoch_mean(rows: list[dict], epoch: int) -> float:
    return float(np.mean([r["total"] for r in rows if r["epoch"] == epoch]))


ALL_MEASURES = frozenset({"probe", "usage", "mse", "occupancy", "orth"})


def run(config: tr.TrainConfig, splits: Splits, row: str = "custom", measures=ALL_MEASURES) -> RunResult:
    """Pretrain once and evaluate the requested measures on the held-out scenes."""
    model, rows = tr.pretrain(config, splits.train)
    has_book = model.book is not None
    orth = tr.orthogonality(model, splits.heldout) if "orth" in measures else {"2d": None, "3d": None}
    return RunResult(
        row=row,
        seed=config.seed,
        probe=tr.linear_probe(model, splits.labeled, splits.heldout) if "probe" in measures else None,
        joint_usage=tr.evaluate_usage(model, splits.heldout).joint_fraction
        if has_book and "usage" in measures else None,
        mse=tr.reconstruction_mse(model, splits.heldout) if "mse" in measures else None,
        occupancy=tr.occupancy_accuracy(model, splits.heldout, config.n_queries)
        if config.terms["occ"] and "occupancy" in measures else None,
        orth_2d=orth["2d"],
        orth_3d=orth["3d"],
        first_epoch_total=_epoch_mean(rows, 0),
        last_epoch_total=_epoch_mean(rows, config.epochs - 1),
    )


def ablate(base: tr.TrainConfig, splits: Splits, rows=("pp", "rec", "codebook", "geo"),
           seeds=(0, 1, 2, 3, 4), on_result=None) -> list[RunResult]:
    out = []
    for seed in seeds:
        for row in rows:
            res = run(tr.ablation_config(base, row).replace(seed=seed), splits, row)
            out.append(res)
            if on_result is not None:
                on_result(res)
    return out


def medians(results: list[RunResult], field: str) -> dict[str, float]:
    by_row: dict[str, list[float]] = {}
    for r in results:
        v = getattr(r, field)
        if v is not None:
            by_row.setdefault(r.row, []).append(v)
    return {k: float(np.median(v)) for k, v in by_row.items()}
