"""Command-line entry point; every subcommand writes machine-readable output."""
from __future__ import annotations

import argparse
import json
import sys
import warnings

from . import codebook as cb
from . import experiments as ex
from . import gradcheck
from . import infotheory as it
from . import jsonio
from . import synthdata as sd
from . import train as tr


def _read_config(path) -> dict:
    if path is None:
        return {}
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


def _emit(text: str, out) -> None:
    if out:
        with open(out, "w", encoding="utf-8") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


def _train_config(args) -> tr.TrainConfig:
    d = _read_config(args.config)
    if args.seed is not None:
        d["seed"] = args.seed
    return tr.TrainConfig.from_dict(d)


def _dataset(path, n: int, seed: int) -> list[sd.SceneSample]:
    if path:
        return sd.load_dataset(path)
    return sd.generate_dataset(sd.SceneConfig(), n, seed)


def cmd_gen(args) -> int:
    d = _read_config(args.config)
    n = int(d.pop("n_scenes", args.n_scenes))
    cfg = sd.SceneConfig.from_dict(d)
    scenes = sd.generate_dataset(cfg, n, args.seed or 0)
    _emit(sd.dataset_to_text(scenes, cfg), args.out)
    return 0


def cmd_pretrain(args) -> int:
    cfg = _train_config(args)
    scenes = _dataset(args.data, args.n_scenes, cfg.seed)
    model, rows = tr.pretrain(cfg, scenes)
    text = jsonio.dumps(tr.checkpoint_dict(model)) + "\n"
    _emit(text, args.out)
    if args.metrics:
        with open(args.metrics, "w", encoding="utf-8") as fh:
            fh.write(tr.metrics_csv(rows))
    return 0


def cmd_probe(args) -> int:
    model = tr.load_checkpoint(args.checkpoint)
    seed = args.seed or 0
    labeled = _dataset(args.data, 16, seed)
    heldout = _dataset(args.heldout, 32, seed + 10_000)
    acc = tr.linear_probe(model, labeled, heldout)
    _emit(jsonio.dumps({"accuracy": acc, "n_labeled_scenes": len(labeled),
                        "n_heldout_scenes": len(heldout)}) + "\n", args.out)
    return 0


def cmd_verify_theory(args) -> int:
    d = _read_config(args.config)
    rep = it.verification_report(args.seeds, args.seed or 0, int(d.get("max_alphabet", 4)))
    _emit(jsonio.dumps(rep) + "\n", args.out)
    return 0 if rep["passed"] else 1


def cmd_codebook_stats(args) -> int:
    model = tr.load_checkpoint(args.checkpoint)
    if model.book is None:
        print("checkpoint has no codebook", file=sys.stderr)
        return 1
    if args.data:
        stats = tr.evaluate_usage(model, sd.load_dataset(args.data))
    else:
        stats = cb.usage_stats(model.book)
    _emit(stats.to_csv(), args.out)
    return 0


def cmd_gradcheck(args) -> int:
    res = gradcheck.run_suite(args.trials, args.seed or 0)
    lines = ["operation,max_relative_error,passed"]
    lines += [f"{k},{v:.3e},{int(v < gradcheck.TOLERANCE)}" for k, v in res.items()]
    _emit("\n".join(lines) + "\n", args.out)
    return 0 if all(v < gradcheck.TOLERANCE for v in res.values()) else 1


def cmd_ablate(args) -> int:
    base = _train_config(args)
    splits = ex.make_splits(n_train=args.n_scenes, seed=args.data_seed)
    rows = args.rows.split(",")
    unknown = set(rows) - set(tr.ABLATIONS)
    if unknown:
        print(f"unknown ablation rows {sorted(unknown)}", file=sys.stderr)
        return 2
    seeds = range(base.seed, base.seed + args.n_seeds)
    results = ex.ablate(base, splits, rows, seeds)
    report = {
        "rows": rows,
        "seeds": list(seeds),
        "median_probe": ex.medians(results, "probe"),
        "median_joint_usage": ex.medians(results, "joint_usage"),
        "median_mse": ex.medians(results, "mse"),
        "runs": [r.to_dict() for r in results],
    }
    _emit(jsonio.dumps(report) + "\n", args.out)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="xmodal", description="Cross-modal 2D-3D pretraining toolkit.")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, help_):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--config", help="JSON config file")
        sp.add_argument("--seed", type=int, default=None)
        sp.add_argument("--out", help="output file (default: stdout)")
        sp.set_defaults(fn=fn)
        return sp

    g = add("gen", cmd_gen, "synthesize a dataset")
    g.add_argument("--n-scenes", type=int, default=64)
    sp = add("pretrain", cmd_pretrain, "pretrain and write a checkpoint")
    sp.add_argument("--data", help="dataset file (default: 64 generated scenes)")
    sp.add_argument("--n-scenes", type=int, default=64)
    sp.add_argument("--metrics", help="metrics CSV path")
    sp = add("probe", cmd_probe, "linear-probe a checkpoint")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--data", help="labeled dataset")
    sp.add_argument("--heldout", help="held-out dataset")
    sp = add("verify-theory", cmd_verify_theory, "exact information-theory checks")
    sp.add_argument("--seeds", type=int, default=100)
    sp = add("codebook-stats", cmd_codebook_stats, "codebook usage CSV")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--data", help="recount usage over this dataset")
    sp = add("gradcheck", cmd_gradcheck, "finite-difference gradient table")
    sp.add_argument("--trials", type=int, default=10)
    sp = add("ablate", cmd_ablate, "component ablation over several seeds")
    sp.add_argument("--rows", default="pp,rec,codebook,geo,kl")
    sp.add_argument("--n-seeds", type=int, default=5)
    sp.add_argument("--n-scenes", type=int, default=64)
    sp.add_argument("--data-seed", type=int, default=1)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            return args.fn(args)
    except (tr.ConfigError, sd.DatasetFormatError, sd.SchemaVersionError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
