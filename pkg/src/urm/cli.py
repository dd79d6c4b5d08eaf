"""Command-line entry point: ``urm <command> [flags]``.

Exit codes: 0 success, 1 operational failure, 2 usage or configuration error.
Progress goes to stderr; reports go to ``--out`` or stdout.
"""

import argparse
import json
import logging
import sys
from pathlib import Path

from . import dataset as ds
from .evaluation import ALPHAS, EvalReport, ablation_grid, ablation_suite, evaluate
from .prompts import MissingPromptError, PromptCache, PromptError
from .teacher import TeacherUnavailable
from .training import ConfigMismatch, TrainConfig, TrainingError, load_checkpoint, synthetic_prompt_sets, train

log = logging.getLogger("urm")

SPLITS = ("A-train", "A-val", "A-test", "B-test")
DATA_KEYS = ("n_train", "n_val", "n_test", "image_size")


class UsageError(Exception):
    pass


def read_config(path):
    """Split a JSON config file into TrainConfig fields and a ``data`` section."""
    if path is None:
        return {}, {}
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from exc
    data = doc.pop("data", {})
    unknown = set(data) - set(DATA_KEYS)
    if unknown:
        raise UsageError(f"unknown data keys: {sorted(unknown)}")
    return doc, data


def effective_config(args):
    """flag > config file > built-in defaults."""
    train_kw, data_kw = read_config(args.config)
    for flag, key in (("seed", "seed"), ("mode", "mode"), ("teacher", "teacher"), ("alpha", "alpha")):
        value = getattr(args, flag, None)
        if value is not None:
            train_kw[key] = value
    try:
        cfg = TrainConfig.from_json(train_kw)
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from exc
    data = {k: data_kw[k] for k in DATA_KEYS if k in data_kw}
    print(json.dumps({"train": cfg.to_json(), "data": data}, indent=1, sort_keys=True), file=sys.stderr)
    return cfg, data


def load_splits(args, cfg, data, names):
    """Splits come from manifests under ``--data`` when given, else are generated from the seed."""
    if getattr(args, "data", None):
        out = {}
        for n in names:
            path = Path(args.data) / f"{n}.json"
            if path.exists():
                out[n] = ds.read_manifest(path)
        return out
    bench = ds.make_benchmark(seed=cfg.seed, **data)
    return {n: bench[n] for n in names if n in bench}


def emit(payload, out):
    text = payload if isinstance(payload, str) else json.dumps(payload, indent=1, sort_keys=True)
    if out:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        Path(out).write_text(text + "\n")
    else:
        print(text)


# ---------------------------------------------------------------------------
# commands


def cmd_make_synthetic(args):
    cfg, data = effective_config(args)
    if not args.out:
        raise UsageError("make-synthetic needs --out DIR")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for name, split in ds.make_benchmark(seed=cfg.seed, **data).items():
        ds.write_manifest(split, out / f"{name}.json")
        log.info("wrote %s (%d images)", out / f"{name}.json", len(split))
    return 0


def cmd_build_prompts(args):
    effective_config(args)
    cache = PromptCache()  # path from the environment, if set
    sets = synthetic_prompt_sets(ds.all_categories(), cache)
    emit({name: list(ps.prompts) for name, ps in sorted(sets.items())}, args.out)
    return 0


def cmd_train(args):
    cfg, data = effective_config(args)
    if not args.out:
        raise UsageError("train needs --out DIR")
    splits = load_splits(args, cfg, data, ("A-train", "A-val"))
    if "A-train" not in splits:
        raise UsageError("no A-train split found")
    best = train(splits["A-train"], cfg, args.out, val_split=splits.get("A-val"), resume=args.checkpoint)
    log.info("best checkpoint: %s", best)
    print(best)
    return 0


def cmd_evaluate(args):
    if not args.checkpoint:
        raise UsageError("evaluate needs --checkpoint")
    cfg, data = effective_config(args)
    ckpt_cfg = TrainConfig.from_json(load_checkpoint(args.checkpoint)["config"])
    names = [args.split] if args.split else ["A-test", "B-test"]
    unknown = set(names) - set(SPLITS)
    if unknown:
        raise UsageError(f"unknown split {sorted(unknown)}; choose from {SPLITS}")
    splits = load_splits(args, cfg, data, names)
    rows = [evaluate(args.checkpoint, splits[n], mode=args.mode) for n in names if n in splits]
    if not rows:
        raise UsageError(f"split {names} not available")
    report = EvalReport(rows, ckpt_cfg.hash(), str(args.checkpoint))
    emit(report.to_json(), args.out)
    print(report.table(), file=sys.stderr)
    return 0


def criteria(report):
    """Directional desk-scale checks on the cross-domain split."""
    mae = {r.run: r for r in report.rows if r.split_name == "B-test" and not r.failed}
    try:
        base, full = mae["baseline (no KD)"], mae["alpha=0.9"]
        lo, hi = mae["alpha=0"], mae["alpha=1"]
    except KeyError:
        return {"generalization": False, "alpha_endpoints": False}
    pooled = ((full.mae_sd**2 + lo.mae_sd**2 + hi.mae_sd**2) / 3) ** 0.5
    return {
        "generalization": full.mae <= 0.9 * base.mae,
        "alpha_endpoints": full.mae <= lo.mae + pooled and full.mae <= hi.mae + pooled,
    }


def cmd_ablate(args):
    cfg, data = effective_config(args)
    if not args.out:
        raise UsageError("ablate needs --out DIR")
    seeds = args.seeds if args.seeds else [cfg.seed]
    grid = ablation_grid()
    if args.grid == "core":
        keep = {"baseline (no KD)", "alpha=0", "alpha=0.9", "alpha=1"}
        grid = {k: v for k, v in grid.items() if k in keep}
    bench = lambda s: ds.make_benchmark(seed=s, **data)
    report, raw = ablation_suite(cfg, bench, seeds, args.out, grid)
    checks = criteria(report)
    report.meta.update({"alphas": list(ALPHAS), "checks": checks})
    report.write(Path(args.out) / "report.json")
    (Path(args.out) / "report.txt").write_text(report.table() + "\n")
    print(report.table())
    if args.check and not all(checks.values()):
        log.error("threshold check failed: %s", checks)
        return 1
    return 0


def cmd_inspect(args):
    if not args.checkpoint:
        raise UsageError("inspect-checkpoint needs --checkpoint")
    effective_config(args)
    state = load_checkpoint(args.checkpoint)
    emit({k: state[k] for k in ("format_version", "config_hash", "config", "epoch", "best_mae")}, args.out)
    return 0


COMMANDS = {
    "make-synthetic": cmd_make_synthetic,
    "build-prompts": cmd_build_prompts,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "ablate": cmd_ablate,
    "inspect-checkpoint": cmd_inspect,
}


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config: TrainConfig fields plus an optional data section")
    common.add_argument("--seed", type=int)
    common.add_argument("--mode", choices=("few-shot", "zero-shot"))
    common.add_argument("--teacher", choices=("toy", "real"))
    common.add_argument("--checkpoint")
    common.add_argument("--split")
    common.add_argument("--out")
    common.add_argument("--alpha", type=float)
    common.add_argument("--data", help="directory of split manifests written by make-synthetic")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="urm", description="Few-shot counting with distilled prototypes.")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        s = sub.add_parser(name, parents=[common])
        if name == "ablate":
            s.add_argument("--seeds", type=int, nargs="+")
            s.add_argument("--grid", choices=("full", "core"), default="full")
            s.add_argument("--check", action="store_true", help="exit 1 when the directional checks fail")
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else 0
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except MissingPromptError as exc:
        print(f"urm: failed: {exc}", file=sys.stderr)
        return 1
    except (UsageError, ConfigMismatch, ds.ConfigError, PromptError) as exc:
        print(f"urm: error: {exc}", file=sys.stderr)
        return 2
    except (TrainingError, TeacherUnavailable, ds.AnnotationError, ds.ImageLoadError, OSError) as exc:
        print(f"urm: failed: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
