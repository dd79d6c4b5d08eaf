"""In-domain / cross-domain evaluation and the desk-scale ablation grid."""

import json
import logging
import math
import statistics
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import torch

from .losses import mae_rmse
from .training import model_from_checkpoint, predict_counts, train

log = logging.getLogger(__name__)

ALPHAS = (0.0, 0.25, 0.5, 0.75, 0.9, 1.0)
VISION_ROWS = {"class-token": "[CLS]-token analog", "global-pool": "global pooling", "mask-pool": "mask pooling"}


@dataclass
class EvalRow:
    split_name: str
    domain_tag: str
    mode: str
    mae: float
    rmse: float
    n_images: int
    run: str = ""
    mae_sd: float | None = None
    rmse_sd: float | None = None
    n_seeds: int = 1
    failed: bool = False


@dataclass
class EvalReport:
    rows: list[EvalRow]
    config_hash: str = ""
    checkpoint_id: str = ""
    meta: dict = field(default_factory=dict)

    def to_json(self):
        return {"config_hash": self.config_hash, "checkpoint_id": self.checkpoint_id, "meta": self.meta,
                "rows": [asdict(r) for r in self.rows]}

    def write(self, path):
        Path(path).write_text(json.dumps(self.to_json(), indent=1, sort_keys=True))

    def table(self):
        head = ("run", "split", "domain", "mode", "MAE", "RMSE", "n")
        lines = []
        for r in self.rows:
            if r.failed:
                mae = rmse = "failed"
            elif r.mae_sd is not None:
                mae, rmse = f"{r.mae:.3f}±{r.mae_sd:.3f}", f"{r.rmse:.3f}±{r.rmse_sd:.3f}"
            else:
                mae, rmse = f"{r.mae:.3f}", f"{r.rmse:.3f}"
            lines.append((r.run, r.split_name, r.domain_tag, r.mode, mae, rmse, str(r.n_images)))
        widths = [max(len(x) for x in col) for col in zip(head, *lines)]
        fmt = "  ".join(f"{{:<{w}}}" for w in widths)
        return "\n".join([fmt.format(*head), fmt.format(*("-" * w for w in widths))] + [fmt.format(*l) for l in lines])


def score_predictions(split, preds, mode, run=""):
    gt = [t.count for t in split.targets]
    mae, rmse = mae_rmse(gt, preds)
    tags = {s.domain_tag for s in split.samples}
    return EvalRow(split.name, ",".join(sorted(tags)), mode, mae, rmse, len(split), run)


def evaluate(checkpoint, split, mode=None, cfg=None):
    """Score a checkpoint (path) or an in-memory model on a split.

    When ``cfg`` is given the checkpoint's config hash must match it.
    """
    if isinstance(checkpoint, (str, Path)):
        model, cfg, _ = model_from_checkpoint(checkpoint, cfg)
    else:
        model = checkpoint
        if cfg is None:
            raise ValueError("an in-memory model needs its TrainConfig")
    if mode is not None and mode != cfg.mode:
        cfg = replace(cfg, mode=mode)
    with torch.no_grad():
        preds = predict_counts(model, split, cfg)
    return score_predictions(split, preds, cfg.mode)


# ---------------------------------------------------------------------------
# ablations


def ablation_grid(alphas=ALPHAS, vision=tuple(VISION_ROWS)):
    """name -> TrainConfig overrides.  Entries with identical overrides share runs."""
    grid = {"baseline (no KD)": {"distill": False}}
    # the vision term carries weight alpha in the total loss
    grid["language KD only (alpha=0)"] = {"alpha": 0.0}
    grid["vision KD only (alpha=1)"] = {"alpha": 1.0}
    for a in alphas:
        grid[f"alpha={a:g}"] = {"alpha": a}
    for v in vision:
        grid[f"vision: {VISION_ROWS[v]}"] = {"alpha": 0.9, "vision_variant": v}
    return grid


def _summarise(values):
    m = statistics.fmean(values)
    sd = statistics.stdev(values) if len(values) > 1 else 0.0
    return m, sd


def run_one(cfg, bench, out_dir):
    best = train(bench["A-train"], cfg, out_dir, val_split=bench.get("A-val"))
    model, _, _ = model_from_checkpoint(best, cfg)
    res = {}
    for split in ("A-test", "B-test"):
        if split in bench:
            row = evaluate(model, bench[split], cfg=cfg)
            res[split] = (row.mae, row.rmse)
    return res


def ablation_suite(base_cfg, bench_for_seed, seeds, out_dir, grid=None, splits=("A-test", "B-test")):
    """Train every grid entry for every seed and aggregate mean ± sd per split.

    ``bench_for_seed(seed)`` returns the benchmark dict for one seed.
    Returns ``(report, raw)`` where ``raw[name][seed][split] = (mae, rmse)``.
    """
    grid = grid if grid is not None else ablation_grid()
    out_dir = Path(out_dir)
    cache, raw, sizes = {}, {}, {}
    for seed in seeds:
        bench = bench_for_seed(seed)
        sizes.update({k: len(v) for k, v in bench.items()})
        for name, over in grid.items():
            cfg = replace(base_cfg, seed=seed, **over)
            key = cfg.hash()
            if key not in cache:
                try:
                    cache[key] = run_one(cfg, bench, out_dir / key)
                except Exception as exc:  # a failed member run must not sink the suite
                    log.exception("run %s seed %d failed", name, seed)
                    cache[key] = {"error": repr(exc)}
            raw.setdefault(name, {})[seed] = cache[key]
    rows = []
    for name in grid:
        for split in splits:
            per_seed = [raw[name][s].get(split) for s in seeds]
            n = sizes.get(split, 0)
            if any(v is None for v in per_seed):
                rows.append(EvalRow(split, split[0], base_cfg.mode, math.nan, math.nan, n, name, failed=True, n_seeds=len(seeds)))
                continue
            mae, mae_sd = _summarise([v[0] for v in per_seed])
            rmse, rmse_sd = _summarise([v[1] for v in per_seed])
            rows.append(EvalRow(split, split[0], base_cfg.mode, mae, rmse, n, name, mae_sd, rmse_sd, len(seeds)))
    report = EvalReport(rows, base_cfg.hash(), meta={"seeds": list(seeds), "runs": len(cache)})
    return report, raw
