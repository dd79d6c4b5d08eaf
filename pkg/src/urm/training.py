"""Optimisation loop, batching, checkpoints and the training log."""

import hashlib
import json
import logging
import math
import shutil
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import torch

from . import dataset as ds
from .losses import kd_loss, density_loss, mae_rmse, total_loss
from .model import URM, ModelConfig
from .prompts import LLM_QUERIES, PromptCache, TemplateClient, build_prompt_set
from .teacher import TeacherTargets, load_teacher

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


class TrainingError(RuntimeError):
    pass


class ConfigMismatch(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 150
    batch_size: int = 4
    lr: float = 1e-4
    weight_decay: float = 1e-2
    clip_norm: float = 0.1
    alpha: float = 0.9
    n1: int = 3
    n2: int = 3
    seed: int = 0
    mode: str = "few-shot"
    teacher: str = "toy"
    teacher_checkpoint: str | None = None
    distill: bool = True
    vision_variant: str = "mask-pool"
    squared_kd: bool = False
    preset: str = "full"
    augment: tuple = ("tiling", "hflip", "color_jitter")
    dtype: str = "float32"
    model_overrides: dict = field(default_factory=dict)

    def __post_init__(self):
        if not 0 <= self.alpha <= 1:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")
        for name in ("epochs", "batch_size", "n1", "n2"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.lr < 0 or self.weight_decay < 0 or self.clip_norm <= 0:
            raise ValueError("lr and weight_decay must be >= 0 and clip_norm > 0")
        if self.mode not in ("few-shot", "zero-shot"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.preset not in ("full", "toy"):
            raise ValueError(f"unknown preset {self.preset!r}")

    def model_config(self):
        kw = dict(n1=self.n1, n2=self.n2, seed=self.seed, **self.model_overrides)
        return ModelConfig.toy(**kw) if self.preset == "toy" else ModelConfig(**kw)

    def to_json(self):
        d = asdict(self)
        d["augment"] = list(self.augment)
        return d

    @classmethod
    def from_json(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        d = dict(d)
        if "augment" in d:
            d["augment"] = tuple(d["augment"])
        return cls(**d)

    def hash(self):
        blob = json.dumps({"train": self.to_json(), "model": self.model_config().to_json()}, sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


def torch_dtype(cfg):
    return torch.float64 if cfg.dtype == "float64" else torch.float32


# ---------------------------------------------------------------------------
# data


def to_tensor_image(img, dtype=torch.float32):
    return torch.as_tensor(np.ascontiguousarray(img), dtype=dtype).permute(2, 0, 1)


def collate(samples, targets, sigma=None, dtype=torch.float32, teacher_images=None):
    """Stack samples that share an image size and exemplar count."""
    images = torch.stack([to_tensor_image(s.load_image(), dtype) for s in samples])
    ns = {s.n_exemplars for s in samples}
    if len(ns) != 1:
        raise ValueError(f"batch mixes exemplar counts {sorted(ns)}")
    boxes = torch.stack([torch.as_tensor(s.boxes_array(), dtype=dtype) for s in samples])
    if targets is None:
        H, W = images.shape[-2:]
        targets = [ds.render_density(s.points, H, W, sigma) for s in samples]
    gt = torch.stack([torch.as_tensor(t.density, dtype=dtype) for t in targets])
    counts = torch.tensor([t.count for t in targets], dtype=dtype)
    batch = {
        "images": images,
        "boxes": boxes,
        "density": gt,
        "counts": counts,
        "categories": [s.category for s in samples],
    }
    if teacher_images is not None:
        batch["teacher_images"] = torch.stack([to_tensor_image(s.load_image(), dtype) for s in teacher_images])
    return batch


def epoch_batches(split, cfg, epoch, sigma, train=True):
    """Seed-determined order and augmentation for one epoch."""
    n = len(split)
    dtype = torch_dtype(cfg)
    if train:
        order = np.random.default_rng([cfg.seed, epoch, 0]).permutation(n)
    else:
        order = np.arange(n)
    for start in range(0, n, cfg.batch_size):
        idx = order[start : start + cfg.batch_size]
        if not train or not cfg.augment:
            yield collate([split.samples[i] for i in idx], [split.targets[i] for i in idx], dtype=dtype)
            continue
        aug, geom = [], []
        for i in idx:
            rng = np.random.default_rng([cfg.seed, epoch, 1, int(i)])
            a, g = ds.augment(split.samples[i], cfg.augment, rng)
            aug.append(a)
            geom.append(g)
        yield collate(aug, None, sigma=sigma, dtype=dtype, teacher_images=geom)


def synthetic_prompt_sets(categories, cache=None):
    """Prompt sets for synthetic shape/colour categories, with the LLM
    descriptions answered by a deterministic attribute describer."""
    descriptions = {}
    for c in categories:
        descriptions[c.name] = (
            f"A {c.name} is a small flat {c.shape} filled with solid {c.color}, "
            f"with a crisp {c.shape} outline against a plain grey background."
        )
    cache = cache if cache is not None else PromptCache(path=None)
    client = TemplateClient(descriptions)
    return {c.name: build_prompt_set(c.name, llm_queries=LLM_QUERIES, client=client, cache=cache) for c in categories}


# ---------------------------------------------------------------------------
# one step


def global_grad_norm(params):
    grads = [p.grad.detach().flatten() for p in params if p.grad is not None]
    if not grads:
        return 0.0
    return float(torch.cat(grads).norm())


def compute_loss(model, batch, targets, cfg):
    boxes = batch["boxes"] if cfg.mode == "few-shot" else None
    out = model(batch["images"], boxes, mode=cfg.mode)
    dens = density_loss(out["density"], batch["density"], batch["counts"])
    if cfg.distill and targets is not None:
        timgs = batch.get("teacher_images", batch["images"])
        r_v, r_l = targets(timgs, batch["categories"])
        v = kd_loss(r_v.to(out["proj_v"].dtype), out["proj_v"], cfg.squared_kd)
        l = kd_loss(r_l.to(out["proj_l"].dtype), out["proj_l"], cfg.squared_kd)
    else:
        v = l = torch.zeros((), dtype=dens.dtype)
    return total_loss(dens, v, l, cfg.alpha), out


def train_step(batch, model, targets, optimizer, cfg):
    """One forward/backward/clip/step; returns the pre-step loss breakdown and
    the gradient norm before and after clipping."""
    model.train()
    optimizer.zero_grad(set_to_none=True)
    parts, _ = compute_loss(model, batch, targets, cfg)
    if not torch.isfinite(parts.total):
        raise TrainingError(f"non-finite loss: {parts.as_floats()}")
    parts.total.backward()
    params = model.trainable_parameters()
    pre = float(torch.nn.utils.clip_grad_norm_(params, cfg.clip_norm))
    post = global_grad_norm(params)
    optimizer.step()
    return parts, pre, post


def make_optimizer(model, cfg):
    return torch.optim.AdamW(model.trainable_parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)


def build_model(cfg):
    model = URM(cfg.model_config())
    return model.to(torch_dtype(cfg))


def default_teacher(cfg):
    mcfg = cfg.model_config()
    if cfg.teacher == "toy":
        return load_teacher("toy", dim=mcfg.d_t, patch=max(mcfg.image_size // mcfg.grid, 4), seed=1000)
    return load_teacher("real", checkpoint=cfg.teacher_checkpoint)


def build_targets(cfg, categories, teacher=None, memo_dir=None, prompt_sets=None):
    if not cfg.distill:
        return None
    teacher = teacher if teacher is not None else default_teacher(cfg)
    prompt_sets = prompt_sets if prompt_sets is not None else synthetic_prompt_sets(categories)
    return TeacherTargets(teacher, prompt_sets, cfg.vision_variant, memo_dir=memo_dir)


def param_hash(module):
    h = hashlib.sha256()
    for name, t in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, model, optimizer, cfg, epoch, best_mae=None, extra=None):
    state = {
        "format_version": CHECKPOINT_VERSION,
        "config_hash": cfg.hash(),
        "config": cfg.to_json(),
        "model": model.state_dict(),
        "optimizer": optimizer.state_dict() if optimizer is not None else None,
        "epoch": epoch,
        "best_mae": best_mae,
        "torch_rng": torch.get_rng_state(),
        "extra": extra or {},
    }
    tmp = Path(str(path) + ".tmp")
    torch.save(state, tmp)
    tmp.replace(path)
    return path


def load_checkpoint(path, cfg=None):
    state = torch.load(path, map_location="cpu", weights_only=False)
    if state.get("format_version") != CHECKPOINT_VERSION:
        raise ConfigMismatch(f"{path}: checkpoint format {state.get('format_version')} != {CHECKPOINT_VERSION}")
    if cfg is not None and state["config_hash"] != cfg.hash():
        raise ConfigMismatch(f"{path}: checkpoint config {state['config_hash']} != current config {cfg.hash()}")
    return state


def model_from_checkpoint(path, cfg=None):
    state = load_checkpoint(path, cfg)
    cfg = cfg or TrainConfig.from_json(state["config"])
    model = build_model(cfg)
    model.load_state_dict(state["model"])
    model.eval()
    return model, cfg, state


# ---------------------------------------------------------------------------
# loop


def predict_counts(model, split, cfg):
    model.eval()
    preds = []
    with torch.no_grad():
        for batch in epoch_batches(split, cfg, 0, None, train=False):
            boxes = batch["boxes"] if cfg.mode == "few-shot" else None
            preds.extend(model(batch["images"], boxes, mode=cfg.mode)["count"].tolist())
    return preds


def validate(model, split, cfg):
    preds = predict_counts(model, split, cfg)
    return mae_rmse([t.count for t in split.targets], preds)[0]


def train(train_split, cfg, out_dir, val_split=None, resume=None, teacher=None, sigma=None, categories=None):
    """Train and write ``epoch_XXX.pt`` per epoch, ``best.pt`` (lowest
    validation MAE, or the last epoch without validation) and ``train_log.jsonl``.
    Returns the path of the best checkpoint."""
    if len(train_split) == 0:
        raise ValueError("empty training split")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if sigma is None:
        sigma = train_split.config.sigma if train_split.config is not None else 2.0
    torch.manual_seed(cfg.seed)
    model = build_model(cfg)
    optimizer = make_optimizer(model, cfg)
    if categories is None:
        lookup = {c.name: c for c in ds.all_categories()}
        categories = [lookup[n] for n in sorted(train_split.categories) if n in lookup]
    targets = build_targets(cfg, categories, teacher)
    start, best = 0, math.inf
    if resume is not None:
        state = load_checkpoint(resume, cfg)
        model.load_state_dict(state["model"])
        optimizer.load_state_dict(state["optimizer"])
        torch.set_rng_state(state["torch_rng"])
        start = state["epoch"] + 1
        best = state["best_mae"] if state["best_mae"] is not None else math.inf

    log_path = out_dir / "train_log.jsonl"
    best_path = out_dir / "best.pt"
    step = 0
    with open(log_path, "a") as logf:
        try:
            for epoch in range(start, cfg.epochs):
                for batch in epoch_batches(train_split, cfg, epoch, sigma):
                    parts, pre, post = train_step(batch, model, targets, optimizer, cfg)
                    rec = {"epoch": epoch, "step": step, **parts.as_floats(), "grad_norm": pre, "clipped_norm": post}
                    logf.write(json.dumps(rec) + "\n")
                    step += 1
                val_mae = validate(model, val_split, cfg) if val_split is not None else None
                improved = val_mae is None or val_mae < best
                if val_mae is not None and improved:
                    best = val_mae
                ckpt = save_checkpoint(out_dir / f"epoch_{epoch:03d}.pt", model, optimizer, cfg, epoch, best)
                if improved:
                    shutil.copyfile(ckpt, best_path)
                logf.write(json.dumps({"epoch": epoch, "val_mae": val_mae}) + "\n")
                logf.flush()
                log.info("epoch %d done, val MAE %s", epoch, val_mae)
        except OSError as exc:
            logf.flush()
            raise TrainingError(f"write failure in {out_dir}: {exc}") from exc
    return best_path
