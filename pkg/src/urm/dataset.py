"""Counting annotations, ground-truth density rendering, the synthetic
cross-domain benchmark and training augmentations.

Coordinates are in pixel-index units: pixel ``(row=i, col=j)`` is centred on
``(x=j, y=i)``.  Boxes are ``(x_min, y_min, x_max, y_max)`` in the same units.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import ndimage


class AnnotationError(ValueError):
    pass


class ImageLoadError(IOError):
    pass


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class BoxAnnotation:
    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self):
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise AnnotationError(f"degenerate box {self.as_list()}")

    def as_list(self):
        return [self.x_min, self.y_min, self.x_max, self.y_max]

    @property
    def width(self):
        return self.x_max - self.x_min

    @property
    def height(self):
        return self.y_max - self.y_min

    def clamp(self, H, W):
        return BoxAnnotation(
            min(max(self.x_min, 0.0), W - 1.0),
            min(max(self.y_min, 0.0), H - 1.0),
            min(max(self.x_max, 0.0), W),
            min(max(self.y_max, 0.0), H),
        )


@dataclass
class ImageSample:
    """One scene.  ``image`` may be ``None`` until :meth:`load_image` is called."""

    image: np.ndarray | None
    exemplars: list[BoxAnnotation]
    points: np.ndarray  # (N, 2) as (x, y)
    category: str
    domain_tag: str = ""
    image_path: str | None = None
    size: tuple[int, int] | None = None  # (H, W), known before the pixels are

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 2)
        if self.image is not None:
            self.size = (int(self.image.shape[0]), int(self.image.shape[1]))

    @property
    def count(self):
        return int(len(self.points))

    @property
    def n_exemplars(self):
        return len(self.exemplars)

    def boxes_array(self):
        return np.array([b.as_list() for b in self.exemplars], dtype=np.float64).reshape(-1, 4)

    def load_image(self):
        if self.image is not None:
            return self.image
        if self.image_path is None:
            raise ImageLoadError("sample has neither pixels nor an image path")
        try:
            from PIL import Image

            with Image.open(self.image_path) as im:
                arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
        except (OSError, ValueError) as exc:
            raise ImageLoadError(f"cannot load {self.image_path}: {exc}") from exc
        self.image = arr
        self.size = arr.shape[:2]
        return arr


@dataclass(frozen=True)
class DensityTarget:
    density: np.ndarray
    count: int


@dataclass(frozen=True)
class CategoryDescriptor:
    shape: str
    color: str

    @property
    def name(self):
        return f"{self.color} {self.shape}"


@dataclass(frozen=True)
class Degradation:
    occlusion_prob: float = 0.0
    blur_sigma: float = 0.0
    clutter_density: float = 0.0
    jitter_strength: float = 0.0


@dataclass(frozen=True)
class SyntheticDomainConfig:
    seed: int
    n_images: int
    categories: tuple[CategoryDescriptor, ...]
    count_range: tuple[int, int] = (4, 16)
    degradation: Degradation = field(default_factory=Degradation)
    image_size: int = 64
    radius_range: tuple[float, float] = (2.5, 4.5)
    n_exemplars: int = 3
    sigma: float = 1.0
    domain_tag: str = "A"
    distractor_categories: tuple[CategoryDescriptor, ...] = ()

    def to_json(self):
        d = asdict(self)
        d["categories"] = [asdict(c) for c in self.categories]
        d["distractor_categories"] = [asdict(c) for c in self.distractor_categories]
        return d

    @classmethod
    def from_json(cls, d):
        d = dict(d)
        d["categories"] = tuple(CategoryDescriptor(**c) for c in d["categories"])
        d["distractor_categories"] = tuple(CategoryDescriptor(**c) for c in d.get("distractor_categories", []))
        d["degradation"] = Degradation(**d["degradation"])
        d["count_range"] = tuple(d["count_range"])
        d["radius_range"] = tuple(d["radius_range"])
        return cls(**d)


@dataclass
class DatasetSplit:
    name: str
    samples: list[ImageSample]
    targets: list[DensityTarget]
    config: SyntheticDomainConfig | None = None

    def __len__(self):
        return len(self.samples)

    @property
    def categories(self):
        return {s.category for s in self.samples}

    def split_hash(self):
        h = hashlib.sha256()
        for s, t in zip(self.samples, self.targets):
            h.update(np.ascontiguousarray(s.load_image()).tobytes())
            h.update(np.ascontiguousarray(s.points).tobytes())
            h.update(s.boxes_array().tobytes())
            h.update(s.category.encode())
            h.update(np.ascontiguousarray(t.density).tobytes())
        return h.hexdigest()


# ---------------------------------------------------------------------------
# annotation files


def _parse_entry(name, entry):
    for key in ("boxes", "points", "category"):
        if key not in entry:
            raise AnnotationError(f"{name}: missing key '{key}'")
    exemplars = []
    for i, b in enumerate(entry["boxes"]):
        if len(b) != 4:
            raise AnnotationError(f"{name}: boxes[{i}] must have 4 coordinates")
        try:
            exemplars.append(BoxAnnotation(*map(float, b)))
        except AnnotationError as exc:
            raise AnnotationError(f"{name}: boxes[{i}] {exc}") from None
    try:
        points = np.asarray(entry["points"], dtype=np.float64).reshape(-1, 2)
    except (TypeError, ValueError):
        raise AnnotationError(f"{name}: 'points' must be a list of [x, y]") from None
    if not isinstance(entry["category"], str):
        raise AnnotationError(f"{name}: 'category' must be a string")
    return exemplars, points, entry["category"]


def load_annotations(path, image_dir=None, domain_tag=""):
    """Read an annotation JSON of the form
    ``{image_file: {"boxes": [[x0,y0,x1,y1], ...], "points": [[x,y], ...], "category": str}}``.

    Pixels are not read here; call ``sample.load_image()``.
    """
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise AnnotationError(f"{path}: malformed JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise AnnotationError(f"{path}: top level must be an object keyed by image file")
    image_dir = Path(image_dir) if image_dir is not None else path.parent
    samples = []
    for name in sorted(data):
        exemplars, points, category = _parse_entry(name, data[name])
        samples.append(
            ImageSample(
                image=None,
                exemplars=exemplars,
                points=points,
                category=category,
                domain_tag=domain_tag,
                image_path=str(image_dir / name),
            )
        )
    return samples


# ---------------------------------------------------------------------------
# density maps


def _point_kernel(x, y, H, W, sigma):
    r = int(np.ceil(4 * sigma))
    cx, cy = int(round(x)), int(round(y))
    x0, x1 = max(cx - r, 0), min(cx + r, W - 1)
    y0, y1 = max(cy - r, 0), min(cy + r, H - 1)
    xs = np.arange(x0, x1 + 1, dtype=np.float64)
    ys = np.arange(y0, y1 + 1, dtype=np.float64)
    d2 = (xs[None, :] - x) ** 2 + (ys[:, None] - y) ** 2
    k = np.exp(-d2 / (2 * sigma * sigma))
    k[d2 > (4 * sigma) ** 2] = 0.0
    s = k.sum()
    if s <= 0:  # only reachable for sigma far below one pixel
        k[int(round(y)) - y0, int(round(x)) - x0] = 1.0
        s = 1.0
    return (slice(y0, y1 + 1), slice(x0, x1 + 1)), k / s


def render_density(points, H, W, sigma=2.0):
    """Unit-mass Gaussian per point, truncated at 4 sigma and renormalised
    over the in-image support so each point contributes exactly 1."""
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    bad = [(float(x), float(y)) for x, y in pts if not (0 <= x < W and 0 <= y < H)]
    if bad:
        raise ValueError(f"points outside the {H}x{W} image: {bad}")
    density = np.zeros((H, W), dtype=np.float64)
    for x, y in pts:
        sl, k = _point_kernel(x, y, H, W, sigma)
        density[sl] += k
    return DensityTarget(density=density, count=len(pts))


# ---------------------------------------------------------------------------
# synthetic benchmark

SHAPES = ("circle", "square", "triangle", "diamond", "ring", "cross")
COLORS = {
    "red": (0.85, 0.15, 0.15),
    "green": (0.15, 0.7, 0.2),
    "blue": (0.2, 0.3, 0.9),
    "yellow": (0.9, 0.85, 0.15),
    "purple": (0.6, 0.2, 0.75),
    "orange": (0.95, 0.55, 0.1),
}
BACKGROUND = np.array([0.55, 0.55, 0.55])


def all_categories():
    return tuple(CategoryDescriptor(s, c) for s in SHAPES for c in COLORS)


def split_categories(seed=0, n_train=20, n_val=4):
    """Partition the shape x color grid into disjoint train / val / test sets.

    Every shape and every colour is seen in training; the held-out sets are
    unseen combinations.
    """
    cats = list(all_categories())
    rng = np.random.default_rng(seed)
    for _ in range(1000):
        order = rng.permutation(len(cats))
        train = [cats[i] for i in order[:n_train]]
        if {c.shape for c in train} == set(SHAPES) and {c.color for c in train} == set(COLORS):
            val = [cats[i] for i in order[n_train : n_train + n_val]]
            test = [cats[i] for i in order[n_train + n_val :]]
            return tuple(train), tuple(val), tuple(test)
    raise ConfigError("could not find a covering category split")


def shape_mask(shape, cx, cy, r, H, W):
    """Boolean H x W mask of one instance centred at (cx, cy) with radius r."""
    yy, xx = np.mgrid[0:H, 0:W].astype(np.float64)
    dx, dy = xx - cx, yy - cy
    if shape == "circle":
        return dx * dx + dy * dy <= r * r
    if shape == "square":
        return (np.abs(dx) <= r * 0.85) & (np.abs(dy) <= r * 0.85)
    if shape == "diamond":
        return np.abs(dx) + np.abs(dy) <= r * 1.15
    if shape == "triangle":
        return (dy <= r * 0.8) & (dy >= -r) & (np.abs(dx) <= (dy + r) * 0.6)
    if shape == "ring":
        d2 = dx * dx + dy * dy
        return (d2 <= r * r) & (d2 >= (0.5 * r) ** 2)
    if shape == "cross":
        w = r * 0.4
        return ((np.abs(dx) <= w) & (np.abs(dy) <= r)) | ((np.abs(dy) <= w) & (np.abs(dx) <= r))
    raise ConfigError(f"unknown shape {shape!r}")


def _tight_box(mask):
    ys, xs = np.nonzero(mask)
    return BoxAnnotation(float(xs.min()), float(ys.min()), float(xs.max() + 1), float(ys.max() + 1))


def render_canonical(category, size=16):
    """A single centred instance on the plain background."""
    img = np.broadcast_to(BACKGROUND, (size, size, 3)).copy()
    c = (size - 1) / 2
    m = shape_mask(category.shape, c, c, size * 0.35, size, size)
    img[m] = COLORS[category.color]
    return img


def _place(rng, n, H, W, rmin, rmax, taken, margin, tries=200):
    out = []
    for _ in range(n):
        for _ in range(tries):
            r = rng.uniform(rmin, rmax)
            x = rng.uniform(r + margin, W - 1 - r - margin)
            y = rng.uniform(r + margin, H - 1 - r - margin)
            if all((x - px) ** 2 + (y - py) ** 2 > (r + pr + 1.0) ** 2 for px, py, pr in taken):
                taken.append((x, y, r))
                out.append((x, y, r))
                break
    return out


def _generate_one(cfg, idx):
    S = cfg.image_size
    layout = np.random.default_rng([cfg.seed, idx, 0])
    degrade = np.random.default_rng([cfg.seed, idx, 1])
    cat = cfg.categories[layout.integers(len(cfg.categories))]
    n_obj = int(layout.integers(cfg.count_range[0], cfg.count_range[1] + 1))
    scale = layout.uniform(*cfg.radius_range)
    bg = BACKGROUND + layout.uniform(-0.05, 0.05, size=3)
    taken = []
    objects = _place(layout, n_obj, S, S, scale * 0.8, scale * 1.2, taken, margin=1.0)
    color_noise = layout.normal(0, 0.03, size=(len(objects), 3))

    img = np.broadcast_to(bg, (S, S, 3)).copy()
    g = cfg.degradation
    if g.jitter_strength > 0:
        img = img + degrade.uniform(-1, 1, size=3) * 0.5 * g.jitter_strength
    base_color = np.asarray(COLORS[cat.color])
    if g.jitter_strength > 0:
        base_color = base_color + degrade.normal(0, g.jitter_strength, size=3)

    # distractors are drawn first so targets stay on top and keep their masks
    distractor_pool = [c for c in (cfg.distractor_categories or all_categories()) if c != cat]
    n_clutter = int(degrade.poisson(g.clutter_density * n_obj)) if g.clutter_density > 0 else 0
    clutter = _place(degrade, n_clutter, S, S, scale * 0.8, scale * 1.2, list(taken), margin=1.0)
    for x, y, r in clutter:
        dc = distractor_pool[degrade.integers(len(distractor_pool))]
        img[shape_mask(dc.shape, x, y, r, S, S)] = np.asarray(COLORS[dc.color]) + degrade.normal(0, 0.03, 3)

    masks = []
    for (x, y, r), cn in zip(objects, color_noise):
        m = shape_mask(cat.shape, x, y, r, S, S)
        img[m] = base_color + cn
        masks.append(m)

    for x, y, r in objects:
        if g.occlusion_prob > 0 and degrade.uniform() < g.occlusion_prob:
            theta = degrade.uniform(0, np.pi)
            yy, xx = np.mgrid[0:S, 0:S]
            off = degrade.uniform(-0.5, 0.5) * r
            dist = np.abs((xx - x) * np.sin(theta) - (yy - y) * np.cos(theta) - off)
            bar = (dist <= r * 0.35) & ((xx - x) ** 2 + (yy - y) ** 2 <= (2.0 * r) ** 2)
            img[bar] = bg * 0.6

    if g.blur_sigma > 0:
        img = ndimage.gaussian_filter(img, sigma=(g.blur_sigma, g.blur_sigma, 0), mode="nearest")
    img = np.clip(img, 0.0, 1.0)

    points = np.array([(x, y) for x, y, _ in objects], dtype=np.float64).reshape(-1, 2)
    # exemplars: the largest instances, ties broken by index
    order = sorted(range(len(objects)), key=lambda i: (-masks[i].sum(), i))[: cfg.n_exemplars]
    exemplars = [_tight_box(masks[i]) for i in order]
    sample = ImageSample(image=img, exemplars=exemplars, points=points, category=cat.name, domain_tag=cfg.domain_tag)
    return sample, render_density(points, S, S, cfg.sigma)


def generate_synthetic(cfg, name=None):
    if not cfg.categories:
        raise ConfigError("synthetic config needs at least one category")
    lo, hi = cfg.count_range
    if not 0 <= lo <= hi:
        raise ConfigError(f"bad count_range {cfg.count_range}")
    samples, targets = [], []
    for i in range(cfg.n_images):
        s, t = _generate_one(cfg, i)
        samples.append(s)
        targets.append(t)
    return DatasetSplit(name or cfg.domain_tag, samples, targets, cfg)


DOMAIN_B = Degradation(occlusion_prob=0.35, blur_sigma=0.8, clutter_density=0.6, jitter_strength=0.08)


def make_benchmark(seed=0, n_train=200, n_val=40, n_test=100, image_size=64, degradation=DOMAIN_B, **kw):
    """Source-domain train/val/test splits (domain A) plus a degraded target
    test split (domain B) sharing the test categories."""
    train_c, val_c, test_c = split_categories(seed)
    common = dict(image_size=image_size, **kw)
    cfgs = {
        "A-train": SyntheticDomainConfig(seed * 1000 + 1, n_train, train_c, domain_tag="A", **common),
        "A-val": SyntheticDomainConfig(seed * 1000 + 2, n_val, val_c, domain_tag="A", **common),
        "A-test": SyntheticDomainConfig(seed * 1000 + 3, n_test, test_c, domain_tag="A", **common),
        "B-test": SyntheticDomainConfig(
            seed * 1000 + 3, n_test, test_c, degradation=degradation, domain_tag="B",
            distractor_categories=train_c + val_c, **common,
        ),
    }
    return {name: generate_synthetic(c, name) for name, c in cfgs.items()}


def write_manifest(split, path):
    """One JSON per split: the generator config plus per-sample annotations."""
    doc = {
        "name": split.name,
        "config": split.config.to_json() if split.config is not None else None,
        "hash": split.split_hash(),
        "samples": [
            {
                "index": i,
                "category": s.category,
                "domain_tag": s.domain_tag,
                "boxes": s.boxes_array().tolist(),
                "points": s.points.tolist(),
            }
            for i, s in enumerate(split.samples)
        ],
    }
    Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True))
    return doc


def read_manifest(path):
    """Regenerate a split from its manifest and check the stored hash."""
    doc = json.loads(Path(path).read_text())
    if doc.get("config") is None:
        raise ConfigError(f"{path}: manifest has no generator config")
    split = generate_synthetic(SyntheticDomainConfig.from_json(doc["config"]), doc["name"])
    if split.split_hash() != doc["hash"]:
        raise ConfigError(f"{path}: regenerated split hash differs from manifest")
    return split


# density cache: b"URMD" | u16 version | u32 H | u32 W | u8 dtype (0=f32, 1=f64) | data (little-endian, row-major)
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_HEADER = struct.Struct("<4sHIIB")


def save_density(path, density):
    density = np.asarray(density)
    code = 0 if density.dtype == np.float32 else 1
    H, W = density.shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(b"URMD", 1, H, W, code))
        fh.write(np.ascontiguousarray(density, dtype=_DTYPES[code]).tobytes())


def load_density(path):
    raw = Path(path).read_bytes()
    magic, version, H, W, code = _HEADER.unpack_from(raw)
    if magic != b"URMD" or version != 1 or code not in _DTYPES:
        raise ValueError(f"{path}: not a density cache file")
    return np.frombuffer(raw, dtype=_DTYPES[code], offset=_HEADER.size).reshape(H, W).copy()


# ---------------------------------------------------------------------------
# augmentation


def hflip(sample):
    H, W = sample.size
    img = sample.image[:, ::-1].copy() if sample.image is not None else None
    pts = sample.points.copy()
    pts[:, 0] = np.clip(W - 1 - pts[:, 0], 0, W - 1)
    boxes = [
        BoxAnnotation(max(W - 1 - b.x_max, 0.0), b.y_min, min(W - 1 - b.x_min, W), b.y_max)
        for b in sample.exemplars
    ]
    return replace(sample, image=img, points=pts, exemplars=boxes)


def tile(sample, k=2):
    """k x k replication, block-averaged back to the original size."""
    img = sample.load_image()
    H, W = img.shape[:2]
    if H % k or W % k:
        raise ValueError(f"tile factor {k} must divide the image size {H}x{W}")
    big = np.tile(img, (k, k, 1))
    small = big.reshape(H, k, W, k, 3).mean(axis=(1, 3))
    shift = (k - 1) / 2
    pts, boxes = [], []
    for a in range(k):
        for b in range(k):
            off = np.array([b * W, a * H], dtype=np.float64)
            pts.append((sample.points + off - shift) / k)
            for e in sample.exemplars:
                boxes.append(
                    BoxAnnotation(
                        (e.x_min + b * W) / k, (e.y_min + a * H) / k, (e.x_max + b * W) / k, (e.y_max + a * H) / k
                    )
                )
    pts = np.clip(np.concatenate(pts), 0, [W - 1, H - 1]) if len(sample.points) else sample.points
    # keep the original exemplar count: one replicated box set is enough to prompt
    n = len(sample.exemplars)
    return replace(sample, image=small, points=pts, exemplars=boxes[:n]), boxes


def color_jitter(sample, rng, strength=0.2):
    img = sample.load_image()
    brightness = 1 + rng.uniform(-strength, strength)
    contrast = 1 + rng.uniform(-strength, strength)
    saturation = 1 + rng.uniform(-strength, strength)
    out = img * brightness
    mean = out.mean()
    out = (out - mean) * contrast + mean
    gray = out.mean(axis=2, keepdims=True)
    out = (out - gray) * saturation + gray
    return replace(sample, image=np.clip(out, 0, 1))


def augment(sample, ops, rng, tile_factor=2, jitter=0.2, p_flip=0.5, p_tile=0.5):
    """Apply the requested subset of {"tiling", "hflip", "color_jitter"}.

    Returns ``(sample, geometry_only)``: the fully augmented sample and the
    same geometry without colour jitter (what the teacher sees).
    """
    sample.load_image()
    if "tiling" in ops and rng.uniform() < p_tile:
        sample, _ = tile(sample, tile_factor)
    if "hflip" in ops and rng.uniform() < p_flip:
        sample = hflip(sample)
    geometry = sample
    if "color_jitter" in ops:
        sample = color_jitter(sample, rng, jitter)
    return sample, geometry
