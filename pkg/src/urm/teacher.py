"""Frozen vision-language teacher and the universal targets distilled from it.

``r_v`` is the mask-pooled dense vision embedding of the target category and
``r_l`` the normalised average text embedding of its prompt set.
"""

import hashlib
import re
import struct
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

VISION_VARIANTS = ("class-token", "global-pool", "mask-pool")


class TeacherUnavailable(RuntimeError):
    pass


class TeacherHandle(nn.Module):
    """Interface: frozen dense image embeddings, a summary token and a text tower.

    ``calls`` counts every encoder invocation so callers can assert that
    inference never touches the teacher.
    """

    dim: int

    def __init__(self):
        super().__init__()
        self.calls = 0

    def patch_embeddings(self, images):
        """(B, 3, H, W) -> (B, h_t, w_t, d_t) value-path embeddings."""
        raise NotImplementedError

    def summary_token(self, images):
        """(B, 3, H, W) -> (B, d_t) global representation."""
        raise NotImplementedError

    def encode_text(self, prompts):
        """list of str -> (P, d_t), each row unit-norm."""
        raise NotImplementedError


class ToyTeacher(TeacherHandle):
    """Seeded random linear patch featurizer with a text tower tied to it.

    A prompt mentioning a known shape and colour is embedded by featurizing a
    canonical rendering of that category through the same patch featurizer
    and shared projection, plus a small prompt-specific perturbation.  The two
    towers therefore share one space without any training.
    """

    def __init__(self, dim=32, patch=8, attr_dim=64, seed=0, prompt_noise=0.05, canonical=None):
        super().__init__()
        from .dataset import COLORS, SHAPES, CategoryDescriptor, render_canonical

        gen = torch.Generator().manual_seed(seed)
        w = torch.randn(attr_dim, 3, patch, patch, generator=gen)
        # spatially smooth filters respond to blobs rather than single pixels
        k = torch.exp(-0.5 * (torch.arange(5.0) - 2) ** 2 / 1.5**2)
        k = (k[:, None] * k[None, :]) / (k.sum() ** 2)
        w = F.conv2d(w.view(-1, 1, patch, patch), k.view(1, 1, 5, 5), padding=2).view(attr_dim, 3, patch, patch)
        self.featurizer = nn.Conv2d(3, attr_dim, patch, stride=patch, bias=False)
        self.projection = nn.Linear(attr_dim, dim, bias=False)
        with torch.no_grad():
            self.featurizer.weight.copy_(w / w.flatten(1).norm(dim=1).view(-1, 1, 1, 1))
            self.projection.weight.copy_(torch.randn(dim, attr_dim, generator=gen) / attr_dim**0.5)
        self.requires_grad_(False)
        self.dim = dim
        self.patch = patch
        self.seed = seed
        self.prompt_noise = prompt_noise
        self.shapes = tuple(SHAPES)
        self.colors = tuple(COLORS)
        self._canonical = canonical or {}
        self._render = lambda s, c: render_canonical(CategoryDescriptor(s, c), size=2 * patch)

    def _dense(self, images):
        return self.projection(self.featurizer(images - 0.5).permute(0, 2, 3, 1))

    def patch_embeddings(self, images):
        self.calls += 1
        with torch.no_grad():
            return self._dense(images)

    def summary_token(self, images):
        self.calls += 1
        with torch.no_grad():
            thumb = F.adaptive_avg_pool2d(images, self.patch)
            return self._dense(thumb)[:, 0, 0]

    def _canonical_embedding(self, shape, color):
        key = (shape, color)
        if key not in self._canonical:
            img = torch.as_tensor(self._render(shape, color), dtype=torch.float32).permute(2, 0, 1)[None]
            dense = self._dense(img)[0]  # (2, 2, d_t): the instance straddles all four patches
            self._canonical[key] = dense.mean(dim=(0, 1))
        return self._canonical[key]

    def _prompt_noise(self, prompt):
        digest = hashlib.sha256(prompt.encode()).digest()
        g = torch.Generator().manual_seed(int.from_bytes(digest[:8], "little") ^ self.seed)
        return torch.randn(self.dim, generator=g)

    def encode_text(self, prompts):
        self.calls += 1
        rows = []
        with torch.no_grad():
            for p in prompts:
                words = set(re.findall(r"[a-z]+", p.lower()))
                shape = next((s for s in self.shapes if s in words), None)
                color = next((c for c in self.colors if c in words), None)
                noise = self._prompt_noise(p)
                if shape is not None and color is not None:
                    e = self._canonical_embedding(shape, color)
                    e = e / e.norm() + self.prompt_noise * noise / noise.norm()
                else:
                    e = noise
                rows.append(e / e.norm())
        return torch.stack(rows)


class CLIPTeacher(TeacherHandle):
    """Adapter for a Hugging Face CLIP checkpoint with the dense value-path
    reformulation: the last block's query/key path is dropped and each patch
    token is passed through value and output projections only."""

    def __init__(self, checkpoint):
        super().__init__()
        try:
            from transformers import CLIPModel, CLIPTokenizer
        except ImportError as exc:  # pragma: no cover
            raise TeacherUnavailable(str(exc)) from exc
        try:
            self.model = CLIPModel.from_pretrained(checkpoint)
            self.tokenizer = CLIPTokenizer.from_pretrained(checkpoint)
        except OSError as exc:
            raise TeacherUnavailable(f"cannot load CLIP checkpoint {checkpoint!r}: {exc}") from exc
        self.model.requires_grad_(False).eval()
        self.dim = self.model.config.projection_dim
        cfg = self.model.config.vision_config
        self.input_size = cfg.image_size
        self.register_buffer("mean", torch.tensor([0.4815, 0.4578, 0.4082]).view(1, 3, 1, 1))
        self.register_buffer("std", torch.tensor([0.2686, 0.2613, 0.2758]).view(1, 3, 1, 1))

    def _tokens(self, images):
        x = F.interpolate(images, size=(self.input_size, self.input_size), mode="bilinear", align_corners=False)
        vm = self.model.vision_model
        out = vm(pixel_values=(x - self.mean) / self.std, output_hidden_states=True)
        return vm, out

    def patch_embeddings(self, images):
        self.calls += 1
        with torch.no_grad():
            vm, out = self._tokens(images)
            x = out.hidden_states[-2]
            last = vm.encoder.layers[-1]
            attn = last.self_attn
            v = attn.out_proj(attn.v_proj(last.layer_norm1(x)))
            x = x + v
            x = x + last.mlp(last.layer_norm2(x))
            x = self.model.visual_projection(vm.post_layernorm(x[:, 1:]))
            side = int(round(x.shape[1] ** 0.5))
            return x.view(x.shape[0], side, side, -1)

    def summary_token(self, images):
        self.calls += 1
        with torch.no_grad():
            _, out = self._tokens(images)
            return self.model.visual_projection(out.pooler_output)

    def encode_text(self, prompts):
        self.calls += 1
        with torch.no_grad():
            tok = self.tokenizer(list(prompts), padding=True, return_tensors="pt")
            return F.normalize(self.model.get_text_features(**tok), dim=-1)


def load_teacher(kind="toy", checkpoint=None, **kw):
    if kind == "toy":
        return ToyTeacher(**kw)
    if kind == "real":
        if checkpoint is None:
            raise TeacherUnavailable("real teacher requested without a checkpoint path")
        return CLIPTeacher(checkpoint)
    raise ValueError(f"unknown teacher kind {kind!r}")


# ---------------------------------------------------------------------------


def mask_pool(embeddings, mask, threshold=0.5):
    """Mask-weighted mean of (..., h, w, d) embeddings over cells with mask >= threshold.

    Falls back to the mask-weighted mean over all cells if nothing passes the
    threshold, and to a plain mean for an all-zero mask.
    """
    mask = torch.as_tensor(mask, dtype=embeddings.dtype)
    w = mask * (mask >= threshold)
    s = w.sum(dim=(-2, -1), keepdim=True)
    w = torch.where(s > 0, w, mask)
    s = w.sum(dim=(-2, -1), keepdim=True)
    w = torch.where(s > 0, w, torch.ones_like(w))
    w = w / w.sum(dim=(-2, -1), keepdim=True)
    return (w[..., None] * embeddings).sum(dim=(-3, -2))


def text_representation(prompt_set, teacher):
    prompts = prompt_set.prompts if hasattr(prompt_set, "prompts") else prompt_set
    if len(prompts) == 0:
        raise ValueError("empty prompt set")
    return F.normalize(teacher.encode_text(list(prompts)).mean(0), dim=0)


def dense_mask(images, text_reps, teacher, embeddings=None):
    """Per-cell similarity to the category text embedding, min-max scaled to [0, 1].

    ``text_reps`` is (B, d_t); a flat similarity map becomes all ones.
    """
    if embeddings is None:
        embeddings = teacher.patch_embeddings(images)
    sim = torch.einsum("bhwd,bd->bhw", embeddings, text_reps.to(embeddings.dtype))
    lo = sim.amin(dim=(1, 2), keepdim=True)
    hi = sim.amax(dim=(1, 2), keepdim=True)
    span = hi - lo
    flat = span <= 1e-8 * (1 + hi.abs())
    return torch.where(flat, torch.ones_like(sim), (sim - lo) / torch.where(flat, torch.ones_like(span), span))


class TeacherTargets:
    """Computes (r_v, r_l) per sample, memoised on image content + category."""

    def __init__(self, teacher, prompt_sets, variant="mask-pool", threshold=0.5, memo_dir=None):
        if variant not in VISION_VARIANTS:
            raise ValueError(f"vision variant must be one of {VISION_VARIANTS}")
        self.teacher = teacher
        self.prompt_sets = prompt_sets
        self.variant = variant
        self.threshold = threshold
        self.memo = {}
        self.memo_dir = Path(memo_dir) if memo_dir else None
        self._text = {}

    def text(self, category):
        if category not in self._text:
            self._text[category] = text_representation(self.prompt_sets[category], self.teacher)
        return self._text[category]

    def _key(self, image, category):
        h = hashlib.sha256(np.ascontiguousarray(image.detach().cpu().numpy(), dtype=np.float32).tobytes())
        h.update(category.encode())
        h.update(self.variant.encode())
        return h.hexdigest()

    def __call__(self, images, categories):
        """images (B, 3, H, W) float, categories list of str -> r_v, r_l (B, d_t)."""
        keys = [self._key(im, c) for im, c in zip(images, categories)]
        todo = [i for i, k in enumerate(keys) if k not in self.memo and not self._load(k)]
        if todo:
            imgs = images[todo].float()
            r_l = torch.stack([self.text(categories[i]) for i in todo])
            if self.variant == "class-token":
                r_v = self.teacher.summary_token(imgs)
            else:
                emb = self.teacher.patch_embeddings(imgs)
                if self.variant == "global-pool":
                    r_v = emb.mean(dim=(1, 2))
                else:
                    r_v = mask_pool(emb, dense_mask(imgs, r_l, self.teacher, emb), self.threshold)
            for j, i in enumerate(todo):
                self.memo[keys[i]] = (r_v[j].clone(), r_l[j].clone())
                self._store(keys[i])
        r_v = torch.stack([self.memo[k][0] for k in keys]).to(images.dtype)
        r_l = torch.stack([self.memo[k][1] for k in keys]).to(images.dtype)
        return r_v, r_l

    # memo file: b"URMT" | u16 version | u32 d_t | 2*d_t float32 little-endian (r_v then r_l)
    _HEADER = struct.Struct("<4sHI")

    def _store(self, key):
        if self.memo_dir is None:
            return
        self.memo_dir.mkdir(parents=True, exist_ok=True)
        r_v, r_l = self.memo[key]
        payload = torch.cat([r_v, r_l]).float().numpy().astype("<f4").tobytes()
        (self.memo_dir / key).write_bytes(self._HEADER.pack(b"URMT", 1, r_v.numel()) + payload)

    def _load(self, key):
        if self.memo_dir is None or not (self.memo_dir / key).exists():
            return False
        raw = (self.memo_dir / key).read_bytes()
        magic, version, d = self._HEADER.unpack_from(raw)
        if magic != b"URMT" or version != 1:
            return False
        arr = torch.from_numpy(np.frombuffer(raw, dtype="<f4", offset=self._HEADER.size).copy())
        self.memo[key] = (arr[:d], arr[d:])
        return True
