"""The URM student: prompt-encoded image feature, universal vision/language
prototypes, cross-attention matching and density regression."""

import hashlib
import json
import math
from dataclasses import asdict, dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .attention import CrossAttentionBlock
from .backbone import FeatureExtractor, ResNetBackbone, ToyBackbone
from .prompt_encoder import PromptEncoder


class ModeError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 512
    grid: int = 64
    d: int = 256
    d_t: int = 512
    heads: int = 4
    ffn_expansion: int = 4
    n_prototypes: int = 3
    n1: int = 3
    n2: int = 3
    prompt_layers: int = 2
    zero_shot_tokens: int = 3
    head_channels: tuple = (128, 64, 32)
    combine: str = "sum"
    shared_kd_projection: bool = True
    backbone: str = "resnet50"
    backbone_weights: str | None = None
    toy_channels: tuple = (16, 32, 64)
    seed: int = 0

    @classmethod
    def toy(cls, **kw):
        base = dict(image_size=64, grid=8, d=16, d_t=32, heads=2, backbone="toy", prompt_layers=1)
        base.update(kw)
        return cls(**base)

    def to_json(self):
        return asdict(self)

    @classmethod
    def from_json(cls, d):
        d = dict(d)
        d["head_channels"] = tuple(d["head_channels"])
        d["toy_channels"] = tuple(d["toy_channels"])
        return cls(**d)

    def hash(self):
        return hashlib.sha256(json.dumps(self.to_json(), sort_keys=True).encode()).hexdigest()[:16]


class RegressionHead(nn.Module):
    """(conv3x3 -> LeakyReLU -> 2x bilinear) per stage, then a 1x1 linear map, clamped at zero."""

    def __init__(self, d, channels=(128, 64, 32)):
        super().__init__()
        layers = []
        cin = d
        for c in channels:
            layers += [nn.Conv2d(cin, c, 3, padding=1), nn.LeakyReLU(0.01), nn.Upsample(scale_factor=2, mode="bilinear", align_corners=False)]
            cin = c
        self.body = nn.Sequential(*layers)
        self.out = nn.Conv2d(cin, 1, 1)
        # start strictly inside the live region of the final clamp
        nn.init.zeros_(self.out.weight)
        nn.init.constant_(self.out.bias, 1e-3)

    def forward(self, x):
        """x: (B, d, h, w) -> (B, 2^k h, 2^k w) nonnegative."""
        return F.relu(self.out(self.body(x))).squeeze(1)


class URM(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        if 2 ** len(cfg.head_channels) * cfg.grid != cfg.image_size:
            raise ValueError("head must upsample the grid back to the image size (one 2x stage per channel entry)")
        self.cfg = cfg
        torch.manual_seed(cfg.seed)
        if cfg.backbone == "toy":
            net = ToyBackbone(cfg.toy_channels, seed=cfg.seed)
        elif cfg.backbone == "resnet50":
            net = ResNetBackbone(cfg.backbone_weights)
        else:
            raise ValueError(f"unknown backbone {cfg.backbone!r}")
        d = cfg.d
        self.features = FeatureExtractor(net, grid=cfg.grid, d=d)
        self.prompt_encoder = PromptEncoder(
            d, cfg.prompt_layers, cfg.heads, cfg.ffn_expansion, cfg.zero_shot_tokens, cfg.combine
        )
        self.p_v = nn.Parameter(torch.randn(cfg.n_prototypes, d) * 0.02)
        self.p_l = nn.Parameter(torch.randn(cfg.n_prototypes, d) * 0.02)
        self.update_layers = nn.ModuleList([CrossAttentionBlock(d, cfg.heads, cfg.ffn_expansion) for _ in range(cfg.n1)])
        self.match_layers = nn.ModuleList([CrossAttentionBlock(d, cfg.heads, cfg.ffn_expansion) for _ in range(cfg.n2)])
        self.kd_proj_v = nn.Linear(d, cfg.d_t)
        self.kd_proj_l = self.kd_proj_v if cfg.shared_kd_projection else nn.Linear(d, cfg.d_t)
        self.head = RegressionHead(d, cfg.head_channels)

    # -- building blocks -------------------------------------------------

    def update_prototypes(self, p, fE):
        """p: (B, n, d) queries, fE: (B, hw, d) keys/values; same stack for both branches."""
        if p.shape[-1] != fE.shape[-1]:
            raise ValueError(f"prototype width {p.shape[-1]} != feature width {fE.shape[-1]}")
        for blk in self.update_layers:
            p = blk(p, fE)
        return p

    def kd_project(self, p, branch="v"):
        return (self.kd_proj_v if branch == "v" else self.kd_proj_l)(p)

    def match(self, fE, p_v, p_l):
        protos = torch.cat([p_v, p_l], dim=1)
        if protos.shape[-1] != fE.shape[-1]:
            raise ValueError("prototype and feature widths differ")
        x = fE
        for blk in self.match_layers:
            x = blk(x, protos)
        return x

    def regress(self, corr):
        B, hw, d = corr.shape
        g = int(math.isqrt(hw))
        if g * g != hw:
            raise ValueError(f"{hw} cells do not form a square grid")
        return self.head(corr.transpose(1, 2).reshape(B, d, g, g))

    # -- full pipeline -----------------------------------------------------

    def initial_prototypes(self, batch):
        return self.p_v.unsqueeze(0).expand(batch, -1, -1), self.p_l.unsqueeze(0).expand(batch, -1, -1)

    def forward(self, images, boxes=None, mode="few-shot"):
        """images (B, 3, H, W); boxes (B, n, 4) in pixels, required for few-shot.

        Returns a dict with ``density`` (B, H, W), ``count`` (B,), the final
        prototypes, their projections averaged over rows (``proj_v``/``proj_l``,
        (B, d_t)) and the intermediate features.
        """
        if mode not in ("few-shot", "zero-shot"):
            raise ModeError(f"unknown mode {mode!r}")
        if mode == "few-shot" and (boxes is None or boxes.shape[1] == 0):
            raise ModeError("few-shot mode needs at least one exemplar box")
        B = images.shape[0]
        f = self.features(images)
        fE = self.prompt_encoder(f, boxes if mode == "few-shot" else None, self.cfg.image_size)
        p_v, p_l = self.initial_prototypes(B)
        p_v = self.update_prototypes(p_v.to(fE.dtype), fE)
        p_l = self.update_prototypes(p_l.to(fE.dtype), fE)
        corr = self.match(fE, p_v, p_l)
        density = self.regress(corr)
        return {
            "density": density,
            "count": density.sum(dim=(-2, -1)),
            "p_v": p_v,
            "p_l": p_l,
            "proj_v": self.kd_project(p_v.mean(1), "v"),
            "proj_l": self.kd_project(p_l.mean(1), "l"),
            "f": f,
            "fE": fE,
            "corr": corr,
        }

    def trainable_parameters(self):
        return [p for p in self.parameters() if p.requires_grad]
