"""Exemplar prompt encoding into the image feature via two-way attention."""

import torch
import torch.nn as nn

from .attention import TwoWayBlock


class ShapeEmbedding(nn.Module):
    """Box (width, height), normalised by image size -> d, three linear layers with ReLU."""

    def __init__(self, d, hidden=None):
        super().__init__()
        hidden = hidden or d
        self.mlp = nn.Sequential(
            nn.Linear(2, hidden), nn.ReLU(), nn.Linear(hidden, hidden), nn.ReLU(), nn.Linear(hidden, d)
        )

    def forward(self, boxes, image_size):
        wh = torch.stack([boxes[..., 2] - boxes[..., 0], boxes[..., 3] - boxes[..., 1]], dim=-1)
        if (wh <= 0).any():
            raise ValueError("exemplar box with zero area")
        return self.mlp(wh / image_size)


def roi_cells(boxes, stride, grid):
    """Integer grid-cell spans (c0, c1, r0, r1), end-exclusive, for each box.

    A box that covers no cell centre collapses to the single cell containing
    its centre.
    """
    b = boxes / stride
    c0 = torch.floor(b[..., 0]).long().clamp(0, grid - 1)
    r0 = torch.floor(b[..., 1]).long().clamp(0, grid - 1)
    c1 = torch.ceil(b[..., 2]).long().clamp(0, grid)
    r1 = torch.ceil(b[..., 3]).long().clamp(0, grid)
    cx = torch.floor((b[..., 0] + b[..., 2]) / 2).long().clamp(0, grid - 1)
    cy = torch.floor((b[..., 1] + b[..., 3]) / 2).long().clamp(0, grid - 1)
    empty_c = c1 <= c0
    empty_r = r1 <= r0
    c0 = torch.where(empty_c, cx, c0)
    c1 = torch.where(empty_c, cx + 1, c1)
    r0 = torch.where(empty_r, cy, r0)
    r1 = torch.where(empty_r, cy + 1, r1)
    return c0, c1, r0, r1


def roi_average(f, boxes, stride):
    """Average-pool f (B, d, h, w) inside each box (B, n, 4) -> (B, n, d)."""
    B, d, h, w = f.shape
    c0, c1, r0, r1 = roi_cells(boxes, stride, h)
    cols = torch.arange(w, device=f.device)
    rows = torch.arange(h, device=f.device)
    in_c = (cols >= c0[..., None]) & (cols < c1[..., None])  # (B, n, w)
    in_r = (rows >= r0[..., None]) & (rows < r1[..., None])  # (B, n, h)
    weight = (in_r[..., :, None] & in_c[..., None, :]).to(f.dtype).flatten(2)  # (B, n, hw)
    weight = weight / weight.sum(-1, keepdim=True)
    return weight @ f.flatten(2).transpose(1, 2)


class PromptEncoder(nn.Module):
    def __init__(self, d, layers=1, heads=4, expansion=4, zero_shot_tokens=3, combine="sum"):
        super().__init__()
        if combine not in ("sum", "concat"):
            raise ValueError(f"combine must be 'sum' or 'concat', got {combine!r}")
        self.d = d
        self.combine = combine
        self.shape_embed = ShapeEmbedding(d)
        self.appearance = nn.Linear(d, d)
        # one group embedding shared by every exemplar slot, so slot order is irrelevant
        self.group = nn.Parameter(torch.randn(1, d) * 0.02)
        self.zero_shot = nn.Parameter(torch.randn(zero_shot_tokens, d) * 0.02)
        self.fuse = nn.Linear(3 * d, d) if combine == "concat" else None
        self.blocks = nn.ModuleList([TwoWayBlock(d, heads, expansion) for _ in range(layers)])

    def roi_appearance(self, f, boxes, stride):
        return self.appearance(roi_average(f, boxes, stride))

    def exemplar_tokens(self, f, boxes, image_size):
        stride = image_size / f.shape[-1]
        shape = self.shape_embed(boxes, image_size)
        group = self.group.expand_as(shape)
        app = self.roi_appearance(f, boxes, stride)
        if self.combine == "concat":
            return self.fuse(torch.cat([shape, group, app], dim=-1))
        return shape + group + app

    def zero_shot_tokens(self, batch=1):
        return self.zero_shot.unsqueeze(0).expand(batch, -1, -1)

    def encode(self, f, tokens):
        """f: (B, d, h, w), tokens: (B, n, d) -> f^E: (B, h*w, d)."""
        if tokens.shape[-1] != f.shape[1]:
            raise ValueError(f"token width {tokens.shape[-1]} != feature width {f.shape[1]}")
        image = f.flatten(2).transpose(1, 2)
        if tokens.shape[1] == 0:
            return image
        for blk in self.blocks:
            tokens, image = blk(tokens, image)
        return image

    def forward(self, f, boxes=None, image_size=None):
        if boxes is None:
            tokens = self.zero_shot_tokens(f.shape[0]).to(f.dtype)
        else:
            tokens = self.exemplar_tokens(f, boxes, image_size)
        return self.encode(f, tokens)
