"""Residual attention blocks shared by the prompt encoder and the URM head.

Output projections start at zero, so every block is the identity at
initialisation.
"""

import torch
import torch.nn as nn


class MultiHeadAttention(nn.Module):
    def __init__(self, d, heads):
        super().__init__()
        if d % heads:
            raise ValueError(f"d={d} is not divisible by {heads} heads")
        self.heads = heads
        self.q = nn.Linear(d, d)
        self.k = nn.Linear(d, d)
        self.v = nn.Linear(d, d)
        self.out = nn.Linear(d, d)
        nn.init.zeros_(self.out.weight)
        nn.init.zeros_(self.out.bias)

    def forward(self, q, k, v):
        B, Nq, d = q.shape
        h = self.heads

        def split(x):
            return x.view(B, -1, h, d // h).transpose(1, 2)

        q, k, v = split(self.q(q)), split(self.k(k)), split(self.v(v))
        attn = torch.softmax(q @ k.transpose(-2, -1) / (d // h) ** 0.5, dim=-1)
        y = (attn @ v).transpose(1, 2).reshape(B, Nq, d)
        return self.out(y)


class FeedForward(nn.Module):
    def __init__(self, d, expansion=4):
        super().__init__()
        self.norm = nn.LayerNorm(d)
        self.fc1 = nn.Linear(d, d * expansion)
        self.fc2 = nn.Linear(d * expansion, d)
        nn.init.zeros_(self.fc2.weight)
        nn.init.zeros_(self.fc2.bias)

    def forward(self, x):
        return x + self.fc2(torch.relu(self.fc1(self.norm(x))))


class CrossAttentionBlock(nn.Module):
    """Pre-norm residual cross attention (query stream attends to context) + FFN."""

    def __init__(self, d, heads=4, expansion=4, ffn=True):
        super().__init__()
        self.norm_q = nn.LayerNorm(d)
        self.norm_kv = nn.LayerNorm(d)
        self.attn = MultiHeadAttention(d, heads)
        self.ffn = FeedForward(d, expansion) if ffn else nn.Identity()

    def forward(self, x, context):
        kv = self.norm_kv(context)
        x = x + self.attn(self.norm_q(x), kv, kv)
        return self.ffn(x)


class TwoWayBlock(nn.Module):
    """Token self-attention, token->image, token FFN, image->token."""

    def __init__(self, d, heads=4, expansion=4):
        super().__init__()
        self.norm_self = nn.LayerNorm(d)
        self.self_attn = MultiHeadAttention(d, heads)
        self.norm_t2i_q = nn.LayerNorm(d)
        self.norm_t2i_kv = nn.LayerNorm(d)
        self.t2i = MultiHeadAttention(d, heads)
        self.ffn = FeedForward(d, expansion)
        self.norm_i2t_q = nn.LayerNorm(d)
        self.norm_i2t_kv = nn.LayerNorm(d)
        self.i2t = MultiHeadAttention(d, heads)

    def forward(self, tokens, image):
        t = self.norm_self(tokens)
        tokens = tokens + self.self_attn(t, t, t)
        kv = self.norm_t2i_kv(image)
        tokens = tokens + self.t2i(self.norm_t2i_q(tokens), kv, kv)
        tokens = self.ffn(tokens)
        kv = self.norm_i2t_kv(tokens)
        image = image + self.i2t(self.norm_i2t_q(image), kv, kv)
        return tokens, image
