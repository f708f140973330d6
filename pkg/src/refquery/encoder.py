"""Cross-modal encoder: multi-scale visual self-attention plus image/text fusion."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import nn
from . import tensor as T
from .tensor import Tensor


class NumericError(ArithmeticError):
    pass


@dataclass
class EncoderConfig:
    num_layers: int = 6
    heads: int = 4
    C: int = 64
    points: int = 4
    mode: str = "deformable"
    ffn_mult: int = 4

    def check(self):
        if self.num_layers < 1:
            raise nn.ConfigError("encoder needs at least one layer")
        if self.C % self.heads:
            raise nn.ConfigError(f"C={self.C} not divisible by heads={self.heads}")
        if self.mode not in ("deformable", "dense"):
            raise nn.ConfigError(f"unknown fusion mode {self.mode!r}")
        if self.points < 1:
            raise nn.ConfigError("deformable attention needs at least one point per scale")


@dataclass
class FusedFeatures:
    visual: list[Tensor]       # per scale (T, H_l, W_l, C)
    tokens: Tensor             # (N_t, C)
    sentence: Tensor           # (C,)

    @property
    def shapes(self) -> list[tuple[int, int]]:
        return [(v.shape[1], v.shape[2]) for v in self.visual]

    def flat(self) -> Tensor:
        """All scales flattened and concatenated per frame: (T, S, C)."""
        t, c = self.visual[0].shape[0], self.visual[0].shape[-1]
        return T.concat([v.reshape(t, -1, c) for v in self.visual], axis=1)


def flatten_levels(visual: list[Tensor]) -> Tensor:
    t, c = visual[0].shape[0], visual[0].shape[-1]
    return T.concat([v.reshape(t, -1, c) for v in visual], axis=1)


def unflatten_levels(flat: Tensor, shapes) -> list[Tensor]:
    out, start = [], 0
    t, _, c = flat.shape
    for h, w in shapes:
        out.append(flat[:, start:start + h * w].reshape(t, h, w, c))
        start += h * w
    return out


def reference_points(shapes) -> np.ndarray:
    """Normalized (x, y) pixel-center coordinates of every token, level by level."""
    pts = []
    for h, w in shapes:
        ys, xs = np.mgrid[0:h, 0:w]
        pts.append(np.stack([(xs.ravel() + 0.5) / w, (ys.ravel() + 0.5) / h], axis=1))
    return np.concatenate(pts, axis=0)


def sine_position(shapes, dim: int) -> np.ndarray:
    """Fixed 2-D sinusoidal encoding of token positions, (S, dim)."""
    ref = reference_points(shapes)
    quarter = max(dim // 4, 1)
    freq = 1.0 / (100.0 ** (np.arange(quarter) / quarter))
    parts = []
    for axis in (1, 0):
        ang = ref[:, axis:axis + 1] * 2 * math.pi * freq
        parts += [np.sin(ang), np.cos(ang)]
    enc = np.concatenate(parts, axis=1)
    out = np.zeros((ref.shape[0], dim))
    out[:, : min(dim, enc.shape[1])] = enc[:, :dim]
    return out


class DeformableSelfAttention(nn.Module):
    """Each token attends to K learned sample points per scale and head."""

    def __init__(self, rng, dim: int, heads: int, levels: int, points: int):
        self.heads, self.levels, self.points = heads, levels, points
        self.norm = nn.LayerNorm(dim)
        self.value_proj = nn.Linear(rng, dim, dim)
        self.offset_proj = nn.Linear(rng, dim, heads * levels * points * 2)
        self.weight_proj = nn.Linear(rng, dim, heads * levels * points)
        self.out_proj = nn.Linear(rng, dim, dim)
        # start from a fan of directions per head, growing with point index
        self.offset_proj.weight.data[...] = 0
        ang = np.arange(heads) * 2 * math.pi / heads
        grid = np.stack([np.cos(ang), np.sin(ang)], axis=1)
        grid = grid / np.abs(grid).max(axis=1, keepdims=True)
        bias = np.tile(grid[:, None, None, :], (1, levels, points, 1))
        bias *= np.arange(1, points + 1)[None, None, :, None]
        self.offset_proj.bias.data[...] = bias.reshape(-1)
        self.weight_proj.weight.data[...] = 0
        self.weight_proj.bias.data[...] = 0

    def sample_locations(self, query: Tensor, shapes) -> Tensor:
        t, s, _ = query.shape
        h, lv, k = self.heads, self.levels, self.points
        off = self.offset_proj(query).reshape(t, s, h, lv, k, 2)
        norm = np.array([[w, hh] for hh, w in shapes], dtype=np.float64)[:, None, :]   # (L, 1, 2)
        ref = reference_points(shapes)[:, None, None, None, :]                         # (S, 1, 1, 1, 2)
        loc = off * T.tensor(1.0 / norm) + T.tensor(ref)
        return loc

    def __call__(self, x: Tensor, shapes, pos: Tensor) -> Tensor:
        t, s, c = x.shape
        h, lv, k = self.heads, self.levels, self.points
        d = c // h
        hx = self.norm(x)
        query = hx + pos
        value = self.value_proj(hx).reshape(t, s, h, d)
        value = T.transpose(value, (0, 2, 1, 3)).reshape(t * h, s, d)
        loc = self.sample_locations(query, shapes)                             # (T, S, H, L, K, 2)
        loc = T.transpose(loc, (0, 2, 1, 3, 4, 5)).reshape(t * h, s, lv * k, 2)
        weights = T.softmax(self.weight_proj(query).reshape(t, s, h, lv * k), axis=-1)
        weights = T.transpose(weights, (0, 2, 1, 3)).reshape(t * h, s, lv * k, 1)
        level_of_point = np.repeat(np.arange(lv), k)
        sampled = T.bilinear_sample(value, shapes, loc, level_of_point)       # (T*H, S, L*K, d)
        out = (sampled * weights).sum(axis=2).reshape(t, h, s, d)
        out = T.transpose(out, (0, 2, 1, 3)).reshape(t, s, c)
        return x + self.out_proj(out)


class DenseSelfAttention(nn.Module):
    def __init__(self, rng, dim: int, heads: int):
        self.block = nn.CrossAttentionBlock(rng, dim, heads)

    def __call__(self, x: Tensor, shapes, pos: Tensor) -> Tensor:
        return self.block(x, query_pos=pos, key_pos=pos)


class EncoderLayer(nn.Module):
    def __init__(self, rng, cfg: EncoderConfig, levels: int):
        c = cfg.C
        if cfg.mode == "deformable":
            self.self_attn = DeformableSelfAttention(rng, c, cfg.heads, levels, cfg.points)
        else:
            self.self_attn = DenseSelfAttention(rng, c, cfg.heads)
        self.image_from_text = nn.CrossAttentionBlock(rng, c, cfg.heads)
        self.text_norm = nn.LayerNorm(c)
        self.text_from_image = nn.MultiHeadAttention(rng, c, cfg.heads)
        self.visual_ffn = nn.FFNBlock(rng, c, cfg.ffn_mult * c)
        self.text_ffn = nn.FFNBlock(rng, c, cfg.ffn_mult * c)

    def __call__(self, vis: Tensor, txt: Tensor, shapes, pos: Tensor):
        vis = self.self_attn(vis, shapes, pos)
        vis = self.image_from_text(vis, memory=txt)
        # one text stream attends to every frame; frame-wise results are averaged
        ht = self.text_norm(txt)
        txt = txt + self.text_from_image(ht, vis, vis).mean(axis=0)
        return self.visual_ffn(vis), self.text_ffn(txt)


class CrossModalEncoder(nn.Module):
    def __init__(self, rng: np.random.Generator, cfg: EncoderConfig, in_channels, text_channels: int):
        cfg.check()
        self.cfg = cfg
        self.input_proj = [nn.Linear(rng, ci, cfg.C) for ci in in_channels]
        self.text_proj = nn.Linear(rng, text_channels, cfg.C)
        self.level_embed = nn.param(rng.normal(scale=0.1, size=(len(in_channels), cfg.C)))
        self.layers = [EncoderLayer(rng, cfg, len(in_channels)) for _ in range(cfg.num_layers)]

    def positions(self, shapes) -> Tensor:
        pos = T.tensor(sine_position(shapes, self.cfg.C))
        sizes = [h * w for h, w in shapes]
        lvl = T.take(self.level_embed, np.repeat(np.arange(len(shapes)), sizes), axis=0)
        return pos + lvl

    def __call__(self, visual: list[Tensor], text_tokens: Tensor) -> FusedFeatures:
        if len(visual) != len(self.input_proj):
            raise nn.ShapeError(f"encoder built for {len(self.input_proj)} scales, got {len(visual)}")
        shapes = [(v.shape[1], v.shape[2]) for v in visual]
        proj = [p(v) for p, v in zip(self.input_proj, visual)]
        vis = flatten_levels(proj)
        txt = self.text_proj(text_tokens)
        pos = self.positions(shapes)
        for i, layer in enumerate(self.layers):
            vis, txt = layer(vis, txt, shapes, pos)
            if not (np.isfinite(vis.data).all() and np.isfinite(txt.data).all()):
                raise NumericError(f"non-finite values after encoder layer {i}")
        return FusedFeatures(unflatten_levels(vis, shapes), txt, txt.mean(axis=0))


def encode(clip, encoder: CrossModalEncoder) -> FusedFeatures:
    """Fuse a :class:`~refquery.data.FeatureClip`'s backbone features."""
    return encoder([T.tensor(v) for v in clip.visual], T.tensor(clip.text_tokens))
