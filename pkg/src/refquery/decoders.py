"""Frame query decoder, video query decoder, and the mask/referral heads."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from . import tensor as T
from .encoder import FusedFeatures, NumericError
from .tensor import Tensor


@dataclass
class FrameDecoderConfig:
    num_layers: int = 9
    N_f: int = 20
    heads: int = 4
    C: int = 64
    ffn_mult: int = 4

    def check(self):
        if self.N_f < 1 or self.num_layers < 1:
            raise nn.ConfigError("frame decoder needs N_f >= 1 and num_layers >= 1")
        if self.C % self.heads:
            raise nn.ConfigError(f"C={self.C} not divisible by heads={self.heads}")


@dataclass
class VideoDecoderConfig:
    num_layers: int = 6
    N_v: int = 20
    heads: int = 4
    C: int = 64
    ffn_mult: int = 4

    def check(self):
        if self.N_v < 1 or self.num_layers < 1:
            raise nn.ConfigError("video decoder needs N_v >= 1 and num_layers >= 1")
        if self.C % self.heads:
            raise nn.ConfigError(f"C={self.C} not divisible by heads={self.heads}")


class QueryLayer(nn.Module):
    """text cross-attn -> memory cross-attn -> self-attn -> FFN, pre-norm residual."""

    def __init__(self, rng, dim: int, heads: int, ffn_mult: int):
        self.text_attn = nn.CrossAttentionBlock(rng, dim, heads)
        self.memory_attn = nn.CrossAttentionBlock(rng, dim, heads)
        self.self_attn = nn.CrossAttentionBlock(rng, dim, heads)
        self.ffn = nn.FFNBlock(rng, dim, ffn_mult * dim)

    def __call__(self, q: Tensor, text: Tensor, memory: Tensor) -> Tensor:
        q = self.text_attn(q, memory=text)
        q = self.memory_attn(q, memory=memory)
        q = self.self_attn(q)
        return self.ffn(q)


class FrameQueryDecoder(nn.Module):
    def __init__(self, rng: np.random.Generator, cfg: FrameDecoderConfig):
        cfg.check()
        self.cfg = cfg
        self.query_embed = nn.param(rng.normal(scale=1.0, size=(cfg.N_f, cfg.C)))
        self.text_init = nn.Linear(rng, cfg.C, cfg.C, bias=False)
        self.layers = [QueryLayer(rng, cfg.C, cfg.heads, cfg.ffn_mult) for _ in range(cfg.num_layers)]

    def init_queries(self, sentence: Tensor) -> Tensor:
        """Learned per-slot embedding plus a projection of the sentence feature: (N_f, C)."""
        return self.query_embed + self.text_init(sentence)

    def __call__(self, fused: FusedFeatures) -> Tensor:
        """Decode every frame independently; returns Q_f with shape (T, N_f, C)."""
        image = fused.flat()                                   # (T, S, C)
        t = image.shape[0]
        q = self.init_queries(fused.sentence) + T.tensor(np.zeros((t, 1, 1)))
        for i, layer in enumerate(self.layers):
            q = layer(q, fused.tokens, image)
            if not np.isfinite(q.data).all():
                bad = sorted({int(f) for f in np.argwhere(~np.isfinite(q.data))[:, 0]})
                raise NumericError(f"non-finite frame queries at frame {bad[0]}, layer {i}")
        return q


def init_frame_queries(sentence: Tensor, decoder: FrameQueryDecoder) -> Tensor:
    return decoder.init_queries(sentence)


def decode_frames(fused: FusedFeatures, decoder: FrameQueryDecoder) -> Tensor:
    return decoder(fused)


class VideoQueryDecoder(nn.Module):
    def __init__(self, rng: np.random.Generator, cfg: VideoDecoderConfig):
        cfg.check()
        self.cfg = cfg
        self.layers = [QueryLayer(rng, cfg.C, cfg.heads, cfg.ffn_mult) for _ in range(cfg.num_layers)]

    def __call__(self, video_queries: Tensor, frame_queries: Tensor, text: Tensor) -> Tensor:
        """Refine (N_v, C) video queries against text tokens and all T*N_f frame queries."""
        t, n, c = frame_queries.shape
        memory = frame_queries.reshape(t * n, c)
        q = video_queries
        for i, layer in enumerate(self.layers):
            q = layer(q, text, memory)
            if not np.isfinite(q.data).all():
                raise NumericError(f"non-finite video queries after layer {i}")
        return q


# ----------------------------------------------------------------------- heads


@dataclass
class QueryEmbeddings:
    queries: Tensor          # refined queries, (N, C) or (T, N, C)
    mask_embed: Tensor       # same shape as queries
    score_logits: Tensor     # (N,) or (T, N)


class MaskHead(nn.Module):
    """Maps refined queries to mask embeddings and referral logits."""

    def __init__(self, rng, dim: int):
        self.norm = nn.LayerNorm(dim)
        self.mask_proj = nn.Linear(rng, dim, dim)
        self.score = nn.Linear(rng, dim, 1)

    def __call__(self, queries: Tensor) -> QueryEmbeddings:
        h = self.norm(queries)
        logits = self.score(h)
        return QueryEmbeddings(queries, self.mask_proj(h), logits.reshape(logits.shape[:-1]))


@dataclass
class MaskPrediction:
    logits: np.ndarray            # (N, T, H, W) mask logits
    score_logits: np.ndarray      # (N,)

    @property
    def soft_masks(self) -> np.ndarray:
        return _sigmoid(self.logits)

    @property
    def referral_scores(self) -> np.ndarray:
        return _sigmoid(self.score_logits)

    @classmethod
    def from_probabilities(cls, soft_masks, scores) -> "MaskPrediction":
        eps = 1e-7
        p = np.clip(np.asarray(soft_masks, dtype=np.float64), eps, 1 - eps)
        s = np.clip(np.asarray(scores, dtype=np.float64), eps, 1 - eps)
        return cls(np.log(p / (1 - p)), np.log(s / (1 - s)))


def _sigmoid(x):
    x = np.asarray(x)
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1 / (1 + e), e / (1 + e))


def mask_logits(mask_embed: Tensor, features: Tensor) -> Tensor:
    """Dot product of (N, C) embeddings with (T, H, W, C) features -> (N, T, H, W)."""
    t, h, w, c = features.shape
    flat = features.reshape(t * h * w, c)
    out = T.matmul(mask_embed, T.transpose(flat, (1, 0)))
    return out.reshape(mask_embed.shape[0], t, h, w)


def frame_mask_logits(mask_embed: Tensor, features: Tensor) -> Tensor:
    """Per-frame embeddings (T, N, C) against that frame's (T, H, W, C) map -> (T, N, H, W)."""
    t, h, w, c = features.shape
    flat = T.transpose(features.reshape(t, h * w, c), (0, 2, 1))
    return T.matmul(mask_embed, flat).reshape(t, mask_embed.shape[1], h, w)


def predict_masks(emb: QueryEmbeddings, fused: FusedFeatures) -> MaskPrediction:
    """Mask logits from the highest-resolution fused scale; detached numpy output."""
    logits = mask_logits(emb.mask_embed, fused.visual[0])
    return MaskPrediction(logits.data.copy(), emb.score_logits.data.copy())


def bilinear_matrix(n_out: int, n_in: int) -> np.ndarray:
    """(n_out, n_in) interpolation weights, half-pixel centers, edge clamped."""
    src = (np.arange(n_out) + 0.5) * n_in / n_out - 0.5
    src = np.clip(src, 0, n_in - 1)
    i0 = np.minimum(np.floor(src).astype(int), max(n_in - 2, 0))
    i1 = np.minimum(i0 + 1, n_in - 1)
    frac = src - i0
    m = np.zeros((n_out, n_in))
    np.add.at(m, (np.arange(n_out), i0), 1 - frac)
    np.add.at(m, (np.arange(n_out), i1), frac)
    return m


def upsample(x, size):
    """Bilinearly resize the last two axes of a tensor or array to ``size``."""
    h, w = x.shape[-2:]
    uh, uw = bilinear_matrix(size[0], h), bilinear_matrix(size[1], w)
    if isinstance(x, Tensor):
        return T.matmul(T.matmul(T.tensor(uh), x), T.tensor(uw.T))
    return uh @ x @ uw.T


def select_and_binarize(pred: MaskPrediction, size, threshold: float = 0.5) -> np.ndarray:
    """Binary (T, H0, W0) masks: union over selected queries.

    Queries with referral score above 0.5 are selected, or the single best one
    if none pass. Each selected query's logits are bilinearly upsampled and
    thresholded at ``threshold`` in probability space.
    """
    scores = pred.referral_scores
    chosen = np.flatnonzero(scores > 0.5)
    if chosen.size == 0:
        chosen = np.array([int(np.argmax(scores))])
    up = upsample(pred.logits[chosen].astype(np.float64), size)       # (k, T, H0, W0)
    cut = np.log(threshold / (1 - threshold))
    return (up > cut).any(axis=0).astype(np.uint8)
