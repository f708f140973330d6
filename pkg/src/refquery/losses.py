"""Matching-based frame/video losses and the query-sentence similarity loss."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .data import FeatureClip
from .decoders import upsample
from .matching import rectangular_assignment
from .nn import ConfigError
from .tensor import Tensor


@dataclass
class LossConfig:
    lambda_sim: float = 0.5
    lambda_dice: float = 1.0
    lambda_bce: float = 1.0
    lambda_cls: float = 1.0
    lr: float = 5e-5
    iterations: int = 300
    T: int = 8                  # frames sampled per clip and step; 0 keeps every frame
    weight_decay: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 0         # clips per step; 0 uses the whole dataset

    def check(self):
        for name in ("lambda_sim", "lambda_dice", "lambda_bce", "lambda_cls", "lr", "weight_decay"):
            value = getattr(self, name)
            if not value >= 0:
                raise ConfigError(f"{name} must be >= 0, got {value}")
        if self.iterations < 0 or self.T < 0 or self.batch_size < 0:
            raise ConfigError("iterations, T and batch_size must be >= 0")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("betas must lie in [0, 1)")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "LossConfig":
        unknown = sorted(set(d) - set(cls.__dataclass_fields__))
        if unknown:
            raise ConfigError(f"unknown loss config keys: {unknown}")
        return cls(**d)


@dataclass
class LossBreakdown:
    L_v: float
    L_f: float
    L_sim: float
    L_train: float

    def as_row(self):
        return [self.L_v, self.L_f, self.L_sim, self.L_train]


@dataclass
class Match:
    pairs: list[tuple[int, int]]     # (query, object)
    cost: np.ndarray                 # (N, K) matching cost

    def query_of(self) -> dict[int, int]:
        return {o: q for q, o in self.pairs}


# ------------------------------------------------------------------ matching


def _softplus(x):
    return np.maximum(x, 0) + np.log1p(np.exp(-np.abs(x)))


def _sigmoid(x):
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1 / (1 + e), e / (1 + e))


def match_cost(logits: np.ndarray, gt: np.ndarray, score_logits: np.ndarray, is_target, cfg: LossConfig):
    """(N, K) cost between N predicted masks and K ground-truth masks.

    ``logits``: (N, P) mask logits at ground-truth resolution, flattened.
    ``gt``: (K, P) binary. Returns the total and its dice, bce, cls parts.
    """
    x = np.asarray(logits, dtype=np.float64)
    g = np.asarray(gt, dtype=np.float64)
    p = _sigmoid(x)
    inter = p @ g.T
    dice = 1.0 - (2 * inter + 1) / (p.sum(axis=1)[:, None] + g.sum(axis=1)[None, :] + 1)
    bce = (_softplus(x).sum(axis=1)[:, None] - x @ g.T) / x.shape[1]
    s = _sigmoid(np.asarray(score_logits, dtype=np.float64))[:, None]
    tgt = np.asarray(is_target, dtype=bool)[None, :]
    cls = np.where(tgt, 1 - s, s)
    total = cfg.lambda_dice * dice + cfg.lambda_bce * bce + cfg.lambda_cls * cls
    return total, dice, bce, cls


def match_predictions_to_gt(logits, gt, score_logits, is_target, cfg: LossConfig) -> Match:
    """Minimum-cost one-to-one matching of ground-truth objects to queries."""
    n, k = len(logits), len(gt)
    if k > n:
        raise ConfigError(f"{k} ground-truth objects but only {n} queries")
    if k == 0:
        return Match([], np.zeros((n, 0)))
    cost = match_cost(logits, gt, score_logits, is_target, cfg)[0]
    return Match(rectangular_assignment(cost), cost)


# --------------------------------------------------------------- loss terms


def dice_rows(logits: Tensor, gt: np.ndarray) -> Tensor:
    """Per-row soft dice loss, (M, P) logits vs (M, P) binary targets -> (M,)."""
    p = T.sigmoid(logits)
    g = T.tensor(gt)
    num = (p * g).sum(axis=1) * 2.0 + 1.0
    den = p.sum(axis=1) + T.tensor(gt.sum(axis=1)) + 1.0
    return 1.0 - num / den


def bce_rows(logits: Tensor, gt: np.ndarray) -> Tensor:
    """Per-row mean binary cross-entropy with logits -> (M,)."""
    return (T.softplus(logits) - logits * T.tensor(gt)).mean(axis=1)


def cls_loss(score_logits: Tensor, labels: np.ndarray) -> Tensor:
    return (T.softplus(score_logits) - score_logits * T.tensor(labels)).mean()


def _upsampled_rows(logits: Tensor, rows: np.ndarray, size) -> Tensor:
    # logits (R, ..., h, w): gather rows, resize, flatten each row
    picked = T.take(logits, rows, axis=0)
    up = upsample(picked, size)
    return up.reshape(len(rows), -1)


def video_loss(logits: Tensor, score_logits: Tensor, clip: FeatureClip, cfg: LossConfig,
               frames=None):
    """Trajectory-matched dice + bce over all frames, plus referral classification.

    ``logits``: (N, T, h, w); ground truth is ``clip.gt_masks`` (optionally at ``frames``).
    Returns (loss, match).
    """
    gt = clip.gt_masks if frames is None else clip.gt_masks[frames]
    n = logits.shape[0]
    size = clip.mask_size
    k = gt.shape[1]
    traj = gt.transpose(1, 0, 2, 3).reshape(k, -1).astype(np.float64)
    is_target = np.isin(np.arange(k), clip.target_ids)
    up = upsample(logits.data.astype(np.float64), size).reshape(n, -1)
    match = match_predictions_to_gt(up, traj, score_logits.data, is_target, cfg)
    labels = np.zeros(n)
    for q, o in match.pairs:
        labels[q] = float(is_target[o])
    loss = cls_loss(score_logits, labels) * cfg.lambda_cls
    if match.pairs:
        rows = np.array([q for q, _ in match.pairs])
        target = traj[[o for _, o in match.pairs]]
        pred = _upsampled_rows(logits, rows, size)
        loss = loss + dice_rows(pred, target).mean() * cfg.lambda_dice \
            + bce_rows(pred, target).mean() * cfg.lambda_bce
    return loss, match


def frame_loss(logits: Tensor, score_logits: Tensor, clip: FeatureClip, cfg: LossConfig,
               frames=None):
    """Per-frame matched losses averaged over frames.

    ``logits``: (T, N, h, w) per-frame mask logits; ``score_logits``: (T, N).
    Objects with an empty mask in a frame are not ground truth for that frame.
    """
    gt = clip.gt_masks if frames is None else clip.gt_masks[frames]
    t_len, n = logits.shape[:2]
    size = clip.mask_size
    is_target = np.isin(np.arange(gt.shape[1]), clip.target_ids)
    up = upsample(logits.data.astype(np.float64), size).reshape(t_len, n, -1)
    rows, targets, weights = [], [], []
    labels = np.zeros((t_len, n))
    matches = []
    for t in range(t_len):
        visible = np.flatnonzero(gt[t].reshape(gt.shape[1], -1).any(axis=1))
        g = gt[t, visible].reshape(len(visible), size[0] * size[1]).astype(np.float64)
        m = match_predictions_to_gt(up[t], g, score_logits.data[t], is_target[visible], cfg)
        matches.append(m)
        for q, o in m.pairs:
            labels[t, q] = float(is_target[visible[o]])
            rows.append(t * n + q)
            targets.append(g[o])
            weights.append(1.0 / (len(m.pairs) * t_len))
    loss = cls_loss(score_logits.reshape(t_len * n), labels.reshape(-1)) * cfg.lambda_cls
    if rows:
        flat = logits.reshape(t_len * n, *logits.shape[2:])
        pred = _upsampled_rows(flat, np.array(rows), size)
        target = np.stack(targets)
        w = T.tensor(np.array(weights))
        per_row = dice_rows(pred, target) * cfg.lambda_dice + bce_rows(pred, target) * cfg.lambda_bce
        loss = loss + (per_row * w).sum()
    return loss, matches


def cosine_rows(a: Tensor, b: Tensor, eps: float = 1e-12) -> Tensor:
    """Cosine similarity of each row of ``a`` (M, C) with vector ``b`` (C,)."""
    dot = (a * b).sum(axis=-1)
    na = T.sqrt((a * a).sum(axis=-1) + eps)
    nb = T.sqrt((b * b).sum() + eps)
    return dot / (na * nb)


def similarity_loss(sim_embed: Tensor, sentence: Tensor, target_queries) -> Tensor:
    """Mean (1 - cosine) between target-matched query projections and the sentence."""
    target_queries = list(target_queries)
    if not target_queries:
        return T.tensor(0.0)
    rows = T.take(sim_embed, np.array(target_queries), axis=0)
    return (1.0 - cosine_rows(rows, sentence)).mean()


def compute_losses(out, clip: FeatureClip, cfg: LossConfig, frames=None):
    """Total objective L_v + L_f + lambda_sim * L_sim for one model output.

    Returns (total tensor, LossBreakdown).
    """
    from .decoders import frame_mask_logits

    lv, vmatch = video_loss(out.video_logits(), out.video.score_logits, clip, cfg, frames)
    flog = frame_mask_logits(out.frame.mask_embed, out.fused.visual[0])
    lf, _ = frame_loss(flog, out.frame.score_logits, clip, cfg, frames)
    targets = [q for q, o in vmatch.pairs if o in set(clip.target_ids)]
    ls = similarity_loss(out.sim_embed, out.fused.sentence, targets)
    total = lv + lf + ls * cfg.lambda_sim
    # the logged total is re-summed in double precision from the logged parts
    v, f, s = float(lv.data), float(lf.data), float(ls.data)
    breakdown = LossBreakdown(v, f, s, v + f + cfg.lambda_sim * s)
    return total, breakdown
