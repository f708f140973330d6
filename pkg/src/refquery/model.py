"""End-to-end referring segmentation model over frozen-backbone features."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import nn
from . import tensor as T
from .data import FeatureClip
from .decoders import (FrameDecoderConfig, FrameQueryDecoder, MaskHead, MaskPrediction,
                       QueryEmbeddings, VideoDecoderConfig, VideoQueryDecoder, mask_logits,
                       select_and_binarize)
from .encoder import CrossModalEncoder, EncoderConfig, FusedFeatures
from .matching import ReorderedFrameQueries, VideoQueryInitializer
from .tensor import Tensor


@dataclass
class ModelConfig:
    C: int = 64
    heads: int = 4
    encoder_layers: int = 6
    frame_layers: int = 9
    video_layers: int = 6
    N_f: int = 20
    N_v: int = 20
    points: int = 4
    fusion: str = "deformable"
    chain_matching: bool = True
    ffn_mult: int = 4
    in_channels: list[int] = field(default_factory=lambda: [64, 64, 64])
    text_channels: int = 64

    def check(self):
        if self.N_v != self.N_f:
            raise nn.ConfigError(f"aggregation needs N_v == N_f, got {self.N_v} and {self.N_f}")
        self.encoder().check()
        self.frame().check()
        self.video().check()

    def encoder(self) -> EncoderConfig:
        return EncoderConfig(self.encoder_layers, self.heads, self.C, self.points, self.fusion, self.ffn_mult)

    def frame(self) -> FrameDecoderConfig:
        return FrameDecoderConfig(self.frame_layers, self.N_f, self.heads, self.C, self.ffn_mult)

    def video(self) -> VideoDecoderConfig:
        return VideoDecoderConfig(self.video_layers, self.N_v, self.heads, self.C, self.ffn_mult)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        unknown = sorted(set(d) - set(known))
        if unknown:
            raise nn.ConfigError(f"unknown model config keys: {unknown}")
        cfg = cls(**known)
        cfg.in_channels = list(cfg.in_channels)
        return cfg


@dataclass
class ModelOutput:
    fused: FusedFeatures
    frame_queries: Tensor                 # (T, N_f, C)
    reordered: ReorderedFrameQueries
    video_init: Tensor                    # (N_v, C)
    video: QueryEmbeddings                # refined video queries + heads
    frame: QueryEmbeddings                # per-frame heads on frame queries, (T, N_f, .)
    sim_embed: Tensor                     # (N_v, C) projection compared with the sentence

    def video_logits(self) -> Tensor:
        return mask_logits(self.video.mask_embed, self.fused.visual[0])

    def prediction(self) -> MaskPrediction:
        return MaskPrediction(self.video_logits().data.copy(), self.video.score_logits.data.copy())


class RVOSModel(nn.Module):
    def __init__(self, cfg: ModelConfig, seed: int = 0):
        cfg.check()
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        self.encoder = CrossModalEncoder(rng, cfg.encoder(), cfg.in_channels, cfg.text_channels)
        self.frame_decoder = FrameQueryDecoder(rng, cfg.frame())
        self.initializer = VideoQueryInitializer(rng, cfg.C, chain=cfg.chain_matching)
        self.video_decoder = VideoQueryDecoder(rng, cfg.video())
        self.video_head = MaskHead(rng, cfg.C)
        self.frame_head = MaskHead(rng, cfg.C)
        self.sim_proj = nn.Linear(rng, cfg.C, cfg.C)

    def forward_features(self, visual: list[Tensor], text_tokens: Tensor) -> ModelOutput:
        fused = self.encoder(visual, text_tokens)
        frame_queries = self.frame_decoder(fused)
        video_init, reordered = self.initializer(frame_queries)
        refined = self.video_decoder(video_init, reordered.queries, fused.tokens)
        return ModelOutput(fused, frame_queries, reordered, video_init, self.video_head(refined),
                           self.frame_head(frame_queries), self.sim_proj(refined))

    def __call__(self, clip: FeatureClip) -> ModelOutput:
        return self.forward_features([T.tensor(v) for v in clip.visual], T.tensor(clip.text_tokens))

    def infer(self, clip: FeatureClip, threshold: float = 0.5) -> np.ndarray:
        """Binary (T, H0, W0) masks for the referred object(s)."""
        out = self(clip)
        return select_and_binarize(out.prediction(), clip.mask_size, threshold)
