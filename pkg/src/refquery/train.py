"""AdamW optimization loop, checkpoints, and loss-curve logging."""
from __future__ import annotations

import csv
import io
import json
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import tensor as T
from .data import FeatureClip
from .losses import LossBreakdown, LossConfig, compute_losses
from .model import ModelConfig, RVOSModel


class TrainingError(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


class AdamW:
    """Adam with decoupled weight decay."""

    def __init__(self, params: dict, lr: float, betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.05):
        self.params = params
        self.lr, self.betas, self.eps, self.weight_decay = lr, betas, eps, weight_decay
        self.step_count = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self):
        if self.lr == 0:
            self.step_count += 1
            return
        self.step_count += 1
        b1, b2 = self.betas
        c1 = 1 - b1 ** self.step_count
        c2 = 1 - b2 ** self.step_count
        for k, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            m, v = self.m[k], self.v[k]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * (g * g)
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.data = (p.data * (1 - self.lr * self.weight_decay) - self.lr * update).astype(p.data.dtype)

    def state(self) -> dict[str, np.ndarray]:
        out = {}
        for k in self.params:
            out[f"adam.m.{k}"] = self.m[k]
            out[f"adam.v.{k}"] = self.v[k]
        return out

    def load_state(self, tensors: dict, step_count: int):
        for k in self.params:
            self.m[k] = np.array(tensors[f"adam.m.{k}"], dtype=np.float32)
            self.v[k] = np.array(tensors[f"adam.v.{k}"], dtype=np.float32)
        self.step_count = step_count


# ----------------------------------------------------------------- checkpoint

MAGIC = b"RQCK"
CKPT_VERSION = 1


def _atomic_write(path: Path, payload: bytes):
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_checkpoint(path, tensors: dict[str, np.ndarray], header: dict):
    """Binary checkpoint: magic, version, JSON header, then named f32 tensors.

    Tensor record: u16 name length, utf-8 name, u8 ndim, u32 dims, little-endian f32 payload.
    """
    buf = io.BytesIO()
    head = json.dumps(header, sort_keys=True).encode()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", CKPT_VERSION, len(head)))
    buf.write(head)
    buf.write(struct.pack("<I", len(tensors)))
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype="<f4")
        raw = name.encode()
        buf.write(struct.pack("<HB", len(raw), arr.ndim))
        buf.write(raw)
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(arr.tobytes())
    _atomic_write(Path(path), buf.getvalue())


def read_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    try:
        version, hlen = struct.unpack_from("<II", data, 4)
        if version != CKPT_VERSION:
            raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
        off = 12
        header = json.loads(data[off:off + hlen])
        off += hlen
        (count,) = struct.unpack_from("<I", data, off)
        off += 4
        tensors = {}
        for _ in range(count):
            nlen, ndim = struct.unpack_from("<HB", data, off)
            off += 3
            name = data[off:off + nlen].decode()
            off += nlen
            shape = struct.unpack_from(f"<{ndim}I", data, off)
            off += 4 * ndim
            n = int(np.prod(shape)) * 4
            if off + n > len(data):
                raise CheckpointError(f"{path}: truncated tensor {name}")
            tensors[name] = np.frombuffer(data, dtype="<f4", count=n // 4, offset=off).reshape(shape).astype(np.float32)
            off += n
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt checkpoint ({exc})") from None
    return tensors, header


def save_model(path, model: RVOSModel, optimizer: AdamW | None = None, extra: dict | None = None):
    tensors = {f"model.{k}": v for k, v in model.state_dict().items()}
    header = {"model_config": model.cfg.to_dict(), **(extra or {})}
    if optimizer is not None:
        tensors.update(optimizer.state())
        header["adam_step"] = optimizer.step_count
    write_checkpoint(path, tensors, header)


def load_model(path, expect: ModelConfig | None = None) -> tuple[RVOSModel, dict, dict]:
    """Rebuild a model from a checkpoint; refuses architecture mismatches.

    With ``expect`` the model is built from that config and every checkpoint
    tensor must fit it; the error names the first tensor that does not.
    """
    tensors, header = read_checkpoint(path)
    if "model_config" not in header:
        raise CheckpointError(f"{path}: header lacks model_config")
    cfg = ModelConfig.from_dict(header["model_config"])
    model = RVOSModel(expect if expect is not None else cfg, seed=0)
    own = dict(model.named_parameters())
    state = {k[len("model."):]: v for k, v in tensors.items() if k.startswith("model.")}
    for name, p in own.items():
        if name not in state:
            raise CheckpointError(f"checkpoint lacks tensor model.{name}")
        if state[name].shape != p.shape:
            raise CheckpointError(f"tensor model.{name}: checkpoint {state[name].shape} vs model {p.shape}")
    extra = sorted(set(state) - set(own))
    if extra:
        raise CheckpointError(f"checkpoint has unexpected tensor model.{extra[0]}")
    if expect is not None and expect.to_dict() != cfg.to_dict():
        diff = sorted(k for k, v in expect.to_dict().items() if cfg.to_dict().get(k) != v)
        raise CheckpointError(f"checkpoint architecture differs from config in: {', '.join(diff)}")
    model.load_state_dict(state)
    return model, tensors, header


# ----------------------------------------------------------------------- loop


@dataclass
class TrainResult:
    model: RVOSModel
    optimizer: AdamW
    history: list[LossBreakdown] = field(default_factory=list)
    start_iteration: int = 0


def _pick_frames(rng, clip: FeatureClip, t: int):
    if t == 0 or clip.T <= t:
        return None
    return np.sort(rng.choice(clip.T, size=t, replace=False))


def _subclip(clip: FeatureClip, frames) -> tuple[list, np.ndarray]:
    if frames is None:
        return clip.visual, clip.text_tokens
    return [v[frames] for v in clip.visual], clip.text_tokens


def train_step(model: RVOSModel, clip: FeatureClip, cfg: LossConfig, frames=None, scale: float = 1.0):
    """Forward, loss, and backward for one clip; gradients accumulate on parameters."""
    visual, tokens = _subclip(clip, frames)
    with T.Tape() as tape:
        out = model.forward_features([T.tensor(v) for v in visual], T.tensor(tokens))
        total, breakdown = compute_losses(out, clip, cfg, frames)
    tape.backward(total, np.full_like(total.data, scale))
    tape.clear()
    return breakdown


def train(clips: list[FeatureClip], model_cfg: ModelConfig, cfg: LossConfig, seed: int = 0,
          resume: str | os.PathLike | None = None, iterations: int | None = None,
          log: Callable[[int, LossBreakdown], None] | None = None) -> TrainResult:
    """Optimize the full objective on ``clips``; deterministic given ``seed``.

    Each iteration draws ``batch_size`` clips (a seeded permutation of the
    dataset per epoch) and, for clips longer than ``cfg.T``, a sorted random
    subset of frames. Resuming from a checkpoint continues the same sequence.
    """
    if not clips:
        raise TrainingError("dataset is empty")
    cfg.check()
    if resume is not None:
        model, tensors, header = load_model(resume, expect=model_cfg)
        start = int(header.get("iteration", 0))
        if int(header.get("seed", seed)) != seed:
            raise CheckpointError("resume seed differs from checkpoint seed")
    else:
        model, tensors, start = RVOSModel(model_cfg, seed=seed), None, 0
    params = dict(model.named_parameters())
    opt = AdamW(params, cfg.lr, (cfg.beta1, cfg.beta2), cfg.eps, cfg.weight_decay)
    if tensors is not None and "adam_step" in header:
        opt.load_state(tensors, int(header["adam_step"]))
    result = TrainResult(model, opt, start_iteration=start)
    total_its = cfg.iterations if iterations is None else iterations
    batch = cfg.batch_size or len(clips)
    n = len(clips)
    for it in range(start, total_its):
        # per-iteration streams keep resumed runs identical to uninterrupted ones
        rng = np.random.default_rng([seed, it])
        epoch_pos = (it * batch) % n
        order = np.random.default_rng([seed, (it * batch) // n, 7]).permutation(n)
        chosen = [order[(epoch_pos + b) % n] for b in range(batch)]
        model.zero_grad()
        parts = []
        for ci in chosen:
            clip = clips[ci]
            frames = _pick_frames(rng, clip, cfg.T)
            parts.append(train_step(model, clip, cfg, frames, scale=1.0 / batch))
        rec = LossBreakdown(*[float(np.mean([getattr(p, k) for p in parts]))
                              for k in ("L_v", "L_f", "L_sim", "L_train")])
        if not all(np.isfinite(rec.as_row())):
            raise TrainingError(f"non-finite loss at iteration {it}: {rec}")
        opt.step()
        result.history.append(rec)
        if log is not None:
            log(it, rec)
    return result


def write_loss_csv(path, history: list[LossBreakdown], start: int = 0, append: bool = False):
    path = Path(path)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    if not append or not path.exists():
        w.writerow(["iteration", "L_v", "L_f", "L_sim", "L_train"])
        prefix = b""
    else:
        prefix = path.read_bytes()
    for i, rec in enumerate(history):
        w.writerow([start + i + 1, *[repr(v) for v in rec.as_row()]])
    _atomic_write(path, prefix + buf.getvalue().encode())


def read_loss_csv(path) -> list[tuple[int, LossBreakdown]]:
    rows = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            rows.append((int(row["iteration"]), LossBreakdown(float(row["L_v"]), float(row["L_f"]),
                                                              float(row["L_sim"]), float(row["L_train"]))))
    return rows
