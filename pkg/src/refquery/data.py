"""Feature clips: in-memory model, on-disk format, and a synthetic generator.

A clip stores what a frozen vision-language backbone would emit for one
(video, expression) pair plus ground-truth masks. On disk a clip is a
directory holding ``manifest.json`` and raw little-endian float32 tensor
files; masks are run-length encoded inside the manifest.

RLE layout: alternating run lengths over the row-major flattened mask,
starting with a background run (which may be 0).
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

FORMAT = "refquery-clip"
VERSION = 1
PALETTE_SEED = 20240611


class LoadError(ValueError):
    """A clip or prediction file failed validation; ``field`` names the offending entry."""

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


class ConfigError(ValueError):
    pass


# ------------------------------------------------------------------------ RLE


def rle_encode(mask: np.ndarray) -> list[int]:
    flat = np.asarray(mask).reshape(-1)
    if flat.size and not np.isin(flat, (0, 1)).all():
        raise ValueError("rle_encode expects a binary mask")
    flat = flat.astype(bool)
    change = np.flatnonzero(flat[1:] != flat[:-1]) + 1
    bounds = np.concatenate([[0], change, [flat.size]])
    runs = np.diff(bounds).tolist()
    if flat.size and flat[0]:
        runs = [0] + runs
    return [int(r) for r in runs]


def rle_decode(counts, shape) -> np.ndarray:
    counts = np.asarray(counts, dtype=np.int64)
    total = int(np.prod(shape))
    if counts.ndim != 1 or (counts < 0).any() or int(counts.sum()) != total:
        raise ValueError(f"run lengths do not cover a {tuple(shape)} mask")
    values = np.arange(counts.size) % 2
    return np.repeat(values, counts).astype(np.uint8).reshape(shape)


# ----------------------------------------------------------------- data model


@dataclass
class FeatureClip:
    visual: list[np.ndarray]          # per scale: (T, H_l, W_l, C_l)
    text_tokens: np.ndarray           # (N_t, C_t)
    text_sentence: np.ndarray         # (C_t,)
    gt_masks: np.ndarray              # (T, K, H0, W0) uint8
    target_ids: list[int]
    expression: str = ""
    clip_id: str = "clip"
    video_id: str | None = None
    meta: dict = field(default_factory=dict)

    @property
    def T(self) -> int:
        return self.visual[0].shape[0]

    @property
    def scales(self) -> list[tuple[int, int]]:
        return [(v.shape[1], v.shape[2]) for v in self.visual]

    @property
    def num_objects(self) -> int:
        return self.gt_masks.shape[1]

    @property
    def mask_size(self) -> tuple[int, int]:
        return self.gt_masks.shape[2], self.gt_masks.shape[3]

    def target_mask(self) -> np.ndarray:
        """Union of the referred objects' masks per frame, (T, H0, W0)."""
        if not self.target_ids:
            return np.zeros((self.T,) + self.mask_size, dtype=np.uint8)
        return self.gt_masks[:, self.target_ids].max(axis=1)

    def validate(self):
        if not self.visual:
            raise LoadError("scales", "at least one scale required")
        t = self.visual[0].shape[0]
        if t < 1:
            raise LoadError("frames", "T must be >= 1")
        prev = None
        for l, v in enumerate(self.visual):
            if v.ndim != 4 or v.shape[0] != t:
                raise LoadError(f"scales[{l}]", f"expected (T={t}, H, W, C), got {v.shape}")
            if prev is not None and (v.shape[1] >= prev[0] or v.shape[2] >= prev[1]):
                raise LoadError(f"scales[{l}]", "spatial extent must shrink strictly with level")
            prev = v.shape[1:3]
        if self.text_tokens.ndim != 2 or self.text_tokens.shape[0] < 1:
            raise LoadError("text.tokens", f"need (N_t >= 1, C_t), got {self.text_tokens.shape}")
        if self.text_sentence.shape != (self.text_tokens.shape[1],):
            raise LoadError("text.sentence", "sentence width must match token width")
        if self.gt_masks.ndim != 4 or self.gt_masks.shape[0] != t:
            raise LoadError("objects", f"expected (T={t}, K, H0, W0) masks, got {self.gt_masks.shape}")
        if not np.isin(self.gt_masks, (0, 1)).all():
            raise LoadError("objects", "masks must be binary")
        k = self.gt_masks.shape[1]
        bad = [i for i in self.target_ids if not 0 <= i < k]
        if bad:
            raise LoadError("target_ids", f"ids {bad} not among {k} annotated objects")
        arrays = [*self.visual, self.text_tokens, self.text_sentence]
        if not all(np.isfinite(a).all() for a in arrays):
            raise LoadError("features", "non-finite values")


# ----------------------------------------------------------------- file codec


def _write_f32(path: Path, arr: np.ndarray):
    path.write_bytes(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def _read_f32(path: Path, shape, field_name: str) -> np.ndarray:
    if not path.is_file():
        raise LoadError(field_name, f"missing tensor file {path.name}")
    raw = path.read_bytes()
    expected = int(np.prod(shape)) * 4
    if len(raw) != expected:
        raise LoadError(field_name, f"{path.name} holds {len(raw)} bytes, manifest implies {expected}")
    return np.frombuffer(raw, dtype="<f4").reshape(shape).astype(np.float32)


def save_clip(clip: FeatureClip, directory) -> Path:
    """Write ``clip`` into ``directory``; returns the manifest path."""
    clip.validate()
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    scales = []
    for l, v in enumerate(clip.visual):
        name = f"visual_l{l}.f32"
        _write_f32(d / name, v)
        scales.append({"height": v.shape[1], "width": v.shape[2], "channels": v.shape[3], "file": name})
    _write_f32(d / "text_tokens.f32", clip.text_tokens)
    _write_f32(d / "text_sentence.f32", clip.text_sentence)
    h0, w0 = clip.mask_size
    manifest = {
        "format": FORMAT,
        "version": VERSION,
        "clip_id": clip.clip_id,
        "video_id": clip.video_id or clip.clip_id,
        "expression": clip.expression,
        "frames": clip.T,
        "dtype": "float32-le",
        "scales": scales,
        "text": {"tokens": clip.text_tokens.shape[0], "channels": clip.text_tokens.shape[1],
                 "file": "text_tokens.f32", "sentence_file": "text_sentence.f32"},
        "mask_size": [h0, w0],
        "objects": [{"id": k, "masks": [rle_encode(clip.gt_masks[t, k]) for t in range(clip.T)]}
                    for k in range(clip.num_objects)],
        "target_ids": list(clip.target_ids),
        "meta": clip.meta,
    }
    path = d / "manifest.json"
    path.write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return path


def _need(m: dict, key: str, kind, where: str = ""):
    name = where + key
    if key not in m:
        raise LoadError(name, "missing")
    value = m[key]
    if kind is int and (not isinstance(value, int) or isinstance(value, bool) or value < 1):
        raise LoadError(name, f"expected a positive integer, got {value!r}")
    if kind is not int and not isinstance(value, kind):
        raise LoadError(name, f"expected {kind.__name__}")
    return value


def load_clip(manifest_path) -> FeatureClip:
    """Read and validate a clip manifest plus its tensor files."""
    path = Path(manifest_path)
    if path.is_dir():
        path = path / "manifest.json"
    if not path.is_file():
        raise LoadError("manifest", f"missing file {path}")
    try:
        m = json.loads(path.read_text())
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise LoadError("manifest", f"invalid JSON ({exc})") from None
    if not isinstance(m, dict) or m.get("format") != FORMAT:
        raise LoadError("format", f"expected {FORMAT!r}")
    if m.get("version") != VERSION:
        raise LoadError("version", f"unsupported version {m.get('version')!r}")
    if m.get("dtype", "float32-le") != "float32-le":
        raise LoadError("dtype", f"unsupported dtype {m.get('dtype')!r}")
    d = path.parent
    t = _need(m, "frames", int)
    scales = _need(m, "scales", list)
    if not scales:
        raise LoadError("scales", "empty")
    visual = []
    for l, s in enumerate(scales):
        where = f"scales[{l}]."
        if not isinstance(s, dict):
            raise LoadError(f"scales[{l}]", "expected an object")
        shape = (t, _need(s, "height", int, where), _need(s, "width", int, where),
                 _need(s, "channels", int, where))
        visual.append(_read_f32(d / _need(s, "file", str, where), shape, f"scales[{l}]"))
    text = _need(m, "text", dict)
    n_t, c_t = _need(text, "tokens", int, "text."), _need(text, "channels", int, "text.")
    tokens = _read_f32(d / _need(text, "file", str, "text."), (n_t, c_t), "text.tokens")
    sentence = _read_f32(d / _need(text, "sentence_file", str, "text."), (c_t,), "text.sentence")
    size = _need(m, "mask_size", list)
    if len(size) != 2 or not all(isinstance(v, int) and v > 0 for v in size):
        raise LoadError("mask_size", f"expected [H0, W0], got {size!r}")
    objects = _need(m, "objects", list)
    masks = np.zeros((t, len(objects), size[0], size[1]), dtype=np.uint8)
    for k, obj in enumerate(objects):
        runs = obj.get("masks") if isinstance(obj, dict) else None
        if not isinstance(runs, list) or len(runs) != t:
            raise LoadError(f"objects[{k}].masks", f"expected {t} per-frame masks")
        for f, counts in enumerate(runs):
            try:
                masks[f, k] = rle_decode(counts, size)
            except (ValueError, TypeError) as exc:
                raise LoadError(f"objects[{k}].masks[{f}]", str(exc)) from None
    target_ids = _need(m, "target_ids", list)
    if not all(isinstance(i, int) for i in target_ids):
        raise LoadError("target_ids", "expected integers")
    clip = FeatureClip(visual=visual, text_tokens=tokens, text_sentence=sentence, gt_masks=masks,
                       target_ids=target_ids, expression=str(m.get("expression", "")),
                       clip_id=str(m.get("clip_id", d.name)), video_id=m.get("video_id"),
                       meta=m.get("meta") or {})
    clip.validate()
    return clip


def load_dataset(path) -> list[FeatureClip]:
    """Load every clip listed in a dataset manifest (or every clip under a directory)."""
    return [load_clip(p) for p in dataset_entries(path)]


def dataset_entries(path) -> list[Path]:
    p = Path(path)
    if p.is_dir():
        if (p / "dataset.json").is_file():
            p = p / "dataset.json"
        else:
            found = sorted(p.glob("*/manifest.json"))
            if (p / "manifest.json").is_file():
                found = [p / "manifest.json"]
            if not found:
                raise LoadError("dataset", f"no clips under {p}")
            return found
    try:
        m = json.loads(p.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise LoadError("dataset", f"cannot read {p} ({exc})") from None
    clips = m.get("clips") if isinstance(m, dict) else None
    if not clips:
        raise LoadError("dataset.clips", "empty dataset")
    return [p.parent / c for c in clips]


def write_dataset_manifest(directory, clip_dirs: list[str]) -> Path:
    path = Path(directory) / "dataset.json"
    path.write_text(json.dumps({"format": "refquery-dataset", "version": VERSION,
                                "clips": [f"{c}/manifest.json" for c in clip_dirs]}, indent=1))
    return path


# ------------------------------------------------------------------ synthetic


@dataclass
class SyntheticSpec:
    seed: int = 0
    T: int = 8
    L: int = 3
    base: tuple[int, int] = (64, 64)
    channels: tuple[int, ...] = (64, 64, 64)
    C_t: int = 64
    N_t: int = 4
    num_objects: int = 3
    num_targets: int = 1
    radius: tuple[float, float] = (9.0, 14.0)
    speed: tuple[float, float] = (1.0, 3.0)
    noise: float = 0.05
    num_categories: int = 6
    # explicit motion overrides: per-object (vx, vy) in pixels/frame and radii
    velocities: list | None = None
    radii: list | None = None

    def scale_shapes(self) -> list[tuple[int, int]]:
        h, w = self.base
        return [(max(h // 2 ** (l + 2), 1), max(w // 2 ** (l + 2), 1)) for l in range(self.L)]

    def check(self):
        if self.num_objects < 1:
            raise ConfigError("synthetic spec needs at least one object")
        if min(self.T, self.L, self.C_t, self.N_t, *self.base, *self.channels) < 1:
            raise ConfigError("synthetic spec dimensions must be positive")
        if len(self.channels) != self.L:
            raise ConfigError(f"channels lists {len(self.channels)} scales, L={self.L}")
        if not 0 <= self.num_targets <= self.num_objects:
            raise ConfigError("num_targets must lie in [0, num_objects]")
        if self.N_t < 2 * self.num_targets:
            raise ConfigError("N_t must hold two tokens per target")
        if self.num_objects > self.num_categories:
            raise ConfigError("num_categories must be >= num_objects")
        shapes = self.scale_shapes()
        if any(a[0] <= b[0] or a[1] <= b[1] for a, b in zip(shapes, shapes[1:])):
            raise ConfigError(f"base {self.base} too small for {self.L} strictly shrinking scales")

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticSpec":
        d = dict(d)
        for key in ("base", "channels", "radius", "speed"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


def rasterize_disk(shape, cx: float, cy: float, r: float) -> np.ndarray:
    """Pixels whose centers lie within distance ``r`` of (cx, cy)."""
    ys, xs = np.mgrid[0:shape[0], 0:shape[1]]
    return (((xs + 0.5 - cx) ** 2 + (ys + 0.5 - cy) ** 2) <= r * r).astype(np.uint8)


def area_downsample(mask: np.ndarray, out_shape) -> np.ndarray:
    h, w = mask.shape[-2:]
    oh, ow = out_shape
    if h % oh or w % ow:
        ys = (np.arange(oh + 1) * h) // oh
        xs = (np.arange(ow + 1) * w) // ow
        out = np.empty(mask.shape[:-2] + (oh, ow), dtype=np.float64)
        for i in range(oh):
            for j in range(ow):
                out[..., i, j] = mask[..., ys[i]:ys[i + 1], xs[j]:xs[j + 1]].mean(axis=(-1, -2))
        return out
    return mask.reshape(mask.shape[:-2] + (oh, h // oh, ow, w // ow)).mean(axis=(-1, -3))


def _palette(spec: SyntheticSpec):
    # fixed across clips so categories mean the same thing in every clip
    rng = np.random.default_rng([PALETTE_SEED, spec.C_t, *spec.channels])
    def unit(n, c):
        v = rng.normal(size=(n, c))
        return v / np.linalg.norm(v, axis=1, keepdims=True)
    visual = [unit(spec.num_categories + 1, c) * np.sqrt(c) for c in spec.channels]
    text_cat = unit(spec.num_categories, spec.C_t)
    text_dir = rng.normal(size=(2, spec.C_t)) / np.sqrt(2)
    filler = unit(max(spec.N_t, 1), spec.C_t) * 0.5
    return visual, text_cat, text_dir, filler


def generate_synthetic(spec: SyntheticSpec, clip_id: str | None = None) -> FeatureClip:
    """Moving-disk clip; the expression names the target's category and heading."""
    spec.check()
    rng = np.random.default_rng(spec.seed)
    h0, w0 = spec.base
    k = spec.num_objects
    radii = np.asarray(spec.radii if spec.radii is not None
                       else rng.uniform(*spec.radius, size=k), dtype=np.float64)
    if spec.velocities is not None:
        vel = np.asarray(spec.velocities, dtype=np.float64).reshape(k, 2)
    else:
        ang = rng.uniform(0, 2 * np.pi, size=k)
        spd = rng.uniform(*spec.speed, size=k)
        vel = np.stack([spd * np.cos(ang), spd * np.sin(ang)], axis=1)
    lo = np.minimum(radii, np.array(spec.base).min() / 2)
    cx = rng.uniform(lo, w0 - lo)
    cy = rng.uniform(lo, h0 - lo)
    categories = rng.permutation(spec.num_categories)[:k]
    targets = sorted(rng.choice(k, size=spec.num_targets, replace=False).tolist())

    masks = np.zeros((spec.T, k, h0, w0), dtype=np.uint8)
    pos = np.stack([cx, cy], axis=1)
    v = vel.copy()
    for t in range(spec.T):
        for j in range(k):
            masks[t, j] = rasterize_disk((h0, w0), pos[j, 0], pos[j, 1], radii[j])
        pos = pos + v
        # reflect off the borders so disks stay in view
        for axis, extent in ((0, w0), (1, h0)):
            low = np.minimum(lo, extent / 2)
            over = pos[:, axis] > extent - low
            under = pos[:, axis] < low
            pos[over, axis] = 2 * (extent - low[over]) - pos[over, axis]
            pos[under, axis] = 2 * low[under] - pos[under, axis]
            v[over | under, axis] *= -1

    visual_codes, text_cat, text_dir, filler = _palette(spec)
    visual = []
    for l, (hl, wl) in enumerate(spec.scale_shapes()):
        occ = area_downsample(masks.astype(np.float64), (hl, wl))        # (T, K, hl, wl)
        codes = visual_codes[l]
        feat = np.einsum("tkhw,kc->thwc", occ, codes[categories])
        feat += (1.0 - np.clip(occ.sum(axis=1), 0, 1))[..., None] * codes[-1]
        feat += spec.noise * rng.normal(size=feat.shape)
        visual.append(feat.astype(np.float32))

    tokens = filler[: spec.N_t].copy()
    words = []
    names = ["red", "green", "blue", "yellow", "purple", "orange", "cyan", "pink"]
    for n, j in enumerate(targets):
        heading = np.arctan2(vel[j, 1], vel[j, 0])
        tokens[2 * n] = text_cat[categories[j]]
        tokens[2 * n + 1] = np.cos(heading) * text_dir[0] + np.sin(heading) * text_dir[1]
        words.append(f"the {names[categories[j] % len(names)]} disk moving at {np.degrees(heading):.0f} degrees")
    tokens = tokens + 0.01 * rng.normal(size=tokens.shape)
    tokens = tokens.astype(np.float32)
    cid = clip_id or f"synthetic_{spec.seed}"
    return FeatureClip(visual=visual, text_tokens=tokens, text_sentence=tokens.mean(axis=0),
                       gt_masks=masks, target_ids=targets,
                       expression="; ".join(words) or "nothing", clip_id=cid, video_id=cid,
                       meta={"source": "synthetic", "seed": spec.seed,
                             "categories": [int(c) for c in categories],
                             "initial_centers": [[float(x), float(y)] for x, y in zip(cx, cy)],
                             "radii": [float(r) for r in radii],
                             "export_resize": {"longest_side": 640, "shortest_side": 360}})
