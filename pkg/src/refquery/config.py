"""Run configuration: a JSON file with ``--key=value`` command-line overrides.

Schema (every section optional, missing keys take defaults)::

    {
      "seed": 0,
      "data": "runs/clips/dataset.json",     # dataset manifest or clip dir
      "out": "runs/train",                   # checkpoint + loss CSV directory
      "model": {"C": 64, "heads": 4, "encoder_layers": 6, "frame_layers": 9,
                "video_layers": 6, "N_f": 20, "N_v": 20, "points": 4,
                "fusion": "deformable", "chain_matching": true, "ffn_mult": 4,
                "in_channels": [64, 64, 64], "text_channels": 64},
      "loss": {"lambda_sim": 0.5, "lambda_dice": 1.0, "lambda_bce": 1.0,
               "lambda_cls": 1.0, "lr": 5e-05, "iterations": 300, "T": 8,
               "weight_decay": 0.05, "beta1": 0.9, "beta2": 0.999,
               "eps": 1e-08, "batch_size": 0},
      "synthetic": {"seed": 0, "T": 8, ...}  # SyntheticSpec fields
    }

Overrides use dotted keys (``--loss.lr=1e-3``); a bare field name is accepted
when it is unique across sections (``--lambda_sim=0.3``). Values parse as JSON
and fall back to plain strings.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .data import SyntheticSpec
from .losses import LossConfig
from .model import ModelConfig
from .nn import ConfigError

SECTIONS = ("model", "loss", "synthetic")
TOP_LEVEL = ("seed", "data", "out")


@dataclass
class RunConfig:
    seed: int = 0
    data: str | None = None
    out: str | None = None
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    synthetic: SyntheticSpec = field(default_factory=SyntheticSpec)

    def check(self):
        self.model.check()
        self.loss.check()
        self.synthetic.check()
        if not isinstance(self.seed, int) or self.seed < 0:
            raise ConfigError(f"seed must be a non-negative integer, got {self.seed!r}")

    def to_dict(self) -> dict:
        return {"seed": self.seed, "data": self.data, "out": self.out,
                "model": self.model.to_dict(), "loss": self.loss.to_dict(),
                "synthetic": _spec_dict(self.synthetic)}

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        unknown = sorted(set(d) - set(TOP_LEVEL) - set(SECTIONS))
        if unknown:
            raise ConfigError(f"unknown config keys: {unknown}")
        for sec in SECTIONS:
            if sec in d and not isinstance(d[sec], dict):
                raise ConfigError(f"config section '{sec}' must be an object")
        try:
            return cls(seed=d.get("seed", 0), data=d.get("data"), out=d.get("out"),
                       model=ModelConfig.from_dict(d.get("model", {})),
                       loss=LossConfig.from_dict(d.get("loss", {})),
                       synthetic=SyntheticSpec.from_dict(d.get("synthetic", {})))
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def save(self, path):
        Path(path).write_text(self.dumps())


def _spec_dict(spec: SyntheticSpec) -> dict:
    out = asdict(spec)
    for k, v in out.items():
        if isinstance(v, tuple):
            out[k] = list(v)
    return out


def load_config(path=None, overrides: list[str] | None = None) -> RunConfig:
    """Read a config file (or defaults when ``path`` is None) and apply overrides."""
    d: dict = {}
    if path is not None:
        try:
            d = json.loads(Path(path).read_text())
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from None
        if not isinstance(d, dict):
            raise ConfigError("config root must be an object")
    d = apply_overrides(d, overrides or [])
    cfg = RunConfig.from_dict(d)
    cfg.check()
    return cfg


def _field_sections() -> dict[str, list[str]]:
    owners: dict[str, list[str]] = {}
    defaults = RunConfig().to_dict()
    for sec in SECTIONS:
        for k in defaults[sec]:
            owners.setdefault(k, []).append(sec)
    return owners


def _parse_value(raw: str):
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def apply_overrides(d: dict, overrides: list[str]) -> dict:
    d = json.loads(json.dumps(d))
    owners = _field_sections()
    for item in overrides:
        if not item.startswith("--") or "=" not in item:
            raise ConfigError(f"override must look like --key=value, got {item!r}")
        key, raw = item[2:].split("=", 1)
        value = _parse_value(raw)
        parts = key.split(".")
        if len(parts) == 1 and key in TOP_LEVEL:
            d[key] = value
            continue
        if len(parts) == 1:
            secs = owners.get(key, [])
            if len(secs) != 1:
                hint = "unknown" if not secs else f"ambiguous between {secs}"
                raise ConfigError(f"override key '{key}' is {hint}")
            parts = [secs[0], key]
        if len(parts) != 2 or parts[0] not in SECTIONS:
            raise ConfigError(f"unknown override key '{key}'")
        d.setdefault(parts[0], {})[parts[1]] = value
    return d
