"""Command-line entry point: gen-synthetic, train, infer, eval, selfcheck.

Exit codes: 0 success, 1 validation error (bad config, input files, usage),
2 runtime or numeric failure (including failed self-checks).
"""
from __future__ import annotations

import argparse
import dataclasses
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

from . import tensor as T
from .config import RunConfig, load_config
from .data import ConfigError, LoadError, generate_synthetic, load_clip, dataset_entries, save_clip, \
    write_dataset_manifest
from .encoder import NumericError
from .metrics import evaluate_dataset, read_prediction, write_prediction
from .train import (CheckpointError, TrainingError, _atomic_write, load_model, save_model, train,
                    write_loss_csv)

CHECKPOINT_NAME = "checkpoint.rqck"
LOSS_NAME = "loss.csv"

VALIDATION_ERRORS = (ConfigError, LoadError, CheckpointError, FileNotFoundError)
RUNTIME_ERRORS = (NumericError, TrainingError, ArithmeticError, RuntimeError, OSError)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def threads() -> int:
    """Worker count for per-clip parallel work, capped by REFQUERY_THREADS."""
    raw = os.environ.get("REFQUERY_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        raise ConfigError(f"REFQUERY_THREADS must be an integer, got {raw!r}") from None


def _config(args, extra) -> RunConfig:
    cfg = load_config(args.config, extra)
    for key in ("data", "out", "seed"):
        value = getattr(args, key, None)
        if value is not None:
            setattr(cfg, key, value)
    cfg.check()
    return cfg


# ------------------------------------------------------------------ commands


def cmd_gen_synthetic(args, extra) -> int:
    cfg = _config(args, extra)
    if args.count < 1:
        raise UsageError("gen-synthetic: --count must be at least 1")
    out = Path(args.out)
    names = []
    for i in range(args.count):
        spec = dataclasses.replace(cfg.synthetic, seed=cfg.synthetic.seed + i)
        clip = generate_synthetic(spec, clip_id=f"clip_{spec.seed:04d}")
        save_clip(clip, out / clip.clip_id)
        names.append(clip.clip_id)
    path = write_dataset_manifest(out, names)
    print(f"wrote {len(names)} clips to {out} ({path.name})")
    return 0


def cmd_train(args, extra) -> int:
    cfg = _config(args, extra)
    if cfg.data is None or cfg.out is None:
        raise UsageError("train: both data and out are required (flags or config)")
    clips = [load_clip(p) for p in dataset_entries(cfg.data)]
    out = Path(cfg.out)
    ckpt = out / CHECKPOINT_NAME
    resume = args.resume
    if resume is not None and not Path(resume).is_file():
        raise LoadError("resume", f"no checkpoint at {resume}")
    every = max(1, args.log_every)

    def log(it, rec):
        if (it + 1) % every == 0 or it + 1 == cfg.loss.iterations:
            print(f"iter {it + 1:5d}  L_v {rec.L_v:.4f}  L_f {rec.L_f:.4f}  "
                  f"L_sim {rec.L_sim:.4f}  L_train {rec.L_train:.4f}", flush=True)

    result = train(clips, cfg.model, cfg.loss, seed=cfg.seed, resume=resume, log=log)
    end = result.start_iteration + len(result.history)
    save_model(ckpt, result.model, result.optimizer, {"iteration": end, "seed": cfg.seed})
    write_loss_csv(out / LOSS_NAME, result.history, start=result.start_iteration,
                   append=resume is not None)
    _atomic_write(out / "config.json", cfg.dumps().encode())
    print(f"checkpoint {ckpt} (iteration {end}); losses {out / LOSS_NAME}")
    return 0


def _infer_one(model, manifest, out: Path, threshold: float) -> str:
    clip = load_clip(manifest)
    masks = model.infer(clip, threshold)
    write_prediction(out / f"{clip.clip_id}.json", clip.clip_id, masks, clip.video_id)
    return clip.clip_id


def cmd_infer(args, extra) -> int:
    expect = _config(args, extra).model if args.config or extra else None
    model, _, _ = load_model(args.checkpoint, expect=expect)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    entries = dataset_entries(args.clips)
    with ThreadPoolExecutor(max_workers=threads()) as pool:
        done = list(pool.map(lambda m: _infer_one(model, m, out, args.threshold), entries))
    print(f"wrote predictions for {len(done)} clips to {out}")
    return 0


def cmd_eval(args, extra) -> int:
    if extra:
        raise UsageError(f"eval: unexpected arguments {extra}")
    # validate every prediction file up front so format errors surface as such
    preds = sorted(Path(args.pred).glob("*.json"))
    with ThreadPoolExecutor(max_workers=threads()) as pool:
        list(pool.map(read_prediction, preds))
    report = evaluate_dataset(args.pred, args.gt, args.tol)
    print(report.table())
    if args.csv:
        Path(args.csv).write_text(report.to_csv())
    return 0


def cmd_selfcheck(args, extra) -> int:
    from .selfcheck import run_selfcheck

    if extra:
        raise UsageError(f"selfcheck: unexpected arguments {extra}")
    per_size = 20 if args.quick else 200
    seeds = range(2) if args.quick else range(5)
    if args.corrupt:
        with T.corrupt_adjoint(args.corrupt):
            report = run_selfcheck(seeds=seeds, hungarian_per_size=per_size)
    else:
        report = run_selfcheck(seeds=seeds, hungarian_per_size=per_size)
    print(report.format())
    return 0 if report.passed else 2


# ------------------------------------------------------------------- parsing


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="refquery", description=__doc__.splitlines()[0],
                epilog="Config overrides: any --section.key=value (e.g. --loss.lr=1e-3).")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    g = sub.add_parser("gen-synthetic", help="write seeded synthetic clips")
    g.add_argument("--config", help="run config JSON (its 'synthetic' section is used)")
    g.add_argument("--out", required=True, help="output directory")
    g.add_argument("--count", type=int, default=5, help="number of clips (seeds spec.seed + i)")
    g.set_defaults(fn=cmd_gen_synthetic)

    t = sub.add_parser("train", help="train a model, write checkpoint and loss CSV")
    t.add_argument("--config")
    t.add_argument("--data", help="dataset manifest or clip directory")
    t.add_argument("--out", help="output directory")
    t.add_argument("--seed", type=int)
    t.add_argument("--resume", help="checkpoint to continue from")
    t.add_argument("--log-every", type=int, default=10)
    t.set_defaults(fn=cmd_train)

    i = sub.add_parser("infer", help="predict masks for clips")
    i.add_argument("--checkpoint", required=True)
    i.add_argument("--clips", required=True, help="dataset manifest or clip directory")
    i.add_argument("--out", required=True, help="prediction directory")
    i.add_argument("--config", help="optional config; its model section must match the checkpoint")
    i.add_argument("--threshold", type=float, default=0.5)
    i.set_defaults(fn=cmd_infer)

    e = sub.add_parser("eval", help="J, F and J&F of predictions against ground truth")
    e.add_argument("--pred", required=True, help="prediction directory")
    e.add_argument("--gt", required=True, help="dataset manifest or clip directory")
    e.add_argument("--csv", help="also write the table as CSV")
    e.add_argument("--tol", type=float, default=None, help="boundary tolerance in pixels")
    e.set_defaults(fn=cmd_eval)

    s = sub.add_parser("selfcheck", help="gradient, assignment and metric oracle checks")
    s.add_argument("--quick", action="store_true", help="fewer seeds and matrices")
    s.add_argument("--corrupt", metavar="OP", help=argparse.SUPPRESS)   # negative-control hook
    s.set_defaults(fn=cmd_selfcheck)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args, extra = parser.parse_known_args(argv)
        if args.command is None:
            parser.print_help()
            return 1
        return args.fn(args, extra)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except VALIDATION_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except RUNTIME_ERRORS as exc:
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
