"""Acceptance suite: one test per headline criterion, each printing a PASS/FAIL line."""
import time

import numpy as np
import pytest

from refquery import nn
from refquery import tensor as T
from refquery.data import SyntheticSpec, generate_synthetic
from refquery.losses import LossConfig
from refquery.matching import aggregate, hungarian, reorder
from refquery.metrics import jf_score
from refquery.model import ModelConfig
from refquery.oracles import brute_force_assignment
from refquery.selfcheck import gradient_suite, metric_suite
from refquery.train import load_model, save_model, train

from conftest import small_model_config, small_spec


def test_hungarian_matches_exhaustive_search(criterion):
    rng = np.random.default_rng(2024)
    mismatches = 0
    for n in range(2, 8):
        for k in range(200):
            kind = k % 3
            if kind == 0:
                c = rng.random((n, n))
            elif kind == 1:
                c = rng.integers(0, 4, size=(n, n)).astype(float)
            else:
                c = rng.normal(size=(n, n)) * 10 ** rng.uniform(-3, 3)
            _, best = brute_force_assignment(c)
            mismatches += hungarian(c).total_cost != best
    big = rng.random((500, 500))
    start = time.perf_counter()
    hungarian(big)
    seconds = time.perf_counter() - start
    ok = mismatches == 0 and seconds < 1.0
    criterion("hungarian oracle (200 per N=2..7, N=500 < 1 s)", ok,
              f"{mismatches} mismatches of 1200, N=500 in {seconds:.3f} s")
    assert ok


def test_gradient_suite(criterion):
    start = time.perf_counter()
    results = gradient_suite()
    seconds = time.perf_counter() - start
    ops = [r for r in results if r.op != "end_to_end_loss"]
    e2e = [r for r in results if r.op == "end_to_end_loss"]
    worst_op = max(r.observed for r in ops)
    ok = all(r.passed for r in results) and len(e2e) == 1 and seconds < 120
    criterion("gradient suite (ops <= 1e-4, end-to-end <= 1e-3, < 2 min)", ok,
              f"{len(ops)} ops worst {worst_op:.2e}, end-to-end {e2e[0].observed:.2e}, {seconds:.1f} s")
    assert ok, [r.line() for r in results if not r.passed]


def test_aggregation_invariants(criterion):
    failures = []
    for seed in range(50):
        rng = np.random.default_rng(seed)
        t = int(rng.integers(1, 7))
        q = T.tensor(rng.normal(scale=2, size=(t, 5, 8)))
        score = nn.Linear(rng, 8, 1)
        out, w = aggregate(q, score, return_weights=True)
        if np.abs(w.data.sum(axis=0) - 1).max() > 1e-6:
            failures.append(f"seed {seed}: weights")
        lo, hi = q.data.min(axis=0) - 1e-6, q.data.max(axis=0) + 1e-6
        if not ((out.data >= lo) & (out.data <= hi)).all():
            failures.append(f"seed {seed}: hull")
        one = T.tensor(q.data[:1])
        if not np.allclose(aggregate(one, score).data, q.data[0], rtol=1e-6, atol=1e-7):
            failures.append(f"seed {seed}: T=1")
        score.weight.data[...] = 0
        score.bias.data[...] = 0
        if not np.allclose(aggregate(q, score).data, q.data.mean(axis=0), rtol=1e-5, atol=1e-6):
            failures.append(f"seed {seed}: uniform mean")
    criterion("aggregation invariants over 50 seeds", not failures,
              f"{len(failures)} violations" + (f" ({failures[:3]})" if failures else ""))
    assert not failures


def test_reorder_recovers_permutations(criterion):
    rng = np.random.default_rng(7)
    wrong = 0
    for _ in range(100):
        t, n = int(rng.integers(2, 6)), int(rng.integers(2, 21))
        base = rng.normal(size=(n, 16))
        perms = [np.arange(n)] + [rng.permutation(n) for _ in range(t - 1)]
        frames = np.empty((t, n, 16))
        for i, p in enumerate(perms):
            frames[i][p] = base
        got = reorder(frames).permutations
        wrong += any(not np.array_equal(g, p) for g, p in zip(got, perms))
    criterion("reorder recovers hidden permutations (100 instances)", wrong == 0,
              f"{wrong} of 100 wrong")
    assert wrong == 0


def test_metric_oracles(criterion):
    results = metric_suite(50, seed=3)
    ok = all(r.passed for r in results)
    criterion("metric oracles on 50 masks, identical = 1, empty vs non-empty = 0", ok,
              ", ".join(f"{r.op}={'ok' if r.passed else int(r.observed)}" for r in results))
    assert ok


@pytest.mark.slow
def test_desk_scale_overfit(criterion):
    clips = [generate_synthetic(SyntheticSpec(seed=s, T=8, channels=(64, 64, 64))) for s in range(5)]
    model_cfg = ModelConfig(C=32)
    assert (model_cfg.encoder_layers, model_cfg.frame_layers, model_cfg.video_layers) == (6, 9, 6)
    assert model_cfg.N_f == model_cfg.N_v == 20
    loss_cfg = LossConfig(lr=1e-3, batch_size=1, iterations=300)
    start = time.perf_counter()
    result = train(clips, model_cfg, loss_cfg, seed=0)
    scores = [jf_score(result.model.infer(c), c.target_mask())[2] for c in clips]
    seconds = time.perf_counter() - start
    first, last = result.history[0].L_train, result.history[-1].L_train
    drop = 1 - last / first
    mean_jf = float(np.mean(scores))
    ok = drop >= 0.8 and mean_jf >= 0.8 and seconds < 900
    criterion("desk-scale overfit (>= 80% loss drop, J&F >= 0.80, < 15 min)", ok,
              f"L_train {first:.3f} -> {last:.3f} ({100 * drop:.1f}% drop), "
              f"J&F {mean_jf:.3f} (per clip {', '.join(f'{s:.3f}' for s in scores)}), {seconds:.0f} s")
    assert ok


def test_determinism(criterion, tmp_path):
    clips = [generate_synthetic(small_spec(seed=s)) for s in range(2)]
    cfg = LossConfig(lr=1e-3, iterations=4, T=2, batch_size=1)
    ckpts, preds = [], []
    for run in ("a", "b"):
        r = train(clips, small_model_config(), cfg, seed=11)
        save_model(tmp_path / run, r.model, r.optimizer, {"iteration": 4, "seed": 11})
        ckpts.append((tmp_path / run).read_bytes())
        model, _, _ = load_model(tmp_path / run)
        preds.append(b"".join(model.infer(c).tobytes() for c in clips))
    ok = ckpts[0] == ckpts[1] and preds[0] == preds[1]
    criterion("determinism (bit-identical checkpoints and predictions)", ok,
              f"checkpoints {'equal' if ckpts[0] == ckpts[1] else 'differ'}, "
              f"predictions {'equal' if preds[0] == preds[1] else 'differ'}")
    assert ok


def test_loss_identity(criterion):
    clips = [generate_synthetic(small_spec(seed=s)) for s in range(3)]
    hist = train(clips, small_model_config(), LossConfig(lr=1e-3, iterations=20, T=2, batch_size=2),
                 seed=0).history
    worst = max(abs(r.L_train - (r.L_v + r.L_f + 0.5 * r.L_sim)) for r in hist)
    criterion("loss identity L_train = L_v + L_f + 0.5 L_sim (every iteration)", worst <= 1e-6,
              f"max deviation {worst:.2e} over {len(hist)} iterations")
    assert worst <= 1e-6
