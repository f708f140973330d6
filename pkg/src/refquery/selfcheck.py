"""Built-in verification: gradient checks, assignment oracle, metric oracles."""
from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import nn
from . import tensor as T
from .data import SyntheticSpec, generate_synthetic
from .encoder import DeformableSelfAttention
from .gradcheck import finite_diff_check
from .losses import LossConfig, compute_losses
from .matching import hungarian
from .metrics import contour_accuracy, region_similarity
from .model import ModelConfig, RVOSModel
from .oracles import brute_boundary_f, brute_force_assignment, brute_iou

OP_TOL = 1e-4
END_TO_END_TOL = 1e-3


@dataclass
class CheckResult:
    module: str
    op: str
    passed: bool
    observed: float          # max relative error, mismatch count, ...
    detail: str = ""

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status}  {self.module:<12} {self.op:<22} {self.observed:.3e}  {self.detail}"


@dataclass
class SelfCheckReport:
    results: list[CheckResult] = field(default_factory=list)
    seconds: float = 0.0

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.results)

    def failures(self) -> list[CheckResult]:
        return [r for r in self.results if not r.passed]

    def format(self) -> str:
        lines = [r.line() for r in self.results]
        bad = self.failures()
        lines.append(f"{len(self.results) - len(bad)}/{len(self.results)} checks passed "
                     f"in {self.seconds:.1f}s")
        for r in bad:
            lines.append(f"failed: {r.module}.{r.op} observed {r.observed:.3e} {r.detail}".rstrip())
        return "\n".join(lines)


# ---------------------------------------------------------------- gradients
# Each case maps an rng to (scalar function, parameters). Inputs keep clear of
# the kinks of relu and of clamped/grid-aligned bilinear sampling.


def _weighted(out: T.Tensor, w: np.ndarray) -> T.Tensor:
    return (out * T.tensor(w)).sum()


def _unary(fn, low=-2.0, high=2.0):
    def build(rng):
        x = nn.param(rng.uniform(low, high, size=(3, 4)))
        w = rng.normal(size=(3, 4))
        return lambda: _weighted(fn(x), w), {"x": x}
    return build


def _binary(fn, positive_b=False):
    def build(rng):
        a = nn.param(rng.normal(size=(2, 3, 4)))
        b = nn.param(rng.uniform(0.5, 2.0, size=(3, 1)) if positive_b else rng.normal(size=(3, 1)))
        w = rng.normal(size=(2, 3, 4))
        return lambda: _weighted(fn(a, b), w), {"a": a, "b": b}
    return build


def _relu_input(rng):
    x = rng.uniform(0.2, 2.0, size=(3, 4)) * rng.choice([-1, 1], size=(3, 4))
    return nn.param(x)


def _case_relu(rng):
    x = _relu_input(rng)
    w = rng.normal(size=(3, 4))
    return lambda: _weighted(T.relu(x), w), {"x": x}


def _shaped(fn, shape=(2, 3, 4)):
    def build(rng):
        x = nn.param(rng.normal(size=shape))
        probe = fn(T.tensor(x.data))
        w = rng.normal(size=probe.shape)
        return lambda: _weighted(fn(x), w), {"x": x}
    return build


def _case_concat(rng):
    a, b = nn.param(rng.normal(size=(2, 3))), nn.param(rng.normal(size=(4, 3)))
    w = rng.normal(size=(6, 3))
    return lambda: _weighted(T.concat([a, b], axis=0), w), {"a": a, "b": b}


def _case_stack(rng):
    a, b = nn.param(rng.normal(size=(2, 3))), nn.param(rng.normal(size=(2, 3)))
    w = rng.normal(size=(2, 2, 3))
    return lambda: _weighted(T.stack([a, b], axis=1), w), {"a": a, "b": b}


def _case_matmul(rng):
    a, b = nn.param(rng.normal(size=(3, 4))), nn.param(rng.normal(size=(4, 2)))
    return lambda: T.matmul(a, b).sum(), {"a": a, "b": b}


def _case_matmul_batched(rng):
    a, b = nn.param(rng.normal(size=(2, 3, 4))), nn.param(rng.normal(size=(4, 5)))
    w = rng.normal(size=(2, 3, 5))
    return lambda: _weighted(T.matmul(a, b), w), {"a": a, "b": b}


def _case_layer_norm(rng):
    x = nn.param(rng.normal(size=(4, 8)))
    g = nn.param(rng.uniform(0.5, 1.5, size=8))
    b = nn.param(rng.normal(size=8))
    w = rng.normal(size=(4, 8))
    return lambda: _weighted(T.layer_norm(x, g, b), w), {"x": x, "gain": g, "bias": b}


def _off_grid(rng, size, n):
    # fractional pixel position in (0.15, 0.85) away from borders and centers
    cell = rng.integers(0, n - 1, size=size)
    return (cell + 0.5 + rng.uniform(0.15, 0.85, size=size)) / n


def _case_bilinear(rng):
    shapes = [(4, 5), (2, 3)]
    s = sum(h * w for h, w in shapes)
    values = nn.param(rng.normal(size=(2, s, 3)))
    lvl = np.array([0, 0, 1, 1])
    hs = np.array([shapes[l][0] for l in lvl])
    ws = np.array([shapes[l][1] for l in lvl])
    locx = _off_grid(rng, (2, 6, 4), ws[None, None, :])
    locy = _off_grid(rng, (2, 6, 4), hs[None, None, :])
    loc = nn.param(np.stack([locx, locy], axis=-1))
    w = rng.normal(size=(2, 6, 4, 3))
    return lambda: _weighted(T.bilinear_sample(values, shapes, loc, lvl), w), \
        {"values": values, "locations": loc}


def _case_attention(rng):
    mha = nn.MultiHeadAttention(rng, 8, 2)
    q = nn.param(rng.normal(size=(3, 8)))
    k = nn.param(rng.normal(size=(5, 8)))
    v = nn.param(rng.normal(size=(5, 8)))
    w = rng.normal(size=(3, 8))
    params = {"q": q, "k": k, "v": v, **dict(mha.named_parameters())}
    return lambda: _weighted(mha(q, k, v), w), params


def _case_deformable(rng):
    shapes = [(4, 4), (2, 2)]
    s = sum(h * w for h, w in shapes)
    attn = DeformableSelfAttention(rng, 8, 2, len(shapes), 2)
    # random (small) offset and weight projections so every path carries gradient
    attn.offset_proj.weight.data[...] = rng.normal(scale=0.05, size=attn.offset_proj.weight.shape)
    attn.weight_proj.weight.data[...] = rng.normal(scale=0.3, size=attn.weight_proj.weight.shape)
    x = nn.param(rng.normal(size=(2, s, 8)))
    pos = T.tensor(rng.normal(scale=0.1, size=(s, 8)))
    w = rng.normal(size=(2, s, 8))
    params = {"x": x, **dict(attn.named_parameters())}
    return lambda: _weighted(attn(x, shapes, pos), w), params


GRADIENT_CASES: dict[str, Callable] = {
    "add": _binary(T.add),
    "sub": _binary(T.sub),
    "mul": _binary(T.mul),
    "div": _binary(T.div, positive_b=True),
    "neg": _unary(T.neg),
    "power": _unary(lambda x: T.power(x, 3.0)),
    "exp": _unary(T.exp),
    "log": _unary(T.log, 0.5, 3.0),
    "sqrt": _unary(T.sqrt, 0.5, 3.0),
    "sigmoid": _unary(T.sigmoid, -4, 4),
    "softplus": _unary(T.softplus, -4, 4),
    "relu": _case_relu,
    "gelu": _unary(T.gelu, -3, 3),
    "sum": _shaped(lambda x: T.tsum(x, axis=1)),
    "mean": _shaped(lambda x: T.mean(x, axis=(0, 2), keepdims=True)),
    "reshape": _shaped(lambda x: T.reshape(x, (4, 6))),
    "transpose": _shaped(lambda x: T.transpose(x, (2, 0, 1))),
    "swapaxes": _shaped(lambda x: T.swapaxes(x, 0, 2)),
    "getitem": _shaped(lambda x: x[1, ::2, 1:]),
    "take": _shaped(lambda x: T.take(x, np.array([2, 0, 2, 1]), axis=1)),
    "concat": _case_concat,
    "stack": _case_stack,
    "matmul": _case_matmul,
    "matmul_batched": _case_matmul_batched,
    "softmax": _shaped(lambda x: T.softmax(x, axis=1)),
    "layer_norm": _case_layer_norm,
    "bilinear_sample": _case_bilinear,
    "multi_head_attention": _case_attention,
    "deformable_attention": _case_deformable,
}


def check_op(name: str, seeds=range(5), tol: float = OP_TOL) -> CheckResult:
    worst, notes = 0.0, []
    with T.using_dtype(np.float64):
        for seed in seeds:
            f, params = GRADIENT_CASES[name](np.random.default_rng(seed))
            rep = finite_diff_check(f, params, tol=tol)
            worst = max(worst, rep.worst)
            notes += [f"seed {seed}: {d}" for d in rep.diagnostics]
    passed = not notes and worst <= tol
    return CheckResult("tensor-core", name, passed, worst, "; ".join(notes))


def off_grid(model, seed: int = 0, scale: float = 0.05):
    """Give deformable offset projections small random weights.

    At initialization every sampling point sits exactly on a pixel center,
    where bilinear interpolation has a kink and central differences cannot
    agree with the one-sided adjoint.
    """
    rng = np.random.default_rng(seed)
    for name, p in model.named_parameters():
        if name.endswith("offset_proj.weight"):
            p.data[...] = rng.normal(scale=scale, size=p.shape)
    return model


def tiny_setup(seed: int = 0, layers=(6, 9, 6)):
    """A two-frame clip with 8x8 finest maps and a C=8 model, built in float64."""
    spec = SyntheticSpec(seed=seed, T=2, base=(32, 32), channels=(8, 8, 8), C_t=8, N_t=4,
                         num_objects=2, radius=(5.0, 8.0))
    clip = generate_synthetic(spec)
    cfg = ModelConfig(C=8, heads=2, encoder_layers=layers[0], frame_layers=layers[1],
                      video_layers=layers[2], in_channels=[8, 8, 8], text_channels=8)
    with T.using_dtype(np.float64):
        model = off_grid(RVOSModel(cfg, seed=seed), seed)
    return clip, model


def check_end_to_end(seed: int = 0, tol: float = END_TO_END_TOL, n_params: int = 16,
                     coords: int = 2) -> CheckResult:
    """Training loss gradient w.r.t. the finest input map and random parameter tensors."""
    clip, model = tiny_setup(seed)
    rng = np.random.default_rng(seed + 100)
    named = list(model.named_parameters())
    picks = rng.choice(len(named), size=min(n_params, len(named)), replace=False)
    cfg = LossConfig()
    with T.using_dtype(np.float64):
        visual = [T.tensor(v, requires_grad=True) for v in clip.visual]
        tokens = T.tensor(clip.text_tokens, requires_grad=True)
        params = {"input.visual0": visual[0], "input.text": tokens}
        params.update({named[i][0]: named[i][1] for i in sorted(picks)})

        def f():
            out = model.forward_features(visual, tokens)
            return compute_losses(out, clip, cfg)[0]

        rep = finite_diff_check(f, params, tol=tol, max_coords=coords * 4, seed=seed)
    worst_name = max(rep.max_rel_error, key=rep.max_rel_error.get, default="")
    detail = "; ".join(rep.diagnostics) or f"worst at {worst_name}"
    return CheckResult("training", "end_to_end_loss", rep.passed, rep.worst, detail)


def gradient_suite(ops=None, seeds=range(5), end_to_end: bool = True) -> list[CheckResult]:
    results = [check_op(name, seeds) for name in (ops or GRADIENT_CASES)]
    if end_to_end:
        results.append(check_end_to_end())
    return results


# -------------------------------------------------------------- assignment


def _random_cost(rng, n):
    kind = rng.integers(3)
    if kind == 0:
        return rng.random((n, n))
    if kind == 1:
        return rng.integers(0, 4, size=(n, n)).astype(float)     # many ties
    return rng.normal(size=(n, n)) * 10 ** rng.uniform(-3, 3)


def hungarian_suite(per_size: int = 200, sizes=range(2, 8), seed: int = 0) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    results = []
    for n in sizes:
        mismatches = 0
        for _ in range(per_size):
            c = _random_cost(rng, n)
            _, best = brute_force_assignment(c)
            got = hungarian(c)
            recomputed = sum(c[i, got.permutation[i]] for i in range(n))
            if got.total_cost != best or recomputed != best:
                mismatches += 1
        results.append(CheckResult("matching", f"hungarian_N{n}", mismatches == 0, float(mismatches),
                                   f"{per_size} matrices"))
    return results


# ----------------------------------------------------------------- metrics


def random_mask_pair(rng, max_side: int = 32):
    h, w = rng.integers(1, max_side + 1, size=2)
    kind = rng.integers(4)
    if kind == 0:
        a = rng.random((h, w)) < rng.uniform(0.1, 0.9)
        b = rng.random((h, w)) < rng.uniform(0.1, 0.9)
    else:
        ys, xs = np.mgrid[0:h, 0:w]
        def blob():
            cy, cx, r = rng.uniform(0, h), rng.uniform(0, w), rng.uniform(1, max(h, w) / 2)
            return (ys - cy) ** 2 + (xs - cx) ** 2 <= r * r
        a, b = blob(), blob()
        if kind == 2:
            b = np.zeros_like(b)
        elif kind == 3:
            b = a.copy()
            b[rng.integers(h), rng.integers(w)] ^= True
    return a.astype(np.uint8), b.astype(np.uint8)


def metric_suite(count: int = 50, seed: int = 0) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    j_bad = f_bad = 0
    for _ in range(count):
        a, b = random_mask_pair(rng)
        j_bad += region_similarity(a, b) != brute_iou(a.tolist(), b.tolist())
        f_bad += contour_accuracy(a, b) != brute_boundary_f(a.tolist(), b.tolist())
    a, _ = random_mask_pair(rng)
    a[0, 0] = 1
    identical = region_similarity(a, a) == 1 and contour_accuracy(a, a) == 1
    empty = np.zeros_like(a)
    disjoint = region_similarity(empty, a) == 0 and contour_accuracy(empty, a) == 0
    return [CheckResult("evaluation", "region_similarity", j_bad == 0, float(j_bad), f"{count} masks"),
            CheckResult("evaluation", "contour_accuracy", f_bad == 0, float(f_bad), f"{count} masks"),
            CheckResult("evaluation", "identical_and_empty", identical and disjoint, 0.0 if identical and disjoint else 1.0)]


def run_selfcheck(ops=None, seeds=range(5), hungarian_per_size: int = 200,
                  metric_count: int = 50) -> SelfCheckReport:
    start = time.perf_counter()
    report = SelfCheckReport()
    report.results += gradient_suite(ops, seeds)
    report.results += hungarian_suite(hungarian_per_size)
    report.results += metric_suite(metric_count)
    report.seconds = time.perf_counter() - start
    return report
