"""Finite-difference gradient checks for every differentiable op.

Each case builds a scalar ``sum(op(inputs) * R)`` for a fixed random ``R``
and compares analytic gradients with four-point central differences.  Inputs are
drawn away from the kinks of relu, max pooling and smooth L1 so that a
perturbation never crosses one.
"""
from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable, Iterator

import numpy as np

from . import tensor as T
from .blocks import Block, make_rfb, make_rfb_s
from .nn import conv_layers
from .tensor import Tensor

TOLERANCE = 1e-6
EPS = 1e-5


@dataclass
class CheckResult:
    op: str
    shape: tuple
    max_rel_error: float
    passed: bool


def rel_error(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.size == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-8)
    return float(np.max(np.abs(a - b) / denom))


def numerical_grad(f: Callable[[], np.ndarray], arr: np.ndarray, weights: np.ndarray, eps: float = EPS,
                   indices=None) -> np.ndarray:
    """Derivative of ``sum(f() * weights)`` w.r.t. entries of ``arr``.

    Uses the four-point central stencil.  ``arr`` is perturbed in place and
    restored; output arrays are differenced elementwise before the weighted
    sum, which keeps cancellation error proportional to the touched outputs
    rather than to the whole sum.  Returns values at flat ``indices`` or the
    full gradient.
    """
    flat = arr.reshape(-1)
    idx = range(flat.size) if indices is None else indices
    out = []
    for i in idx:
        orig = flat[i]
        vals = []
        for step in (2, 1, -1, -2):
            flat[i] = orig + step * eps
            vals.append(f())
        flat[i] = orig
        # grouped so untouched outputs cancel exactly
        diff = (8 * (vals[1] - vals[2]) - (vals[0] - vals[3])) / (12 * eps)
        out.append(float((diff * weights).sum()))
    out = np.asarray(out)
    return out.reshape(arr.shape) if indices is None else out


def check(build: Callable[[list[Tensor]], Tensor], arrays: list[np.ndarray], rng: np.random.Generator,
          max_entries: int | None = None, eps: float = EPS) -> float:
    """Max relative error between analytic and numerical gradients of
    ``sum(build(leaves) * R)`` over all leaves; ``|R|`` lies in [0.5, 1.5]."""
    leaves = [Tensor(a, requires_grad=True) for a in arrays]
    out = build(leaves)
    weights = rng.uniform(0.5, 1.5, size=out.shape) * rng.choice([-1.0, 1.0], size=out.shape)
    T.backward(out, weights.astype(out.dtype))
    analytic = [l.grad if l.grad is not None else np.zeros_like(l.data) for l in leaves]

    def f() -> np.ndarray:
        return build([Tensor(l.data) for l in leaves]).data

    worst = 0.0
    for leaf, g in zip(leaves, analytic):
        size = leaf.data.size
        if max_entries is not None and size > max_entries:
            idx = np.sort(rng.choice(size, max_entries, replace=False))
            num = numerical_grad(f, leaf.data, weights, eps, idx)
            worst = max(worst, rel_error(g.reshape(-1)[idx], num))
        else:
            worst = max(worst, rel_error(g, numerical_grad(f, leaf.data, weights, eps)))
    return worst


def _spread(rng, shape, gap=0.05):
    """Distinct values separated by at least ``gap`` (no max-pool ties)."""
    n = int(np.prod(shape))
    return ((rng.permutation(n) - n / 2) * gap).reshape(shape) + rng.uniform(0, gap / 10, size=shape)


def _away_from(rng, shape, points, margin=0.05):
    x = rng.standard_normal(shape) * 1.5
    for p in points:
        close = np.abs(np.abs(x) - p) < margin
        x[close] += np.sign(x[close] + 1e-12) * 2 * margin
    return x


# ---------------------------------------------------------------------------
# case generators: yield (label, build, arrays, max_entries)


def _conv_cases(rng) -> Iterator:
    kernels = [(3, 3), (1, 3), (3, 1), (1, 1), (3, 3)]
    for i in range(20):
        kh, kw = kernels[i % len(kernels)]
        d = (1, 2, 3, 5)[i % 4]
        s = 2 if i % 3 == 2 else 1
        n, cin, cout = int(rng.integers(1, 3)), int(rng.integers(1, 4)), int(rng.integers(1, 4))
        h = int(rng.integers(max(kh + (kh - 1) * (d - 1) - 2 * d, 1) + 2, 9))
        w = int(rng.integers(max(kw + (kw - 1) * (d - 1) - 2 * d, 1) + 2, 9))
        pad = ((kh - 1) * d // 2, (kw - 1) * d // 2)
        x = rng.standard_normal((n, cin, h, w))
        wt = rng.standard_normal((cout, cin, kh, kw))
        b = rng.standard_normal(cout)
        label = f"conv2d k={kh}x{kw} d={d} s={s} x={x.shape}"

        def build(t, s=s, pad=pad, d=d):
            return T.conv2d(t[0], t[1], t[2], stride=s, padding=pad, dilation=d)

        yield label, build, [x, wt, b], None


def _pool_cases(rng) -> Iterator:
    for i in range(20):
        kind = "max" if i % 2 == 0 else "avg"
        d = (1, 2, 3)[i % 3]
        s = 2 if i % 5 == 4 else 1
        h, w = int(rng.integers(4, 9)), int(rng.integers(4, 9))
        x = _spread(rng, (int(rng.integers(1, 3)), int(rng.integers(1, 3)), h, w))

        def build(t, kind=kind, d=d, s=s):
            return T.pool2d(t[0], kind, 3, s, d, d)

        yield f"pool2d {kind} d={d} s={s} x={x.shape}", build, [x], None


def _relu_cases(rng) -> Iterator:
    for _ in range(20):
        shape = tuple(int(v) for v in rng.integers(1, 6, size=4))
        yield f"relu x={shape}", lambda t: T.relu(t[0]), [_away_from(rng, shape, [0.0])], None


def _concat_cases(rng) -> Iterator:
    for _ in range(20):
        n, h, w = (int(v) for v in rng.integers(1, 5, size=3))
        parts = [rng.standard_normal((n, int(rng.integers(1, 4)), h, w)) for _ in range(int(rng.integers(1, 4)))]
        yield f"concat parts={len(parts)}", lambda t: T.concat_channels(t), parts, None


def _scale_add_cases(rng) -> Iterator:
    for _ in range(20):
        shape = tuple(int(v) for v in rng.integers(1, 6, size=4))
        alpha = float(rng.uniform(-2, 2))
        yield (f"scale_add alpha={alpha:.3f}", lambda t, a=alpha: T.scale_add(t[0], t[1], a),
               [rng.standard_normal(shape), rng.standard_normal(shape)], None)


def _softmax_cases(rng) -> Iterator:
    for _ in range(20):
        n, k = int(rng.integers(1, 8)), int(rng.integers(2, 8))
        labels = rng.integers(0, k, size=n)
        yield f"softmax_ce logits=({n},{k})", lambda t, l=labels: T.softmax_ce(t[0], l), [rng.standard_normal((n, k)) * 2], None


def _smooth_l1_cases(rng) -> Iterator:
    for _ in range(20):
        shape = (int(rng.integers(1, 10)), 4)
        target = rng.standard_normal(shape)
        pred = target + _away_from(rng, shape, [1.0])
        yield f"smooth_l1 x={shape}", lambda t: T.smooth_l1(t[0], t[1]), [pred, target], None


def _block_cases(rng) -> Iterator:
    for i in range(20):
        c = int(rng.integers(2, 5))
        stride = 2 if i % 4 == 2 else 1
        spec = make_rfb_s(c, c, bottleneck=2) if i % 2 else make_rfb(c, c, stride=stride, bottleneck=2)
        block = Block(spec, dtype=np.float64)
        params = list(block.parameters().values())
        for p in params:
            p.data = rng.standard_normal(p.shape) * 0.5
        h, w = int(rng.integers(5, 9)), int(rng.integers(5, 9))
        x = rng.standard_normal((1, c, h, w))

        keys = [id(p) for p in params]

        def build(t, block=block, keys=keys):
            return _forward_with(block, t[0], dict(zip(keys, t[1:])))

        yield f"{spec.name} block c={c} s={spec.stride} x={x.shape}", build, [x] + [p.data.copy() for p in params], 6


def _forward_with(block: Block, x: Tensor, substitute: dict) -> Tensor:
    """Run ``block`` with each parameter tensor replaced by its leaf."""
    originals = []
    for conv in conv_layers(block):
        originals.append((conv, conv.weight, conv.bias))
        conv.weight = substitute[id(conv.weight)]
        if conv.bias is not None:
            conv.bias = substitute[id(conv.bias)]
    try:
        return block(x)
    finally:
        for conv, w, b in originals:
            conv.weight, conv.bias = w, b


GROUPS = {
    "conv": [("conv2d", _conv_cases)],
    "pool": [("pool2d", _pool_cases)],
    "elementwise": [("relu", _relu_cases), ("concat", _concat_cases), ("scale_add", _scale_add_cases)],
    "loss": [("softmax_ce", _softmax_cases), ("smooth_l1", _smooth_l1_cases)],
    "block": [("rfb_block", _block_cases)],
}


def run(ops: str = "all", seed: int = 0, tolerance: float = TOLERANCE) -> list[CheckResult]:
    groups = list(GROUPS) if ops == "all" else [ops]
    results = []
    for g in groups:
        if g not in GROUPS:
            raise ValueError(f"unknown op group {g!r}; expected all or one of {sorted(GROUPS)}")
        for k, (name, gen) in enumerate(GROUPS[g]):
            rng = np.random.default_rng(np.random.SeedSequence([seed, list(GROUPS).index(g), k]))
            for label, build, arrays, max_entries in gen(rng):
                err = check(build, [np.asarray(a, dtype=np.float64) for a in arrays], rng, max_entries)
                results.append(CheckResult(name, label, err, err <= tolerance))
    return results


def summarize(results: list[CheckResult]) -> list[tuple[str, int, float, bool]]:
    """One row per op: (op, cases, worst error, all passed)."""
    rows = {}
    for r in results:
        n, worst, ok = rows.get(r.op, (0, 0.0, True))
        rows[r.op] = (n + 1, max(worst, r.max_rel_error), ok and r.passed)
    return [(op, *v) for op, v in rows.items()]


def format_table(results: list[CheckResult], elapsed: float | None = None) -> str:
    lines = [f"{'op':<12}{'cases':>6}{'max rel err':>14}  result"]
    for op, n, worst, ok in summarize(results):
        lines.append(f"{op:<12}{n:>6}{worst:>14.3e}  {'PASS' if ok else 'FAIL'}")
    if elapsed is not None:
        lines.append(f"elapsed {elapsed:.1f}s")
    return "\n".join(lines)


def timed_run(ops: str = "all", seed: int = 0) -> tuple[list[CheckResult], float]:
    t0 = time.perf_counter()
    res = run(ops, seed)
    return res, time.perf_counter() - t0
