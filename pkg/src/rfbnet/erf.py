"""Effective receptive fields by gradient backpropagation.

For a block (or any NCHW -> NCHW callable) we seed a unit gradient at the
center output location of every output channel, collect |d y / d x| at the
input, sum it over input channels, average it over channels and random
standard-normal inputs, and normalize the result to a peak of 1.

Blocks given as :class:`BlockSpec` are measured at random MSRA
initialization, averaged over seeds.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Mapping

import numpy as np

from . import tensor as T
from .blocks import Block, BlockSpec
from .data import write_pgm
from .tensor import Tensor
from .train import msra_init

TAU = 0.05


@dataclass
class ErfMap:
    grid: np.ndarray  # (H, W), peak 1 unless all-zero
    area_at_tau: int
    center_ratio: float
    footprint: tuple[int, int, int, int] | None  # (row0, col0, row1, col1) inclusive
    degenerate: bool = False

    @property
    def footprint_size(self) -> tuple[int, int]:
        if self.footprint is None:
            return 0, 0
        r0, c0, r1, c1 = self.footprint
        return r1 - r0 + 1, c1 - c0 + 1

    def metrics(self) -> dict:
        return {"area_at_tau": self.area_at_tau, "center_ratio": self.center_ratio,
                "footprint_h": self.footprint_size[0], "footprint_w": self.footprint_size[1]}


def center_ratio(grid: np.ndarray, footprint) -> float:
    """Mean over the central third of the footprint radius divided by the
    mean over the outer third.

    Distances are Chebyshev from the footprint center, and both means run
    over covered (nonzero) pixels only, so sparse dilated supports are not
    diluted by the holes between taps.
    """
    if footprint is None:
        return float("nan")
    r0, c0, r1, c1 = footprint
    cy, cx = (r0 + r1) / 2, (c0 + c1) / 2
    radius = max(r1 - r0, c1 - c0) / 2
    if radius == 0:
        return float("inf")
    rows, cols = np.indices(grid.shape)
    dist = np.maximum(np.abs(rows - cy), np.abs(cols - cx))
    covered = grid > 0
    inner = grid[covered & (dist <= radius / 3)]
    outer = grid[covered & (dist > 2 * radius / 3) & (dist <= radius)]
    if not outer.size:
        return float("inf")
    return float(inner.mean() / outer.mean())


def summarize(raw: np.ndarray, tau: float = TAU) -> ErfMap:
    peak = raw.max()
    if peak <= 0:
        return ErfMap(np.zeros_like(raw), 0, float("nan"), None, degenerate=True)
    grid = raw / peak
    rows, cols = np.nonzero(grid)
    fp = (int(rows.min()), int(cols.min()), int(rows.max()), int(cols.max()))
    return ErfMap(grid, int((grid >= tau).sum()), center_ratio(grid, fp), fp)


def raw_erf(fn: Callable[[Tensor], Tensor], in_channels: int, input_size: int, samples: int,
            rng: np.random.Generator, dtype=np.float64) -> np.ndarray:
    """Unnormalized mean |gradient| map.

    Each output channel gets its own copy of the input along the batch axis,
    so a single backward pass yields all per-channel gradients.
    """
    acc = np.zeros((input_size, input_size))
    count = 0
    _, out_channels, ho, wo = fn(Tensor(np.zeros((1, in_channels, input_size, input_size), dtype=dtype))).shape
    for _ in range(samples):
        x0 = rng.standard_normal((1, in_channels, input_size, input_size)).astype(dtype)
        x = Tensor(np.repeat(x0, out_channels, axis=0), requires_grad=True)
        y = fn(x)
        seed = np.zeros(y.shape, dtype=y.dtype)
        seed[np.arange(out_channels), np.arange(out_channels), ho // 2, wo // 2] = 1.0
        T.backward(y, seed)
        g = np.zeros_like(x.data) if x.grad is None else x.grad
        acc += np.abs(g).sum(axis=1).mean(axis=0)
        count += 1
    return acc / count


def _as_callable(target, seed: int, dtype):
    if isinstance(target, BlockSpec):
        block = msra_init(Block(target, dtype=dtype), seed)
        return block, target.in_channels
    if isinstance(target, Block):
        return target, target.spec.in_channels
    raise TypeError("pass a BlockSpec/Block, or call raw_erf with an explicit callable")


def erf(target, input_size: int = 31, samples: int = 32, seed: int = 0, tau: float = TAU,
        dtype=np.float64) -> ErfMap:
    """ERF of a block spec (freshly initialized with ``seed``) or block."""
    fn, cin = _as_callable(target, seed, dtype)
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 1]))
    return summarize(raw_erf(fn, cin, input_size, samples, rng, dtype), tau)


def compare(blocks: Mapping[str, BlockSpec], input_size: int = 31, seeds=range(10), samples: int = 8,
            tau: float = TAU) -> dict:
    """Mean and standard deviation of ERF metrics across seeds, plus a
    ranking by mean ``area_at_tau`` (largest first)."""
    if len(blocks) < 2:
        raise ValueError("compare needs at least two blocks")
    seeds = list(seeds)
    report = {"input_size": input_size, "samples": samples, "seeds": seeds, "tau": tau,
              "note": "measured at random MSRA initialization, averaged over seeds", "blocks": {}}
    for name, spec in blocks.items():
        per_seed = [erf(spec, input_size, samples, s, tau).metrics() for s in seeds]
        stats = {}
        for key in per_seed[0]:
            vals = np.array([m[key] for m in per_seed], dtype=np.float64)
            stats[key] = {"mean": float(vals.mean()), "sd": float(vals.std(ddof=1)) if len(vals) > 1 else 0.0,
                          "values": vals.tolist()}
        report["blocks"][name] = stats
    report["ranking"] = sorted(report["blocks"], key=lambda n: -report["blocks"][n]["area_at_tau"]["mean"])
    return report


def format_report(report: dict) -> str:
    lines = [f"# ERF comparison ({report['note']}); input {report['input_size']}, tau {report['tau']}",
             f"{'block':<14}{'area_at_tau':>22}{'center_ratio':>22}{'footprint':>12}"]
    for name in report["ranking"]:
        s = report["blocks"][name]
        a, c = s["area_at_tau"], s["center_ratio"]
        fp = f"{s['footprint_h']['mean']:.0f}x{s['footprint_w']['mean']:.0f}"
        lines.append(f"{name:<14}{a['mean']:>12.2f} ± {a['sd']:<7.2f}{c['mean']:>12.3f} ± {c['sd']:<7.3f}{fp:>12}")
    return "\n".join(lines)


def export(erf_map: ErfMap, out_dir, stem: str = "erf") -> dict:
    """Write ``<stem>.pgm`` (8-bit, max-scaled) and ``<stem>.csv``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_pgm(out / f"{stem}.pgm", np.rint(erf_map.grid * 255).astype(np.uint8))
    with open(out / f"{stem}.csv", "w", newline="") as fh:
        csv.writer(fh).writerows([[f"{v:.9g}" for v in row] for row in erf_map.grid])
    (out / f"{stem}.json").write_text(json.dumps(erf_map.metrics(), indent=2) + "\n")
    return {"pgm": str(out / f"{stem}.pgm"), "csv": str(out / f"{stem}.csv")}
