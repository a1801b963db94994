"""Optimization: MSRA init, warmup + step schedule, momentum SGD with coupled
weight decay, checkpointing, and the training loop."""
from __future__ import annotations

import csv
import json
import logging
import math
import shutil
import time
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

import numpy as np

from . import __version__
from . import tensor as T
from .data import Dataset, augment
from .detector import build_targets, corner_to_center, gen_priors, multibox_loss
from .model import ModelConfig, RFBDetector, to_input
from .nn import Module, conv_layers
from .tensor import Tensor

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    batch_size: int = 32
    warmup_start_lr: float = 1e-6
    base_lr: float = 4e-3
    warmup_epochs: int = 5
    milestones: tuple[int, ...] = (150, 200)
    gamma: float = 0.1
    total_epochs: int = 250
    momentum: float = 0.9
    weight_decay: float = 5e-4
    seed: int = 0
    neg_pos_ratio: int = 3
    match_threshold: float = 0.5
    augment: bool = True
    checkpoint_every: int = 10

    def __post_init__(self):
        self.milestones = tuple(int(m) for m in self.milestones)
        if any(b <= a for a, b in zip(self.milestones, self.milestones[1:])):
            raise ValueError("milestones must be strictly increasing")
        if self.milestones and self.milestones[0] <= self.warmup_epochs:
            raise ValueError("milestones must come after the warmup")
        if min(self.warmup_start_lr, self.base_lr, self.gamma) <= 0:
            raise ValueError("learning rates and gamma must be positive")
        if self.batch_size < 1 or self.total_epochs < 1:
            raise ValueError("batch_size and total_epochs must be positive")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)

    def scaled(self, total_epochs: int) -> "TrainConfig":
        """Same schedule shape compressed to ``total_epochs``."""
        ratio = total_epochs / self.total_epochs
        warmup = max(1, int(round(self.warmup_epochs * ratio))) if self.warmup_epochs else 0
        # very short runs can round milestones onto each other or into the warmup
        milestones = tuple(m for m in dict.fromkeys(int(round(m * ratio)) for m in self.milestones) if m > warmup)
        return replace(self, total_epochs=total_epochs, milestones=milestones, warmup_epochs=warmup)


COCO_SCHEDULE = TrainConfig(base_lr=2e-3, milestones=(80, 100), total_epochs=120)


def msra_init(model: Module, seed: int) -> Module:
    """Conv weights ~ N(0, 2 / fan_in), biases zero."""
    rng = np.random.default_rng(seed)
    for conv in conv_layers(model):
        w = conv.weight
        w.data = (rng.standard_normal(w.shape) * math.sqrt(2.0 / conv.fan_in)).astype(w.dtype)
        if conv.bias is not None:
            conv.bias.data = np.zeros_like(conv.bias.data)
    return model


def lr_at(iteration: int, iters_per_epoch: int, cfg: TrainConfig) -> float:
    """Linear warmup per iteration, then divide by 1/gamma at each milestone."""
    if iteration < 0:
        raise ValueError("iteration must be non-negative")
    warmup_iters = cfg.warmup_epochs * iters_per_epoch
    if iteration < warmup_iters:
        frac = iteration / warmup_iters
        return cfg.warmup_start_lr + (cfg.base_lr - cfg.warmup_start_lr) * frac
    epoch = iteration // iters_per_epoch
    passed = sum(epoch >= m for m in cfg.milestones)
    # divide rather than multiply so decimal rates stay exact
    return cfg.base_lr / (1.0 / cfg.gamma) ** passed


def sgd_step(params: dict[str, Tensor], state: dict[str, np.ndarray], lr: float, cfg: TrainConfig) -> None:
    """In place: ``v = momentum*v + grad + wd*param``; ``param -= lr*v``.

    Parameters without a gradient are treated as having a zero gradient.
    """
    for name, p in params.items():
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for parameter {name!r}")
        v = state.get(name)
        step = g + cfg.weight_decay * p.data
        v = step if v is None else cfg.momentum * v + step
        state[name] = v.astype(p.dtype, copy=False)
        p.data = (p.data - lr * state[name]).astype(p.dtype, copy=False)


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, model: RFBDetector, train_cfg: TrainConfig | None = None, epoch: int = 0,
                    history: list[dict] | None = None, momentum: dict[str, np.ndarray] | None = None) -> Path:
    """Directory with ``manifest.json`` and one little-endian float32 blob per
    parameter (``params/<path>.f32``); momentum buffers go to ``momentum/``."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    if tmp.exists():
        shutil.rmtree(tmp)
    (tmp / "params").mkdir(parents=True)
    entries = {}
    for name, p in model.parameters().items():
        (tmp / "params" / f"{name}.f32").write_bytes(p.data.astype("<f4").tobytes())
        entries[name] = list(p.shape)
    if momentum:
        (tmp / "momentum").mkdir()
        for name, v in momentum.items():
            (tmp / "momentum" / f"{name}.f32").write_bytes(v.astype("<f4").tobytes())
    manifest = {
        "version": __version__,
        "model": model.cfg.to_dict(),
        "blocks": {k: s.to_dict() for k, s in model.specs.items()},
        "head": model.cfg.head_config().to_dict(),
        "train": train_cfg.to_dict() if train_cfg else None,
        "epoch": epoch,
        "history": history or [],
        "parameters": entries,
        "momentum": sorted(momentum) if momentum else [],
    }
    (tmp / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    if path.exists():
        shutil.rmtree(path)
    tmp.rename(path)
    return path


def _read_blob(path: Path, shape) -> np.ndarray:
    return np.frombuffer(path.read_bytes(), dtype="<f4").astype(np.float32).reshape(shape)


def load_checkpoint(path):
    """Returns ``(model, manifest, momentum)``."""
    path = Path(path)
    manifest = json.loads((path / "manifest.json").read_text())
    model = RFBDetector(ModelConfig.from_dict(manifest["model"]))
    params = model.parameters()
    if set(params) != set(manifest["parameters"]):
        raise ValueError(f"{path}: parameter set does not match the architecture")
    for name, p in params.items():
        p.data = _read_blob(path / "params" / f"{name}.f32", manifest["parameters"][name])
    momentum = {name: _read_blob(path / "momentum" / f"{name}.f32", params[name].shape) for name in manifest["momentum"]}
    return model, manifest, momentum


# ---------------------------------------------------------------------------
# training


class TrainingDiverged(RuntimeError):
    pass


def epoch_rng(seed: int, epoch: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(epoch), 7]))


def make_batch(dataset: Dataset, indices, priors, cfg: TrainConfig, epoch: int, training: bool = True):
    size = dataset.image_size
    imgs, gts = [], []
    for i in indices:
        img, boxes, labels = dataset.images[i], dataset.boxes[i], dataset.labels[i]
        if training and cfg.augment:
            img, boxes, labels = augment(img, boxes, labels, np.random.SeedSequence([cfg.seed, epoch, int(i), 11]))
        imgs.append(img)
        gts.append((np.asarray(boxes, dtype=np.float64).reshape(-1, 4) / size, labels))
    labels, loc = build_targets(gts, priors, cfg.match_threshold, (0.1, 0.2))
    return to_input(np.stack(imgs)), labels, loc


def loss_on_batch(model: RFBDetector, x: np.ndarray, labels, loc, cfg: TrainConfig):
    cls_logits, loc_pred = model(Tensor(x))
    loss_cls, loss_loc = multibox_loss(cls_logits, loc_pred, labels, loc, cfg.neg_pos_ratio)
    return loss_cls, loss_loc


def train(model: RFBDetector, dataset: Dataset, cfg: TrainConfig, out_dir=None, resume=None,
          epochs: int | None = None, on_epoch=None) -> list[dict]:
    """Train for ``cfg.total_epochs`` (or until ``epochs`` more have run).

    History rows: epoch, loss_cls, loss_loc, lr (rate at the epoch's first
    iteration), wallclock_s.  With ``out_dir`` set, checkpoints are written
    every ``cfg.checkpoint_every`` epochs and at the end, and history goes to
    ``history.csv``.
    """
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    priors = gen_priors(model.cfg.head_config())
    params = model.parameters()
    momentum: dict[str, np.ndarray] = {}
    history: list[dict] = []
    start = 0
    if resume is not None:
        loaded, manifest, momentum = load_checkpoint(resume)
        for name, p in loaded.parameters().items():
            params[name].data = p.data
        start = manifest["epoch"]
        history = manifest["history"]
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    n = len(dataset)
    ipe = math.ceil(n / cfg.batch_size)
    stop = cfg.total_epochs if epochs is None else min(cfg.total_epochs, start + epochs)
    last_good = None
    for epoch in range(start, stop):
        t0 = time.perf_counter()
        order = epoch_rng(cfg.seed, epoch).permutation(n)
        sums = np.zeros(2)
        for b in range(ipe):
            it = epoch * ipe + b
            lr = lr_at(it, ipe, cfg)
            idx = order[b * cfg.batch_size:(b + 1) * cfg.batch_size]
            x, labels, loc = make_batch(dataset, idx, priors, cfg, epoch)
            model.zero_grad()
            loss_cls, loss_loc = loss_on_batch(model, x, labels, loc, cfg)
            total = T.add(loss_cls, loss_loc)
            if not np.isfinite(total.data):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch} iteration {b}; last good checkpoint: {last_good}")
            total.backward()
            sgd_step(params, momentum, lr, cfg)
            sums += (float(loss_cls.data), float(loss_loc.data))
        row = {"epoch": epoch + 1, "loss_cls": float(sums[0] / ipe), "loss_loc": float(sums[1] / ipe),
               "lr": lr_at(epoch * ipe, ipe, cfg), "wallclock_s": time.perf_counter() - t0}
        history.append(row)
        log.info("epoch %d cls %.4f loc %.4f lr %.2e", row["epoch"], row["loss_cls"], row["loss_loc"], row["lr"])
        if on_epoch is not None:
            on_epoch(row)
        if out is not None and ((epoch + 1) % cfg.checkpoint_every == 0 or epoch + 1 == stop):
            last_good = save_checkpoint(out / f"ckpt_{epoch + 1:04d}", model, cfg, epoch + 1, history, momentum)
            write_history(out / "history.csv", history)
    return history


def write_history(path, history: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["epoch", "loss_cls", "loss_loc", "lr", "wallclock_s"])
        w.writeheader()
        for row in history:
            w.writerow({k: row[k] for k in w.fieldnames})
