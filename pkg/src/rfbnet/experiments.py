"""Desk-scale end-to-end runs on the synthetic shape dataset.

The reference split is 600 images from scene seed 0: the first 500 train,
the next 100 test.  A run trains one head for a compressed schedule and
reports mAP@0.5 (VOC07 eleven-point) on the test split.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field
from pathlib import Path

from .data import Dataset, SceneSpec, generate, load_dataset
from .inference import evaluate_model
from .model import ModelConfig, RFBDetector
from .train import TrainConfig, msra_init, train

DESK_EPOCHS = 60
TRAIN_COUNT, TEST_COUNT = 500, 100


@dataclass
class DeskRun:
    head: str
    seed: int
    map: float
    ap: dict
    seconds: float
    history: list = field(default_factory=list)
    checkpoints: dict = field(default_factory=dict)  # epoch -> mAP


def desk_split(root, seed: int = 0) -> tuple[Dataset, Dataset]:
    """Generate (if missing) and load the 500/100 split under ``root``."""
    root = Path(root)
    spec = SceneSpec(seed=seed)
    for name, count, offset in (("train", TRAIN_COUNT, 0), ("test", TEST_COUNT, TRAIN_COUNT)):
        if not (root / name / "manifest.json").exists():
            generate(spec, count, root / name, offset=offset)
    return load_dataset(root / "train"), load_dataset(root / "test")


def desk_run(head: str, seed: int, train_set: Dataset, test_set: Dataset, epochs: int = DESK_EPOCHS,
             model_overrides: dict | None = None, eval_every: int | None = None, on_epoch=None) -> DeskRun:
    cfg = ModelConfig(head=head, **(model_overrides or {}))
    model = msra_init(RFBDetector(cfg), seed)
    train_cfg = TrainConfig(seed=seed).scaled(epochs)
    snapshots = {}

    def hook(row):
        if eval_every and row["epoch"] % eval_every == 0 and row["epoch"] != epochs:
            snapshots[row["epoch"]] = evaluate_model(model, test_set).map
        if on_epoch is not None:
            on_epoch(row)

    t0 = time.perf_counter()
    history = train(model, train_set, train_cfg, on_epoch=hook)
    seconds = time.perf_counter() - t0
    result = evaluate_model(model, test_set)
    snapshots[epochs] = result.map
    return DeskRun(head, seed, result.map, result.ap, seconds, history, snapshots)
