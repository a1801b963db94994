"""Command-line workflow: synth, train, eval, erf, gradcheck, inspect.

Exit codes: 0 success, 1 validation failure (bad flags, bad config, failed
check), 2 I/O error.  Every run that writes outputs also writes one
``run_manifest.json`` next to them; outputs created by a failed run are
removed.
"""
from __future__ import annotations

import argparse
import contextlib
import datetime as _dt
import json
import logging
import shutil
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import __version__
from .blocks import COMPARISON_KINDS, Block, make_comparison_block, make_rfb, make_rfb_s, param_count, theoretical_rf, widest_rf
from .data import SceneSpec, generate, load_dataset, validate_dataset
from .detector import read_detections, write_detections
from .erf import compare, erf, export, format_report
from .evaluation import COCO_THRESHOLDS, evaluate
from .gradcheck import GROUPS, format_table, timed_run
from .inference import as_records, detect, ground_truth
from .model import ModelConfig, RFBDetector
from .train import TrainConfig, TrainingDiverged, load_checkpoint, msra_init, save_checkpoint, train, write_history

EXIT_OK, EXIT_INVALID, EXIT_IO = 0, 1, 2
BLOCK_KINDS = ("rfb", "rfb_s") + COMPARISON_KINDS
EVAL_MODES = {"voc07": ("eleven_point", (0.5,)), "allpoints": ("all_points", (0.5,)),
              "coco-avg": ("all_points", COCO_THRESHOLDS)}


class ValidationError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_INVALID)


def default_config() -> dict:
    return {"model": ModelConfig().to_dict(), "train": TrainConfig().to_dict(), "scene": asdict(SceneSpec())}


def _read_json(path) -> dict:
    try:
        d = json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise ValidationError(f"{path}: invalid JSON ({e})") from e
    if not isinstance(d, dict):
        raise ValidationError(f"{path}: expected a JSON object")
    return d


def load_config(path) -> tuple[ModelConfig, TrainConfig]:
    d = _read_json(path) if path else {}
    unknown = set(d) - {"model", "train", "scene"}
    if unknown:
        raise ValidationError(f"unknown config sections: {sorted(unknown)}")
    try:
        return ModelConfig.from_dict(d.get("model", {})), TrainConfig.from_dict(d.get("train", {}))
    except (TypeError, ValueError) as e:
        raise ValidationError(str(e)) from e


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


class Run:
    """Tracks outputs of one command and writes its manifest."""

    def __init__(self, command: str, args: argparse.Namespace):
        self.command = command
        self.args = args
        self.started = _now()
        self.created: list[Path] = []
        self.artifacts: dict[str, str] = {}
        self.config: dict = {}

    def claim(self, path, is_dir: bool = False) -> Path:
        """Register an output path; it is deleted on failure if it is new."""
        path = Path(path)
        top = None
        for p in [path, *path.parents]:
            if p.exists():
                break
            top = p
        if top is not None:
            self.created.append(top)
        if is_dir:
            path.mkdir(parents=True, exist_ok=True)
        else:
            path.parent.mkdir(parents=True, exist_ok=True)
        return path

    def cleanup(self) -> None:
        for p in reversed(self.created):
            if p.is_dir():
                shutil.rmtree(p, ignore_errors=True)
            elif p.exists():
                p.unlink()

    def write_manifest(self, where: Path) -> Path:
        path = where / "run_manifest.json" if where.is_dir() else where.with_name(where.name + ".manifest.json")
        manifest = {"command": self.command, "config": self.config, "seed": getattr(self.args, "seed", None),
                    "version": __version__, "started": self.started, "finished": _now(),
                    "artifacts": self.artifacts, "argv": {k: v for k, v in vars(self.args).items() if k != "func"}}
        path.write_text(json.dumps(manifest, indent=2, sort_keys=True, default=str) + "\n")
        return path


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args, run: Run) -> int:
    d = _read_json(args.spec) if args.spec else {}
    d = d.get("scene", d)
    if args.seed is not None:
        d["seed"] = args.seed
    try:
        spec = SceneSpec.from_dict(d)
    except (TypeError, ValueError) as e:
        raise ValidationError(str(e)) from e
    if args.count < 0:
        raise ValidationError("--count must be non-negative")
    out = run.claim(args.out, is_dir=True)
    run.config = asdict(spec)
    manifest = generate(spec, args.count, out, jobs=args.jobs, offset=args.offset)
    problems = validate_dataset(out)
    if problems:
        raise ValidationError("generated dataset failed validation: " + "; ".join(problems[:5]))
    run.artifacts = {"annotations": str(out / "annotations.jsonl"), "manifest": str(out / "manifest.json")}
    run.write_manifest(out)
    print(f"wrote {manifest['count']} images with {manifest['objects']} objects to {out}")
    return EXIT_OK


def cmd_train(args, run: Run) -> int:
    model_cfg, train_cfg = load_config(args.config)
    if args.seed is not None:
        train_cfg = TrainConfig.from_dict({**train_cfg.to_dict(), "seed": args.seed})
    if args.epochs is not None:
        train_cfg = train_cfg.scaled(args.epochs)
    dataset = load_dataset(args.data)
    if len(dataset) == 0:
        raise ValidationError(f"{args.data}: dataset is empty")
    if dataset.image_size != model_cfg.image_size:
        raise ValidationError(f"dataset images are {dataset.image_size}px but the model expects {model_cfg.image_size}px")
    out = run.claim(args.out, is_dir=True)
    if args.resume:
        model, manifest, _ = load_checkpoint(args.resume)
        model_cfg = model.cfg
        train_cfg = TrainConfig.from_dict(manifest["train"])
    else:
        model = msra_init(RFBDetector(model_cfg), train_cfg.seed)
    run.config = {"model": model_cfg.to_dict(), "train": train_cfg.to_dict()}
    history = train(model, dataset, train_cfg, out_dir=out, resume=args.resume)
    final = save_checkpoint(out / "final", model, train_cfg, len(history), history)
    write_history(out / "history.csv", history)
    run.artifacts = {"checkpoint": str(final), "history": str(out / "history.csv")}
    run.write_manifest(out)
    last = history[-1]
    print(f"epoch {last['epoch']}: loss_cls {last['loss_cls']:.4f} loss_loc {last['loss_loc']:.4f}; checkpoint {final}")
    return EXIT_OK


def cmd_eval(args, run: Run) -> int:
    mode, thresholds = EVAL_MODES[args.mode]
    dataset = load_dataset(args.data)
    out = run.claim(args.out)
    if args.ckpt:
        model, _, _ = load_checkpoint(args.ckpt)
        per_image = detect(model, dataset.images, conf_threshold=args.conf_threshold)
        records = as_records(per_image, dataset.image_size)
        classes = range(1, model.cfg.num_classes)
        if args.write_dets:
            dets_path = run.claim(args.write_dets)
            write_detections(dets_path, zip(range(len(per_image)), per_image), dataset.image_size)
            run.artifacts["detections"] = str(dets_path)
    else:
        rows = read_detections(args.dets)
        records = [(r["image_id"], r["class"], r["score"], [r["xmin"], r["ymin"], r["xmax"], r["ymax"]]) for r in rows]
        classes = range(1, len(dataset.classes) + 1)
    result = evaluate(records, ground_truth(dataset), thresholds, mode, classes)
    out.write_text(result.to_json() + "\n")
    run.config = {"mode": args.mode, "iou_thresholds": list(thresholds)}
    run.artifacts["result"] = str(out)
    run.write_manifest(out)
    print(f"mAP ({args.mode}) = {result.map:.4f}")
    for c, ap in sorted(result.ap.items()):
        print(f"  class {c} ({dataset.classes[c - 1]}): AP {ap:.4f}")
    return EXIT_OK


def _block_spec(kind: str, channels: int, bottleneck: int | None):
    if kind == "rfb":
        return make_rfb(channels, channels, bottleneck=bottleneck)
    if kind == "rfb_s":
        return make_rfb_s(channels, channels, bottleneck=bottleneck)
    ref = make_rfb(channels, channels, bottleneck=bottleneck)
    return make_comparison_block(kind, channels, channels, bottleneck=bottleneck, reference=ref)


def cmd_erf(args, run: Run) -> int:
    seed0 = args.seed or 0
    out = run.claim(args.out, is_dir=True)
    if args.ckpt:
        model, _, _ = load_checkpoint(args.ckpt)
        block = getattr(model, args.layer, None)
        if not isinstance(block, Block):
            names = [k for k, v in vars(model).items() if isinstance(v, Block)]
            raise ValidationError(f"--layer must name an RFB-style block of the model: {names}")
        block = block.astype(np.float64)
        m = erf(block, args.input_size, args.samples, seed0)
        run.artifacts = export(m, out, args.layer)
        run.config = {"ckpt": str(args.ckpt), "layer": args.layer, "input_size": args.input_size, "samples": args.samples}
        note = "measured on trained weights"
        print(f"# ERF of {args.layer} ({note}); input {args.input_size}")
        print(json.dumps(m.metrics()))
    else:
        kinds = args.block or ["rfb", "plain", "aspp_s"]
        specs = {k: _block_spec(k, args.channels, args.bottleneck) for k in kinds}
        seeds = range(seed0, seed0 + args.seeds)
        for k, spec in specs.items():
            run.artifacts.update({f"{k}.{t}": p for t, p in export(erf(spec, args.input_size, args.samples, seed0), out, k).items()})
        run.config = {"blocks": kinds, "channels": args.channels, "input_size": args.input_size,
                      "samples": args.samples, "seeds": list(seeds)}
        if len(specs) >= 2:
            report = compare(specs, args.input_size, seeds, args.samples)
            (out / "report.json").write_text(json.dumps(report, indent=2) + "\n")
            text = format_report(report)
            (out / "report.txt").write_text(text + "\n")
            run.artifacts["report"] = str(out / "report.json")
            print(text)
        else:
            m = erf(next(iter(specs.values())), args.input_size, args.samples, seed0)
            print(json.dumps(m.metrics()))
    run.write_manifest(out)
    return EXIT_OK


def cmd_gradcheck(args, run: Run) -> int:
    if args.precision != 64:
        raise ValidationError("gradient checks run at 64-bit precision only")
    results, elapsed = timed_run(args.ops, args.seed or 0)
    table = format_table(results, elapsed)
    print(table)
    if args.out:
        out = run.claim(args.out)
        out.write_text(table + "\n")
        run.artifacts["table"] = str(out)
        run.write_manifest(out)
    return EXIT_OK if all(r.passed for r in results) else EXIT_INVALID


def inspect_lines(ckpt) -> list[str]:
    model, manifest, _ = load_checkpoint(ckpt)
    lines = [f"checkpoint {ckpt}", f"  version {manifest.get('version')}  epoch {manifest['epoch']}",
             f"  head {model.cfg.head}  trailing {model.cfg.trailing}  rfb_s {model.cfg.rfb_s}",
             f"  parameters {model.num_parameters()}"]
    for name, spec in model.specs.items():
        rf = widest_rf(spec)
        per_branch = ", ".join(f"{r.size[0]}x{r.size[1]}" for r in theoretical_rf(spec))
        lines.append(f"  block {name:<8} {spec.name:<12} params {param_count(spec):>7}  "
                     f"max RF {rf.size[0]}x{rf.size[1]}  branches [{per_branch}]")
    if manifest.get("history"):
        last = manifest["history"][-1]
        lines.append(f"  last epoch loss_cls {last['loss_cls']:.4f} loss_loc {last['loss_loc']:.4f}")
    return lines


def cmd_inspect(args, run: Run) -> int:
    text = "\n".join(inspect_lines(args.ckpt))
    print(text)
    if args.out:
        out = run.claim(args.out)
        out.write_text(text + "\n")
        run.artifacts["summary"] = str(out)
        run.write_manifest(out)
    return EXIT_OK


def cmd_init(args, run: Run) -> int:
    """Write a freshly initialized checkpoint (no training)."""
    model_cfg, train_cfg = load_config(args.config)
    seed = train_cfg.seed if args.seed is None else args.seed
    out = run.claim(args.out, is_dir=True)
    model = msra_init(RFBDetector(model_cfg), seed)
    path = save_checkpoint(out / "init", model, train_cfg, 0, [])
    run.config = {"model": model_cfg.to_dict(), "train": train_cfg.to_dict()}
    run.artifacts["checkpoint"] = str(path)
    run.write_manifest(out)
    print(f"checkpoint {path}")
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="rfbnet", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"rfbnet {__version__}")
    p.add_argument("--print-config", action="store_true", help="print the default config JSON and exit")
    p.add_argument("--seed", type=int, default=None, help="root seed for every random draw")
    p.add_argument("--jobs", type=int, default=1, help="cap on worker threads (1 is the reference path)")
    p.add_argument("--strict-deterministic", action="store_true",
                   help="single-threaded numeric kernels; identical flags give identical artifacts")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    s = sub.add_parser("synth", help="generate a synthetic shape dataset")
    s.add_argument("--spec", help="scene spec JSON (a bare object or a config with a 'scene' section)")
    s.add_argument("--count", type=int, required=True)
    s.add_argument("--offset", type=int, default=0, help="first image index in the seed stream")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("train", help="train a detector")
    s.add_argument("--data", required=True)
    s.add_argument("--config", help="JSON with optional 'model' and 'train' sections")
    s.add_argument("--out", required=True)
    s.add_argument("--resume", help="checkpoint directory to continue from")
    s.add_argument("--epochs", type=int, help="compress the schedule to this many epochs")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("init", help="write an untrained checkpoint")
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_init)

    s = sub.add_parser("eval", help="score a checkpoint or a detections file")
    src = s.add_mutually_exclusive_group(required=True)
    src.add_argument("--ckpt")
    src.add_argument("--dets", help="detections as JSON lines in pixel units")
    s.add_argument("--data", required=True)
    s.add_argument("--mode", choices=sorted(EVAL_MODES), default="voc07")
    s.add_argument("--conf-threshold", type=float, default=0.01)
    s.add_argument("--write-dets", help="also write the checkpoint's detections here")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("erf", help="effective receptive field maps")
    src = s.add_mutually_exclusive_group()
    src.add_argument("--block", choices=BLOCK_KINDS, action="append", help="repeat to compare several blocks")
    src.add_argument("--ckpt")
    s.add_argument("--layer", default="middle", help="block attribute of the checkpoint model")
    s.add_argument("--channels", type=int, default=32)
    s.add_argument("--bottleneck", type=int, default=None)
    s.add_argument("--input-size", type=int, default=31)
    s.add_argument("--samples", type=int, default=32)
    s.add_argument("--seeds", type=int, default=10)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_erf)

    s = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    s.add_argument("--ops", choices=["all"] + list(GROUPS), default="all")
    s.add_argument("--precision", type=int, choices=[32, 64], default=64)
    s.add_argument("--out")
    s.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("inspect", help="summarize a checkpoint")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--out")
    s.set_defaults(func=cmd_inspect)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    if args.print_config:
        print(json.dumps(default_config(), indent=2))
        return EXIT_OK
    if args.command is None:
        parser.print_help(sys.stderr)
        return EXIT_INVALID
    if args.jobs < 1:
        print("rfbnet: error: --jobs must be at least 1", file=sys.stderr)
        return EXIT_INVALID
    if args.strict_deterministic:
        args.jobs = 1
    run = Run(args.command, args)
    limits = threadpool_limits(limits=args.jobs) if args.strict_deterministic or args.jobs > 1 else contextlib.nullcontext()
    try:
        with limits:
            return args.func(args, run)
    except (ValidationError, ValueError, KeyError, TrainingDiverged, FloatingPointError) as e:
        run.cleanup()
        print(f"rfbnet: error: {e}", file=sys.stderr)
        return EXIT_INVALID
    except OSError as e:
        run.cleanup()
        print(f"rfbnet: I/O error: {e}", file=sys.stderr)
        return EXIT_IO
    except BaseException:
        run.cleanup()
        raise


if __name__ == "__main__":
    raise SystemExit(main())
