"""End-to-end desk run: synthetic shapes, tiny backbone, RFB head versus plain head.

Generates the 500/100 split under ``out_dir`` (reused if present), trains
each head for the compressed schedule and reports mAP@0.5.  About five
minutes per run on one core.

    python3 demos/05_desk_training.py out_dir [seed]
"""
import sys

from rfbnet.experiments import DESK_EPOCHS, desk_run, desk_split

root = sys.argv[1] if len(sys.argv) > 1 else "desk"
seed = int(sys.argv[2]) if len(sys.argv) > 2 else 0
train_set, test_set = desk_split(root)
print(f"train {len(train_set)} images, test {len(test_set)}, classes {train_set.classes}")


def progress(row):
    if row["epoch"] % 10 == 0:
        print(f"  epoch {row['epoch']:>3}  cls {row['loss_cls']:.3f}  loc {row['loss_loc']:.3f}  lr {row['lr']:.1e}")


for head in ("rfb", "plain"):
    print(f"\n{head} head, seed {seed}")
    r = desk_run(head, seed, train_set, test_set, DESK_EPOCHS, eval_every=20, on_epoch=progress)
    curve = "  ".join(f"ep{e}: {m:.3f}" for e, m in sorted(r.checkpoints.items()))
    print(f"  mAP@0.5 {r.map:.4f} in {r.seconds / 60:.1f} min  ({curve})")
    print("  per-class AP:", {train_set.classes[c - 1]: round(v, 3) for c, v in r.ap.items()})
