"""Synthetic shape-detection dataset and SSD-style augmentation.

Layout on disk::

    <out>/images/000000.ppm ...     binary P6, 8-bit RGB
    <out>/annotations.jsonl         {"image": "images/000000.ppm", "boxes": [{xmin, ymin, xmax, ymax, label}]}
    <out>/manifest.json             scene spec and counts

Labels are 1-based class ids (0 is reserved for background).  All object
placement uses integer draws from a per-image child seed, so output is
byte-identical for a given seed.
"""
from __future__ import annotations

import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

SHAPES = ("disk", "square", "triangle")
PALETTE = np.array([
    [230, 40, 40], [40, 200, 60], [50, 80, 230], [240, 220, 40],
    [220, 60, 220], [40, 210, 220], [250, 140, 30], [245, 245, 245],
], dtype=np.int64)


@dataclass(frozen=True)
class SceneSpec:
    image_size: int = 64
    classes: tuple[str, ...] = SHAPES
    objects: tuple[int, int] = (1, 3)
    size_range: tuple[float, float] = (0.2, 0.5)
    max_iou: float = 0.3
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "classes", tuple(self.classes))
        object.__setattr__(self, "objects", tuple(self.objects))
        object.__setattr__(self, "size_range", tuple(self.size_range))
        bad = set(self.classes) - set(SHAPES)
        if bad:
            raise ValueError(f"unknown shape kinds {sorted(bad)}")
        lo, hi = self.objects
        if not 0 <= lo <= hi:
            raise ValueError("objects range must satisfy 0 <= min <= max")
        if self.side_range()[0] < 4 or self.side_range()[1] > self.image_size:
            raise ValueError("object sides must be at least 4 px and fit in the image")

    def side_range(self) -> tuple[int, int]:
        a, b = self.size_range
        return int(round(a * self.image_size)), int(round(b * self.image_size))

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        return cls(**d)


# ---------------------------------------------------------------------------
# PPM / PGM


def write_ppm(path, image: np.ndarray) -> None:
    image = np.ascontiguousarray(image, dtype=np.uint8)
    h, w = image.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(image.tobytes())


def write_pgm(path, image: np.ndarray) -> None:
    image = np.ascontiguousarray(image, dtype=np.uint8)
    h, w = image.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(image.tobytes())


def _read_netpbm(path, magic: bytes, channels: int) -> np.ndarray:
    raw = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            pos = raw.index(b"\n", pos)
            continue
        end = pos
        while not raw[end:end + 1].isspace():
            end += 1
        tokens.append(raw[pos:end])
        pos = end
    if tokens[0] != magic or tokens[3] != b"255":
        raise ValueError(f"{path}: not an 8-bit {magic.decode()} file")
    w, h = int(tokens[1]), int(tokens[2])
    data = np.frombuffer(raw, dtype=np.uint8, count=w * h * channels, offset=pos + 1)
    return data.reshape((h, w, channels) if channels > 1 else (h, w)).copy()


def read_ppm(path) -> np.ndarray:
    return _read_netpbm(path, b"P6", 3)


def read_pgm(path) -> np.ndarray:
    return _read_netpbm(path, b"P5", 1)


# ---------------------------------------------------------------------------
# rendering


def _box_iou(a, b) -> float:
    iw = max(0, min(a[2], b[2]) - max(a[0], b[0]))
    ih = max(0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = iw * ih
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union


def _shape_mask(kind: str, side: int) -> np.ndarray:
    # twice-pixel-center coordinates keep the tests in integers
    c = 2 * np.arange(side) + 1
    yy, xx = np.meshgrid(c, c, indexing="ij")
    if kind == "square":
        return np.ones((side, side), dtype=bool)
    if kind == "disk":
        return (xx - side) ** 2 + (yy - side) ** 2 <= side * side
    # triangle: apex at top center, base along the bottom edge
    return 2 * np.abs(xx - side) <= yy


def _texture(kind: str, side: int) -> np.ndarray:
    r, c = np.meshgrid(np.arange(side), np.arange(side), indexing="ij")
    if kind == "disk":
        return np.ones((side, side), dtype=bool)
    if kind == "square":
        return (r // 2) % 2 == 0
    return ((r // 3) + (c // 3)) % 2 == 0


def render_scene(spec: SceneSpec, rng: np.random.Generator) -> tuple[np.ndarray, list[dict]]:
    s = spec.image_size
    base = rng.integers(70, 150, size=3)
    noise = rng.integers(-18, 19, size=(s, s, 3))
    ramp = (np.arange(s)[:, None, None] * rng.integers(-20, 21, size=3)) // s
    img = np.clip(base + noise + ramp, 0, 255)

    n_obj = int(rng.integers(spec.objects[0], spec.objects[1] + 1))
    lo, hi = spec.side_range()
    boxes: list[dict] = []
    for _ in range(n_obj):
        for _attempt in range(50):
            side = int(rng.integers(lo, hi + 1))
            x = int(rng.integers(0, s - side + 1))
            y = int(rng.integers(0, s - side + 1))
            cand = (x, y, x + side, y + side)
            if all(_box_iou(cand, (b["xmin"], b["ymin"], b["xmax"], b["ymax"])) <= spec.max_iou for b in boxes):
                break
        else:
            continue
        cls = int(rng.integers(0, len(spec.classes)))
        kind = spec.classes[cls]
        color = PALETTE[int(rng.integers(0, len(PALETTE)))]
        mask = _shape_mask(kind, side)
        tex = _texture(kind, side)
        patch = np.where(tex[..., None], color, color // 3)
        region = img[y:y + side, x:x + side]
        region[mask] = patch[mask]
        boxes.append({"xmin": x, "ymin": y, "xmax": x + side, "ymax": y + side, "label": cls + 1})
    return img.astype(np.uint8), boxes


def child_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(index)]))


def generate(spec: SceneSpec, count: int, out_dir, jobs: int = 1, offset: int = 0) -> dict:
    """Write ``count`` images plus annotations and a manifest to ``out_dir``.

    Image ``k`` is rendered from child seed ``(spec.seed, offset + k)``, so a
    held-out split can continue the same stream with ``offset``.
    """
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)

    def one(i):
        img, boxes = render_scene(spec, child_rng(spec.seed, offset + i))
        name = f"images/{i:06d}.ppm"
        write_ppm(out / name, img)
        return {"image": name, "boxes": boxes}

    if jobs > 1:
        with ThreadPoolExecutor(jobs) as pool:
            records = list(pool.map(one, range(count)))
    else:
        records = [one(i) for i in range(count)]
    with open(out / "annotations.jsonl", "w") as fh:
        for r in records:
            fh.write(json.dumps(r, sort_keys=True) + "\n")
    manifest = {"spec": asdict(spec), "count": count, "offset": offset, "objects": sum(len(r["boxes"]) for r in records),
                "classes": list(spec.classes)}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


@dataclass
class Dataset:
    images: np.ndarray  # (N, H, W, 3) uint8
    boxes: list[np.ndarray]  # per image (M, 4) pixel corners
    labels: list[np.ndarray]  # per image (M,) 1-based
    names: list[str] = field(default_factory=list)
    classes: tuple[str, ...] = SHAPES

    def __len__(self) -> int:
        return len(self.images)

    @property
    def image_size(self) -> int:
        return self.images.shape[1]


def load_dataset(root) -> Dataset:
    root = Path(root)
    manifest = json.loads((root / "manifest.json").read_text())
    images, boxes, labels, names = [], [], [], []
    with open(root / "annotations.jsonl") as fh:
        for line in fh:
            if not line.strip():
                continue
            rec = json.loads(line)
            images.append(read_ppm(root / rec["image"]))
            b = rec["boxes"]
            boxes.append(np.array([[d["xmin"], d["ymin"], d["xmax"], d["ymax"]] for d in b], dtype=np.float64).reshape(-1, 4))
            labels.append(np.array([d["label"] for d in b], dtype=np.int64))
            names.append(rec["image"])
    size = manifest["spec"]["image_size"]
    arr = np.stack(images) if images else np.zeros((0, size, size, 3), dtype=np.uint8)
    return Dataset(arr, boxes, labels, names, tuple(manifest.get("classes", SHAPES)))


def validate_dataset(root) -> list[str]:
    """Problems found in a dataset directory; empty when valid."""
    root = Path(root)
    problems = []
    with open(root / "annotations.jsonl") as fh:
        for line in fh:
            rec = json.loads(line)
            path = root / rec["image"]
            if not path.exists():
                problems.append(f"missing image {rec['image']}")
                continue
            h, w = read_ppm(path).shape[:2]
            for b in rec["boxes"]:
                if not (0 <= b["xmin"] < b["xmax"] <= w and 0 <= b["ymin"] < b["ymax"] <= h):
                    problems.append(f"{rec['image']}: box out of bounds {b}")
    return problems


# ---------------------------------------------------------------------------
# augmentation


def flip(image: np.ndarray, boxes: np.ndarray):
    w = image.shape[1]
    b = np.asarray(boxes, dtype=np.float64).copy()
    b[:, [0, 2]] = w - b[:, [2, 0]]
    return image[:, ::-1].copy(), b


def expand(image: np.ndarray, boxes: np.ndarray, factor: float, offset: tuple[int, int], fill=None):
    """Place ``image`` on a ``factor``-times larger canvas at (left, top)."""
    h, w, c = image.shape
    H, W = int(h * factor), int(w * factor)
    left, top = offset
    if fill is None:
        fill = image.reshape(-1, c).mean(axis=0)
    canvas = np.empty((H, W, c), dtype=image.dtype)
    canvas[:] = np.rint(fill).astype(image.dtype)
    canvas[top:top + h, left:left + w] = image
    b = np.asarray(boxes, dtype=np.float64) + [left, top, left, top]
    return canvas, b


def crop(image: np.ndarray, boxes: np.ndarray, labels: np.ndarray, rect: tuple[int, int, int, int]):
    """Keep boxes whose centers fall inside ``rect`` and clip them to it."""
    x0, y0, x1, y1 = rect
    b = np.asarray(boxes, dtype=np.float64)
    centers = (b[:, :2] + b[:, 2:]) / 2
    keep = (centers[:, 0] > x0) & (centers[:, 0] < x1) & (centers[:, 1] > y0) & (centers[:, 1] < y1)
    b = b[keep].copy()
    b[:, [0, 2]] = np.clip(b[:, [0, 2]], x0, x1) - x0
    b[:, [1, 3]] = np.clip(b[:, [1, 3]], y0, y1) - y0
    return image[y0:y1, x0:x1].copy(), b, np.asarray(labels)[keep]


def resize(image: np.ndarray, boxes: np.ndarray, size: int):
    """Nearest-neighbour resize to ``size`` x ``size``."""
    h, w = image.shape[:2]
    rows = (np.arange(size) * h) // size
    cols = (np.arange(size) * w) // size
    b = np.asarray(boxes, dtype=np.float64) * [size / w, size / h, size / w, size / h]
    return image[rows][:, cols], b


def photometric(image: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Brightness/contrast jitter; results rounded half-to-even and clipped."""
    x = image.astype(np.float64)
    if rng.random() < 0.5:
        x = x + rng.uniform(-24, 24)
    if rng.random() < 0.5:
        x = (x - 127.5) * rng.uniform(0.75, 1.25) + 127.5
    return np.clip(np.rint(x), 0, 255).astype(np.uint8)


def _random_crop_rect(boxes, w, h, rng: np.random.Generator):
    choice = rng.integers(0, 6)
    if choice == 0:
        return None
    min_iou = (0.1, 0.3, 0.5, 0.7, 0.9)[choice - 1]
    for _ in range(50):
        cw = int(rng.integers(int(0.3 * w), w + 1))
        ch = int(rng.integers(int(0.3 * h), h + 1))
        if not 0.5 <= cw / max(ch, 1) <= 2:
            continue
        x0 = int(rng.integers(0, w - cw + 1))
        y0 = int(rng.integers(0, h - ch + 1))
        rect = (x0, y0, x0 + cw, y0 + ch)
        if len(boxes) and max(_box_iou(rect, tuple(b)) for b in boxes) < min_iou:
            continue
        centers = (boxes[:, :2] + boxes[:, 2:]) / 2
        inside = (centers[:, 0] > rect[0]) & (centers[:, 0] < rect[2]) & (centers[:, 1] > rect[1]) & (centers[:, 1] < rect[3])
        if len(boxes) and not inside.any():
            continue
        return rect
    return None


def augment(image: np.ndarray, boxes: np.ndarray, labels: np.ndarray, seed, max_expand: float = 4.0,
            p_expand: float = 0.5, p_crop: float = 0.5):
    """Photometric jitter, zoom-out, min-IoU crop, flip; output keeps the
    input size.  Boxes thinner than 2 px are dropped."""
    rng = np.random.default_rng(seed)
    h, w = image.shape[:2]
    img = photometric(image, rng)
    b = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    lab = np.asarray(labels, dtype=np.int64)
    if rng.random() < p_expand:
        factor = rng.uniform(1.0, max_expand)
        H, W = int(h * factor), int(w * factor)
        offset = (int(rng.integers(0, W - w + 1)), int(rng.integers(0, H - h + 1)))
        img, b = expand(img, b, factor, offset)
    if rng.random() < p_crop:
        rect = _random_crop_rect(b, img.shape[1], img.shape[0], rng)
        if rect is not None:
            img, b, lab = crop(img, b, lab, rect)
    if rng.random() < 0.5:
        img, b = flip(img, b)
    img, b = resize(img, b, h)
    keep = ((b[:, 2] - b[:, 0]) >= 2) & ((b[:, 3] - b[:, 1]) >= 2)
    return img, b[keep], lab[keep]
