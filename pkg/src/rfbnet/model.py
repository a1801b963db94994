"""Desk-scale RFB detector: a small conv backbone with RFB-s on the shallow
source, RFB on the middle sources, and plain convs on the smallest map."""
from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import numpy as np

from . import tensor as T
from .blocks import COMPARISON_KINDS, Block, BlockSpec, make_comparison_block, make_rfb, make_rfb_s
from .detector import HeadConfig
from .nn import Conv2d, Identity, Module, Sequential
from .tensor import Tensor

HEAD_KINDS = ("rfb",) + COMPARISON_KINDS


@dataclass
class ModelConfig:
    image_size: int = 64
    num_classes: int = 4  # background + 3 shapes
    widths: tuple[int, int, int] = (16, 32, 64)
    head: str = "rfb"
    trailing: str = "conv"
    rfb_s: bool = True
    first_priors: int = 6
    alpha: float = 0.1
    bottleneck: int | None = 16
    min_scale: float = 0.15
    max_scale: float = 0.75

    def __post_init__(self):
        self.widths = tuple(self.widths)
        if self.head not in HEAD_KINDS:
            raise ValueError(f"unknown head {self.head!r}; expected one of {HEAD_KINDS}")
        if self.image_size % 32:
            raise ValueError("image_size must be a multiple of 32")

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)

    def feature_sizes(self) -> list[int]:
        s = self.image_size
        return [s // 4, s // 8, s // 16, s // 32]

    def head_config(self) -> HeadConfig:
        return HeadConfig.build(self.feature_sizes(), [self.first_priors, 6, 6, 4], self.min_scale, self.max_scale,
                                self.num_classes)

    def block_specs(self) -> dict[str, BlockSpec]:
        c = self.widths[2]
        kw = dict(alpha=self.alpha, bottleneck=self.bottleneck)
        rfb_mid = make_rfb(c, c, 1, trailing=self.trailing, **kw)
        rfb_down = make_rfb(c, c, 2, trailing=self.trailing, **kw)
        specs = {}
        if self.head == "rfb":
            if self.rfb_s:
                specs["shallow"] = make_rfb_s(c, c, trailing=self.trailing, **kw)
            specs["middle"], specs["down"] = rfb_mid, rfb_down
        else:
            if self.rfb_s:
                ref = make_rfb_s(c, c, trailing=self.trailing, **kw)
                specs["shallow"] = make_comparison_block(self.head, c, c, 1, reference=ref, **kw)
            specs["middle"] = make_comparison_block(self.head, c, c, 1, reference=rfb_mid, **kw)
            specs["down"] = make_comparison_block(self.head, c, c, 2, reference=rfb_down, **kw)
        return specs


class RFBDetector(Module):
    def __init__(self, cfg: ModelConfig, dtype=np.float32):
        self.cfg = cfg
        w1, w2, w3 = cfg.widths
        self.stem = Sequential(
            Conv2d(3, w1, 3, stride=2, dtype=dtype),
            Conv2d(w1, w2, 3, stride=2, dtype=dtype),
            Conv2d(w2, w3, 3, dtype=dtype),
        )
        specs = cfg.block_specs()
        self.specs = specs
        self.shallow = Block(specs["shallow"], dtype) if "shallow" in specs else Identity()
        self.reduce = Conv2d(w3, w3, 3, stride=2, dtype=dtype)
        self.middle = Block(specs["middle"], dtype)
        self.down = Block(specs["down"], dtype)
        self.top = Sequential(Conv2d(w3, w3 // 2, 1, dtype=dtype), Conv2d(w3 // 2, w3, 3, stride=2, dtype=dtype))
        head = cfg.head_config()
        k = cfg.num_classes
        self.loc_heads = [Conv2d(w3, l.priors * 4, 3, relu=False, dtype=dtype) for l in head.layers]
        self.conf_heads = [Conv2d(w3, l.priors * k, 3, relu=False, dtype=dtype) for l in head.layers]

    def features(self, x: Tensor) -> dict[str, Tensor]:
        """Named intermediate maps; the four ``source*`` entries feed the head."""
        f = {}
        f["stem"] = self.stem(x)
        f["source0"] = self.shallow(f["stem"])
        f["reduce"] = self.reduce(f["stem"])
        f["source1"] = self.middle(f["reduce"])
        f["source2"] = self.down(f["source1"])
        f["source3"] = self.top(f["source2"])
        return f

    def forward(self, x: Tensor) -> tuple[Tensor, Tensor]:
        """Returns (cls_logits (N, P, K), loc (N, P, 4))."""
        f = self.features(x)
        n = x.shape[0]
        k = self.cfg.num_classes
        locs, confs = [], []
        for i, (lh, ch) in enumerate(zip(self.loc_heads, self.conf_heads)):
            src = f[f"source{i}"]
            locs.append(T.reshape(T.transpose(lh(src), (0, 2, 3, 1)), (n, -1, 4)))
            confs.append(T.reshape(T.transpose(ch(src), (0, 2, 3, 1)), (n, -1, k)))
        return T.concat(confs, axis=1), T.concat(locs, axis=1)


def to_input(images: np.ndarray, dtype=np.float32) -> np.ndarray:
    """uint8 (N, H, W, 3) -> normalized float (N, 3, H, W)."""
    x = np.asarray(images, dtype=dtype).transpose(0, 3, 1, 2)
    return (x / 255.0 - 0.5) / 0.25
