"""Multi-branch block descriptions, builders, and receptive-field arithmetic.

A :class:`BlockSpec` is a frozen, serializable description.  :class:`Block`
instantiates it into parameters::

    concat(branches) -> 1x1 linear fuse -> fuse + alpha * shortcut -> relu

Each branch is a 1x1 bottleneck, zero or more relu convs, then a trailing
3x3 dilated conv (linear) or dilated pooling layer.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import tensor as T
from .nn import Conv2d, Identity, Module, Pool2d
from .tensor import Tensor

TRAILING_KINDS = ("conv", "maxpool", "avgpool")
COMPARISON_KINDS = ("inception", "inception_l", "aspp_s", "plain")


@dataclass(frozen=True)
class Trailing:
    kind: str = "conv"
    dilation: int = 1
    kernel: int = 3

    def __post_init__(self):
        if self.kind not in TRAILING_KINDS:
            raise ValueError(f"unknown trailing kind {self.kind!r}")
        if self.dilation < 1:
            raise ValueError("trailing dilation must be positive")


@dataclass(frozen=True)
class BranchSpec:
    """``conv_stack`` holds (kh, kw, stride) triples; the first is the 1x1
    bottleneck.  Every conv in the branch outputs ``bottleneck_channels``."""

    bottleneck_channels: int
    conv_stack: tuple[tuple[int, int, int], ...]
    trailing: Trailing

    def __post_init__(self):
        if self.bottleneck_channels < 1:
            raise ValueError("bottleneck_channels must be positive")
        if not self.conv_stack or tuple(self.conv_stack[0][:2]) != (1, 1):
            raise ValueError("a branch must start with a 1x1 bottleneck conv")
        object.__setattr__(self, "conv_stack", tuple(tuple(int(v) for v in c) for c in self.conv_stack))


@dataclass(frozen=True)
class Shortcut:
    enabled: bool = True
    alpha: float = 0.1
    projection: bool = False


@dataclass(frozen=True)
class BlockSpec:
    in_channels: int
    branches: tuple[BranchSpec, ...]
    fuse_channels: int
    shortcut: Shortcut = field(default_factory=Shortcut)
    stride: int = 1
    name: str = "block"

    @property
    def concat_channels(self) -> int:
        return sum(b.bottleneck_channels for b in self.branches)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "BlockSpec":
        branches = tuple(
            BranchSpec(b["bottleneck_channels"], tuple(tuple(c) for c in b["conv_stack"]), Trailing(**b["trailing"]))
            for b in d["branches"]
        )
        return cls(d["in_channels"], branches, d["fuse_channels"], Shortcut(**d["shortcut"]), d["stride"], d["name"])


@dataclass(frozen=True)
class RfFootprint:
    size: tuple[int, int]
    jump: int

    @property
    def area(self) -> int:
        return self.size[0] * self.size[1]


# ---------------------------------------------------------------------------
# builders


def _branch(width: int, kernels, trailing: Trailing, stride: int) -> BranchSpec:
    stack = [(1, 1, 1)] + [(kh, kw, 1) for kh, kw in kernels]
    if stride != 1:
        kh, kw, _ = stack[-1]
        stack[-1] = (kh, kw, stride)
    return BranchSpec(width, tuple(stack), trailing)


def _shortcut(in_channels, out_channels, stride, alpha) -> Shortcut:
    return Shortcut(True, alpha, projection=in_channels != out_channels or stride != 1)


def _bottleneck(in_channels: int, bottleneck: int | None) -> int:
    return bottleneck if bottleneck is not None else max(1, in_channels // 8)


def _assemble(name, in_channels, out_channels, layouts, stride, alpha, bottleneck) -> BlockSpec:
    width = _bottleneck(in_channels, bottleneck)
    branches = tuple(_branch(width, kernels, trailing, stride) for kernels, trailing in layouts)
    return BlockSpec(in_channels, branches, out_channels, _shortcut(in_channels, out_channels, stride, alpha), stride, name)


def make_rfb(in_channels: int, out_channels: int, stride: int = 1, alpha: float = 0.1, trailing: str = "conv",
             bottleneck: int | None = None, extra_7x7: bool = False) -> BlockSpec:
    """Three branches simulating 1x1, 3x3 and 5x5 kernels, each followed by
    a 3x3 trailing layer with dilation 1, 3, 5.

    The 5x5 kernel is two stacked 3x3 convs.  ``extra_7x7`` appends a fourth
    branch (three stacked 3x3, dilation 7).
    """
    layouts = [
        ((), Trailing(trailing, 1)),
        (((3, 3),), Trailing(trailing, 3)),
        (((3, 3), (3, 3)), Trailing(trailing, 5)),
    ]
    if extra_7x7:
        layouts.append((((3, 3), (3, 3), (3, 3)), Trailing(trailing, 7)))
    return _assemble("rfb", in_channels, out_channels, layouts, stride, alpha, bottleneck)


def make_rfb_s(in_channels: int, out_channels: int, alpha: float = 0.1, trailing: str = "conv",
               bottleneck: int | None = None) -> BlockSpec:
    """Smaller-RF variant for shallow maps: four branches, 3x3 kernels
    factorized into 1x3 / 3x1 pairs."""
    layouts = [
        ((), Trailing(trailing, 1)),
        (((1, 3),), Trailing(trailing, 3)),
        (((3, 1),), Trailing(trailing, 3)),
        (((1, 3), (3, 1)), Trailing(trailing, 5)),
    ]
    return _assemble("rfb_s", in_channels, out_channels, layouts, 1, alpha, bottleneck)


def make_comparison_block(kind: str, in_channels: int, out_channels: int, stride: int = 1, alpha: float = 0.1,
                          bottleneck: int | None = None, reference: BlockSpec | None = None) -> BlockSpec:
    """Structures the RFB is compared against.

    ``plain`` is a single-branch stack of 3x3 convs whose width is tuned so
    its parameter count is as close as possible to ``reference`` (default:
    ``make_rfb`` with the same arguments).
    """
    if kind == "deformable":
        raise ValueError("deformable convolution is not supported")
    if kind == "inception":
        layouts = [((), Trailing("conv", 1)),
                   (((3, 3),), Trailing("conv", 1)),
                   (((3, 3), (3, 3)), Trailing("conv", 1))]
    elif kind == "inception_l":
        layouts = [((), Trailing("conv", 1)),
                   (((7, 7),), Trailing("conv", 1)),
                   (((7, 7), (7, 7)), Trailing("conv", 1))]
    elif kind == "aspp_s":
        layouts = [((), Trailing("conv", d)) for d in (1, 3, 5)]
    elif kind == "plain":
        if reference is None:
            reference = make_rfb(in_channels, out_channels, stride, alpha, bottleneck=bottleneck)
        return _plain_matched(in_channels, out_channels, stride, alpha, reference)
    else:
        raise ValueError(f"unknown comparison block {kind!r}; expected one of {COMPARISON_KINDS}")
    return _assemble(kind, in_channels, out_channels, layouts, stride, alpha, bottleneck)


def _plain_matched(in_channels, out_channels, stride, alpha, reference: BlockSpec, tolerance: float = 0.05) -> BlockSpec:
    """Single branch: 1x1, ``depth`` 3x3 convs, 3x3 trailing conv.

    Depth 2 is used whenever some width lands within ``tolerance`` of the
    reference count; at small channel counts the width steps are too coarse
    for that, and the closest depth in 1..3 is taken instead.
    """
    target = param_count(reference)

    def build(depth, width):
        layouts = [(((3, 3),) * depth, Trailing("conv", 1))]
        return _assemble("plain", in_channels, out_channels, layouts, stride, alpha, width)

    def closest(depth):
        widths = range(1, 4 * max(in_channels, out_channels) + 1)
        return min((build(depth, w) for w in widths), key=lambda b: abs(param_count(b) - target))

    preferred = closest(2)
    if abs(param_count(preferred) - target) <= tolerance * target:
        return preferred
    return min((closest(d) for d in (1, 2, 3)), key=lambda b: abs(param_count(b) - target))


# ---------------------------------------------------------------------------
# arithmetic


def _branch_layers(branch: BranchSpec):
    """(kh, kw, stride, dilation, weighted) for every layer in the branch."""
    for kh, kw, s in branch.conv_stack:
        yield kh, kw, s, 1, True
    t = branch.trailing
    yield t.kernel, t.kernel, 1, t.dilation, t.kind == "conv"


def theoretical_rf(block: BlockSpec) -> list[RfFootprint]:
    """Receptive-field size of each branch in input pixels."""
    out = []
    for branch in block.branches:
        rh = rw = 1
        jump = 1
        for kh, kw, s, d, _ in _branch_layers(branch):
            rh += (kh - 1) * d * jump
            rw += (kw - 1) * d * jump
            jump *= s
        out.append(RfFootprint((rh, rw), jump))
    return out


def widest_rf(block: BlockSpec) -> RfFootprint:
    rfs = theoretical_rf(block)
    return max(rfs, key=lambda r: (r.area, r.size))


def param_count(block: BlockSpec) -> int:
    """Exact number of weights plus biases."""
    total = 0
    for branch in block.branches:
        cin = block.in_channels
        width = branch.bottleneck_channels
        for kh, kw, _, _, weighted in _branch_layers(branch):
            if weighted:
                total += cin * width * kh * kw + width
            cin = width
    total += block.concat_channels * block.fuse_channels + block.fuse_channels
    if block.shortcut.enabled and block.shortcut.projection:
        total += block.in_channels * block.fuse_channels + block.fuse_channels
    return total


def output_shape(block: BlockSpec, shape: tuple[int, int, int, int]) -> tuple[int, int, int, int]:
    n, _, h, w = shape
    s = block.stride
    return n, block.fuse_channels, (h - 1) // s + 1, (w - 1) // s + 1


def with_trailing(block: BlockSpec, kind: str) -> BlockSpec:
    branches = tuple(replace(b, trailing=replace(b.trailing, kind=kind)) for b in block.branches)
    return replace(block, branches=branches)


# ---------------------------------------------------------------------------
# instantiation


class Branch(Module):
    def __init__(self, spec: BranchSpec, in_channels: int, dtype=np.float32):
        width = spec.bottleneck_channels
        self.convs = []
        cin = in_channels
        for kh, kw, s in spec.conv_stack:
            self.convs.append(Conv2d(cin, width, (kh, kw), stride=s, relu=True, dtype=dtype))
            cin = width
        t = spec.trailing
        if t.kind == "conv":
            self.trailing = Conv2d(width, width, t.kernel, dilation=t.dilation, relu=False, dtype=dtype)
        else:
            self.trailing = Pool2d(t.kind[:3], t.kernel, dilation=t.dilation)

    def forward(self, x: Tensor) -> Tensor:
        for conv in self.convs:
            x = conv(x)
        return self.trailing(x)


class Block(Module):
    def __init__(self, spec: BlockSpec, dtype=np.float32):
        self.spec = spec
        self.branches = [Branch(b, spec.in_channels, dtype) for b in spec.branches]
        self.fuse = Conv2d(spec.concat_channels, spec.fuse_channels, 1, relu=False, dtype=dtype)
        sc = spec.shortcut
        if sc.enabled and sc.projection:
            self.shortcut = Conv2d(spec.in_channels, spec.fuse_channels, 1, stride=spec.stride, relu=False, dtype=dtype)
        else:
            self.shortcut = Identity()

    def forward(self, x: Tensor) -> Tensor:
        y = self.fuse(T.concat_channels([b(x) for b in self.branches]))
        if self.spec.shortcut.enabled:
            y = T.scale_add(y, self.shortcut(x), self.spec.shortcut.alpha)
        return T.relu(y)
