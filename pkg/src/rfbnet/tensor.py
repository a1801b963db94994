"""Dense NCHW tensors with reverse-mode differentiation.

Only the operators the detector needs are provided: dilated convolution and
pooling, relu, concatenation, the scaled shortcut add, the two detection
losses, and a handful of shape helpers for flattening head outputs.

Every op records a node holding its parents and a backward closure.  Nodes
carry a monotonically increasing creation id, and :func:`backward` visits the
reachable nodes in reverse creation order, which is a valid topological order
because parents are always created before their children.
"""
from __future__ import annotations

import itertools
from typing import Callable, Sequence

import numpy as np

_node_ids = itertools.count()


class GraphError(RuntimeError):
    """Raised on misuse of the differentiation graph."""


class Tensor:
    """An ndarray plus gradient bookkeeping.

    Leaves created by the user have no parents; a leaf with
    ``requires_grad=True`` accumulates gradient additively in ``grad``.
    """

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward", "_id", "_consumed")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float32)
        self.data: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self._id = next(_node_ids)
        self._consumed = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label})"

    def __add__(self, other: Tensor) -> Tensor:
        return add(self, other)

    def __mul__(self, scale: float) -> Tensor:
        return mul_scalar(self, scale)

    __rmul__ = __mul__

    def backward(self, grad: np.ndarray | None = None) -> None:
        backward(self, grad)


def _make(data: np.ndarray, parents: Sequence[Tensor], fn: Callable[[np.ndarray], Sequence[np.ndarray | None]]) -> Tensor:
    out = Tensor(data)
    live = tuple(p for p in parents if p.requires_grad)
    if live:
        out.requires_grad = True
        out._parents = tuple(parents)

        def _bw(g: np.ndarray) -> None:
            for parent, pg in zip(parents, fn(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if parent.grad is None:
                    parent.grad = np.array(pg, dtype=parent.dtype, copy=True)
                else:
                    parent.grad += pg

        out._backward = _bw
    return out


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise FloatingPointError(f"{op}: non-finite values in output")


def backward(root: Tensor, grad: np.ndarray | None = None) -> None:
    """Backpropagate from ``root``.

    With ``grad=None`` the root must hold a single element and is seeded with
    1.  A graph can be traversed once; its saved buffers are released
    afterwards and a second call raises :class:`GraphError`.
    """
    if grad is None:
        if root.data.size != 1:
            raise GraphError(f"backward() without a seed needs a scalar, got shape {root.shape}")
        grad = np.ones_like(root.data)
    else:
        grad = np.asarray(grad, dtype=root.dtype)
        if grad.shape != root.shape:
            raise GraphError(f"seed gradient shape {grad.shape} != output shape {root.shape}")
    if root._consumed:
        raise GraphError("graph already backpropagated; rebuild it (and zero grads) before calling backward again")
    if not root.requires_grad:
        raise GraphError("output does not depend on any tensor with requires_grad=True")

    nodes: dict[int, Tensor] = {}
    stack = [root]
    while stack:
        t = stack.pop()
        if t._id in nodes:
            continue
        nodes[t._id] = t
        stack.extend(p for p in t._parents if p.requires_grad)

    interior = [t for t in nodes.values() if t._backward is not None]
    for t in interior:
        t.grad = None
    root.grad = grad.copy()
    for t in sorted(interior, key=lambda n: n._id, reverse=True):
        if t.grad is not None:
            t._backward(t.grad)
        # free buffers; interior grads are not retained
        t._backward = None
        t._parents = ()
        t._consumed = True
        if t is not root:
            t.grad = None


# ---------------------------------------------------------------------------
# convolution helpers


def conv_output_size(size: int, kernel: int, stride: int, pad: int, dilation: int) -> int:
    k_eff = kernel + (kernel - 1) * (dilation - 1)
    return (size + 2 * pad - k_eff) // stride + 1


def _pair(v) -> tuple[int, int]:
    if isinstance(v, (tuple, list)):
        a, b = v
        return int(a), int(b)
    return int(v), int(v)


def _im2col(xp: np.ndarray, kh, kw, sh, sw, dh, dw, ho, wo) -> np.ndarray:
    n, c = xp.shape[:2]
    cols = np.empty((n, c, kh, kw, ho, wo), dtype=xp.dtype)
    for i in range(kh):
        r0 = i * dh
        for j in range(kw):
            c0 = j * dw
            cols[:, :, i, j] = xp[:, :, r0:r0 + sh * (ho - 1) + 1:sh, c0:c0 + sw * (wo - 1) + 1:sw]
    return cols


def _col2im(cols: np.ndarray, padded_shape, kh, kw, sh, sw, dh, dw, ho, wo) -> np.ndarray:
    out = np.zeros(padded_shape, dtype=cols.dtype)
    for i in range(kh):
        r0 = i * dh
        for j in range(kw):
            c0 = j * dw
            out[:, :, r0:r0 + sh * (ho - 1) + 1:sh, c0:c0 + sw * (wo - 1) + 1:sw] += cols[:, :, i, j]
    return out


def _unpad(arr: np.ndarray, ph: int, pw: int) -> np.ndarray:
    h, w = arr.shape[2:]
    return arr[:, :, ph:h - ph, pw:w - pw]


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride=1, padding=0, dilation=1) -> Tensor:
    """Cross-correlation of ``x`` (N,C,H,W) with ``weight`` (Cout,C,kh,kw).

    ``stride``, ``padding`` and ``dilation`` are ints or (h, w) pairs;
    padding is with zeros.
    """
    if x.ndim != 4 or weight.ndim != 4:
        raise ValueError(f"conv2d expects 4-D input and weight, got {x.shape} and {weight.shape}")
    n, c, h, w = x.shape
    cout, cin, kh, kw = weight.shape
    if c != cin:
        raise ValueError(f"conv2d: input has {c} channels but weight expects {cin}")
    if bias is not None and bias.shape != (cout,):
        raise ValueError(f"conv2d: bias shape {bias.shape} != ({cout},)")
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    dh, dw = _pair(dilation)
    if min(sh, sw, dh, dw) < 1 or min(ph, pw) < 0:
        raise ValueError("conv2d: stride and dilation must be positive, padding non-negative")
    ho = conv_output_size(h, kh, sh, ph, dh)
    wo = conv_output_size(w, kw, sw, pw, dw)
    if ho < 1 or wo < 1:
        raise ValueError(f"conv2d: non-positive output extent {ho}x{wo} for input {h}x{w}")

    dtype = np.result_type(x.dtype, weight.dtype)
    xd = x.data.astype(dtype, copy=False)
    w2 = weight.data.astype(dtype, copy=False).reshape(cout, cin * kh * kw)
    pointwise = kh == 1 and kw == 1 and ph == 0 and pw == 0
    if pointwise:
        xs = xd[:, :, ::sh, ::sw] if (sh, sw) != (1, 1) else xd
        cols = xs.reshape(n, cin, ho * wo)
        padded_shape = None
    else:
        xp = np.pad(xd, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if (ph or pw) else xd
        padded_shape = xp.shape
        cols = _im2col(xp, kh, kw, sh, sw, dh, dw, ho, wo).reshape(n, cin * kh * kw, ho * wo)
    out = np.matmul(w2, cols)
    if bias is not None:
        out += bias.data.astype(dtype, copy=False)[None, :, None]
    out = out.reshape(n, cout, ho, wo)
    _check_finite(out, "conv2d")

    def grads(g: np.ndarray):
        g2 = g.reshape(n, cout, ho * wo)
        gx = gw = gb = None
        if weight.requires_grad:
            gw = np.einsum("nol,nkl->ok", g2, cols, optimize=True).reshape(weight.shape)
        if bias is not None and bias.requires_grad:
            gb = g2.sum(axis=(0, 2))
        if x.requires_grad:
            dcols = np.matmul(w2.T, g2)
            if pointwise:
                if (sh, sw) == (1, 1):
                    gx = dcols.reshape(x.shape)
                else:
                    gx = np.zeros(x.shape, dtype=dtype)
                    gx[:, :, ::sh, ::sw] = dcols.reshape(n, cin, ho, wo)
            else:
                dcols = dcols.reshape(n, cin, kh, kw, ho, wo)
                gx = _unpad(_col2im(dcols, padded_shape, kh, kw, sh, sw, dh, dw, ho, wo), ph, pw)
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(out, parents, grads)


def pool2d(x: Tensor, kind: str, kernel=3, stride=1, padding=0, dilation=1) -> Tensor:
    """Max or average pooling over a (possibly dilated) tap grid.

    Max pooling pads with -inf; average pooling pads with zeros and always
    divides by the full tap count.
    """
    if kind not in ("max", "avg"):
        raise ValueError(f"pool2d: unknown kind {kind!r}")
    if x.ndim != 4:
        raise ValueError(f"pool2d expects 4-D input, got {x.shape}")
    n, c, h, w = x.shape
    kh, kw = _pair(kernel)
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    dh, dw = _pair(dilation)
    ho = conv_output_size(h, kh, sh, ph, dh)
    wo = conv_output_size(w, kw, sw, pw, dw)
    if ho < 1 or wo < 1:
        raise ValueError(f"pool2d: non-positive output extent {ho}x{wo} for input {h}x{w}")
    fill = -np.inf if kind == "max" else 0.0
    xp = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw)), constant_values=fill)
    cols = _im2col(xp, kh, kw, sh, sw, dh, dw, ho, wo).reshape(n, c, kh * kw, ho, wo)
    taps = kh * kw
    if kind == "max":
        idx = cols.argmax(axis=2)
        out = np.take_along_axis(cols, idx[:, :, None], axis=2)[:, :, 0]
    else:
        out = cols.sum(axis=2) / taps
    _check_finite(out, "pool2d")

    def grads(g: np.ndarray):
        if kind == "max":
            dcols = np.zeros((n, c, taps, ho, wo), dtype=g.dtype)
            np.put_along_axis(dcols, idx[:, :, None], g[:, :, None], axis=2)
        else:
            dcols = np.broadcast_to((g / taps)[:, :, None], (n, c, taps, ho, wo))
        dcols = dcols.reshape(n, c, kh, kw, ho, wo)
        return (_unpad(_col2im(dcols, xp.shape, kh, kw, sh, sw, dh, dw, ho, wo), ph, pw),)

    return _make(out, (x,), grads)


# ---------------------------------------------------------------------------
# elementwise and structural ops


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _make(np.where(mask, x.data, 0).astype(x.dtype, copy=False), (x,), lambda g: (g * mask,))


def concat(parts: Sequence[Tensor], axis: int = 1) -> Tensor:
    if not parts:
        raise ValueError("concat: empty input")
    ref = parts[0].shape
    for p in parts[1:]:
        if p.ndim != len(ref) or any(a != b for k, (a, b) in enumerate(zip(p.shape, ref)) if k != axis % len(ref)):
            raise ValueError(f"concat: shape mismatch {p.shape} vs {ref} off axis {axis}")
    bounds = np.cumsum([0] + [p.shape[axis] for p in parts])
    out = np.concatenate([p.data for p in parts], axis=axis)

    def grads(g: np.ndarray):
        return [np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(parts))]

    return _make(out, tuple(parts), grads)


def concat_channels(parts: Sequence[Tensor]) -> Tensor:
    if any(p.ndim != 4 for p in parts):
        raise ValueError("concat_channels expects 4-D tensors")
    return concat(parts, axis=1)


def scale_add(main: Tensor, shortcut: Tensor, alpha: float) -> Tensor:
    """``main + alpha * shortcut``."""
    if main.shape != shortcut.shape:
        raise ValueError(f"scale_add: shape mismatch {main.shape} vs {shortcut.shape}")
    out = main.data + alpha * shortcut.data
    return _make(out, (main, shortcut), lambda g: (g, alpha * g))


def add(a: Tensor, b: Tensor) -> Tensor:
    return scale_add(a, b, 1.0)


def mul_scalar(x: Tensor, scale: float) -> Tensor:
    return _make(x.data * scale, (x,), lambda g: (g * scale,))


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    inv = np.argsort(axes)
    return _make(np.ascontiguousarray(x.data.transpose(axes)), (x,), lambda g: (g.transpose(inv),))


def total(x: Tensor) -> Tensor:
    """Sum of all elements, as a shape-() tensor."""
    return _make(np.asarray(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, x.shape),))


def take_rows(x: Tensor, index: np.ndarray) -> Tensor:
    """Rows ``x[index]`` along axis 0; repeated indices accumulate."""
    index = np.asarray(index, dtype=np.int64)

    def grads(g: np.ndarray):
        gx = np.zeros(x.shape, dtype=g.dtype)
        np.add.at(gx, index, g)
        return (gx,)

    return _make(x.data[index], (x,), grads)


# ---------------------------------------------------------------------------
# losses


def softmax_ce(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Per-row ``-log softmax(logits)[label]`` for logits of shape (N, K)."""
    if logits.ndim != 2:
        raise ValueError(f"softmax_ce expects (N, K) logits, got {logits.shape}")
    labels = np.asarray(labels, dtype=np.int64)
    n, k = logits.shape
    if labels.shape != (n,):
        raise ValueError(f"softmax_ce: labels shape {labels.shape} != ({n},)")
    if n and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"softmax_ce: labels must lie in [0, {k})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(n)
    out = lse - z[rows, labels]
    _check_finite(out, "softmax_ce")

    def grads(g: np.ndarray):
        p = np.exp(z - lse[:, None])
        p[rows, labels] -= 1.0
        return (p * g[:, None],)

    return _make(out, (logits,), grads)


def smooth_l1(pred: Tensor, target: Tensor) -> Tensor:
    """Elementwise Huber loss with unit transition point."""
    if pred.shape != target.shape:
        raise ValueError(f"smooth_l1: shape mismatch {pred.shape} vs {target.shape}")
    d = pred.data - target.data
    ad = np.abs(d)
    small = ad < 1.0
    out = np.where(small, 0.5 * d * d, ad - 0.5)

    def grads(g: np.ndarray):
        gd = g * np.where(small, d, np.sign(d))
        return gd, -gd

    return _make(out, (pred, target), grads)


# ---------------------------------------------------------------------------


def input_gradient(output: Tensor, unit: Sequence[int], inp: Tensor) -> np.ndarray:
    """Gradient of the single output element ``output[unit]`` w.r.t. ``inp``.

    ``inp`` must have been created with ``requires_grad=True`` and used to
    compute ``output``.  The graph is consumed.
    """
    unit = tuple(int(u) for u in unit)
    if len(unit) != output.ndim or any(not 0 <= u < s for u, s in zip(unit, output.shape)):
        raise IndexError(f"unit {unit} out of range for output shape {output.shape}")
    seed = np.zeros_like(output.data)
    seed[unit] = 1.0
    inp.grad = None
    backward(output, seed)
    if inp.grad is None:
        return np.zeros_like(inp.data)
    return inp.grad
