"""Dense float64 tensors with reverse-mode automatic differentiation.

The engine is deliberately small: a :class:`Tensor` wraps a numpy array and
remembers how it was produced, and :func:`backward` walks the producing
records once in reverse topological order, accumulating gradients into the
trainable leaves.  Every operation needed by the channel estimator lives
here; operations accept an optional leading batch axis where noted.
"""

from __future__ import annotations

import json
import struct
from contextlib import contextmanager
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from chanest.interp import linear_interp_matrix

__all__ = [
    "Tensor",
    "Parameter",
    "no_grad",
    "backward",
    "matmul",
    "conv2d_same",
    "softmax_rows",
    "layer_norm",
    "silu",
    "sigmoid",
    "relu",
    "bilinear_resize",
    "reshape",
    "swapaxes",
    "narrow",
    "sum_all",
    "mean_all",
    "save_parameters",
    "load_parameters",
]

_grad_enabled = True


@contextmanager
def no_grad():
    """Disable graph construction inside the block (pure inference)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """A float64 n-dimensional value, optionally part of a backward graph.

    ``grad`` is populated for leaf tensors with ``requires_grad`` after a
    :func:`backward` call and accumulates across calls until ``zero_grad``.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjp")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._vjp: Callable[[np.ndarray], tuple] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # arithmetic sugar; scalars broadcast through the generic ops
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("tensor/tensor division is not supported; divide by a scalar")
        return mul(self, 1.0 / float(other))

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


class Parameter(Tensor):
    """A named trainable tensor."""

    __slots__ = ("name",)

    def __init__(self, name: str, data):
        super().__init__(data, requires_grad=True)
        self.name = name

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape})"


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: tuple[Tensor, ...], vjp) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._vjp = vjp
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def backward(root: Tensor) -> None:
    """Accumulate d(root)/d(leaf) into every reachable trainable leaf.

    ``root`` must be scalar-shaped.  Each producing record is visited exactly
    once; repeated calls (on this or other graphs) keep accumulating into
    leaf ``grad`` until the leaves are reset.
    """
    if root.size != 1:
        raise ValueError(f"backward requires a scalar root, got shape {root.shape}")

    topo: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited and p.requires_grad:
                stack.append((p, False))

    grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    for node in reversed(topo):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._vjp is None:
            if node.requires_grad:
                node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._vjp(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


# ---------------------------------------------------------------------------
# elementwise and broadcasting arithmetic


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data + b.data

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(out, (a, b), vjp)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data - b.data

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(out, (a, b), vjp)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data * b.data

    def vjp(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(out, (a, b), vjp)


def sum_all(x) -> Tensor:
    x = _as_tensor(x)
    out = np.asarray(x.data.sum())

    def vjp(g):
        return (np.broadcast_to(g, x.shape).astype(np.float64),)

    return _make(out, (x,), vjp)


def mean_all(x) -> Tensor:
    x = _as_tensor(x)
    out = np.asarray(x.data.mean())
    n = x.size

    def vjp(g):
        return (np.broadcast_to(g / n, x.shape).astype(np.float64),)

    return _make(out, (x,), vjp)


# ---------------------------------------------------------------------------
# shape manipulation


def reshape(x, shape) -> Tensor:
    x = _as_tensor(x)
    out = x.data.reshape(shape)

    def vjp(g):
        return (g.reshape(x.shape),)

    return _make(out, (x,), vjp)


def swapaxes(x, axis1: int, axis2: int) -> Tensor:
    x = _as_tensor(x)
    out = np.swapaxes(x.data, axis1, axis2)

    def vjp(g):
        return (np.swapaxes(g, axis1, axis2),)

    return _make(out, (x,), vjp)


def narrow(x, axis: int, start: int, stop: int) -> Tensor:
    """Slice ``[start:stop)`` along ``axis``; the gradient zero-pads back."""
    x = _as_tensor(x)
    index = [slice(None)] * x.ndim
    index[axis] = slice(start, stop)
    index = tuple(index)
    out = x.data[index]

    def vjp(g):
        full = np.zeros(x.shape)
        full[index] = g
        return (full,)

    return _make(out, (x,), vjp)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b) -> Tensor:
    """Matrix product with numpy's stacked-broadcast semantics.

    Gradients are dA = g @ B^T and dB = A^T @ g, summed over any axes that
    were broadcast.
    """
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError(f"matmul needs >=2-d operands, got shapes {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul inner extents differ: {a.shape} vs {b.shape}")
    out = np.matmul(a.data, b.data)

    def vjp(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(out, (a, b), vjp)


# ---------------------------------------------------------------------------
# activations


def sigmoid(x) -> Tensor:
    x = _as_tensor(x)
    out = 1.0 / (1.0 + np.exp(-x.data))

    def vjp(g):
        return (g * out * (1.0 - out),)

    return _make(out, (x,), vjp)


def silu(x) -> Tensor:
    x = _as_tensor(x)
    s = 1.0 / (1.0 + np.exp(-x.data))
    out = x.data * s

    def vjp(g):
        return (g * s * (1.0 + x.data * (1.0 - s)),)

    return _make(out, (x,), vjp)


def relu(x) -> Tensor:
    x = _as_tensor(x)
    mask = x.data > 0
    out = np.where(mask, x.data, 0.0)

    def vjp(g):
        return (g * mask,)

    return _make(out, (x,), vjp)


def softmax_rows(x) -> Tensor:
    """Row-wise softmax over the last axis, with max subtraction."""
    x = _as_tensor(x)
    if not np.all(np.isfinite(x.data)):
        raise ValueError("softmax_rows requires finite input")
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        dot = (g * out).sum(axis=-1, keepdims=True)
        return (out * (g - dot),)

    return _make(out, (x,), vjp)


def layer_norm(x, w, b, eps: float = 1e-5) -> Tensor:
    """Normalize by the mean/variance of all (per-sample) elements.

    ``x`` is ``[L, C]`` or batched ``[B, L, C]``; ``w`` and ``b`` are length-L
    affine parameters broadcast across C.  The statistics are scalars per
    sample, not per row.
    """
    x, w, b = _as_tensor(x), _as_tensor(w), _as_tensor(b)
    if eps <= 0:
        raise ValueError("layer_norm eps must be positive")
    if x.ndim not in (2, 3):
        raise ValueError(f"layer_norm expects 2-d or batched 3-d input, got {x.shape}")
    if w.shape != (x.shape[-2],) or b.shape != (x.shape[-2],):
        raise ValueError(
            f"layer_norm affine shapes {w.shape}/{b.shape} do not match rows {x.shape[-2]}"
        )
    axes = (-2, -1)
    mu = x.data.mean(axis=axes, keepdims=True)
    var = ((x.data - mu) ** 2).mean(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    wc = w.data[:, None]
    out = wc * xhat + b.data[:, None]
    n = x.shape[-2] * x.shape[-1]

    def vjp(g):
        gxhat = g * wc
        m1 = gxhat.sum(axis=axes, keepdims=True) / n
        m2 = (gxhat * xhat).sum(axis=axes, keepdims=True) / n
        gx = (gxhat - m1 - xhat * m2) * inv
        batch_axes = tuple(range(g.ndim - 2))
        gw = (g * xhat).sum(axis=batch_axes + (-1,))
        gb = g.sum(axis=batch_axes + (-1,))
        return gx, gw, gb

    return _make(out, (x, w, b), vjp)


# ---------------------------------------------------------------------------
# convolution

_TALL_KERNEL = "tall"
_IM2COL = "im2col"

#: patch-buffer budget for the im2col path, in float64 elements
_CONV_CHUNK_ELEMS = 48 * 2**20


def _conv_mode(h: int, kh: int) -> str:
    # When the kernel is at least twice the input height, every same-padded
    # window covers all input rows and the spatial loop collapses to one GEMM
    # over half-size patches.
    return _TALL_KERNEL if kh >= 2 * h - 1 else _IM2COL


def conv2d_same(x, kernels, bias=None) -> Tensor:
    """Stride-1 same-size cross-correlation with zero padding.

    ``x`` is ``[H, W, Cin]`` or batched ``[B, H, W, Cin]``; ``kernels`` is
    ``[kh, kw, Cin, Cout]``.  Even kernel extents pad ``(k-1)//2`` on the
    leading side and the remainder on the trailing side.
    """
    x, kernels = _as_tensor(x), _as_tensor(kernels)
    if kernels.ndim != 4:
        raise ValueError(f"conv kernels must be 4-d, got {kernels.shape}")
    if x.ndim not in (3, 4):
        raise ValueError(f"conv input must be 3-d or batched 4-d, got {x.shape}")
    if x.shape[-1] != kernels.shape[2]:
        raise ValueError(
            f"channel mismatch: input has {x.shape[-1]}, kernels expect {kernels.shape[2]}"
        )
    batched = x.ndim == 4
    xb = x.data if batched else x.data[None]
    kh, kw = kernels.shape[0], kernels.shape[1]
    h = xb.shape[1]

    if _conv_mode(h, kh) == _TALL_KERNEL:
        out, saved = _conv_tall_forward(xb, kernels.data)
        vjp_impl = _conv_tall_vjp
    else:
        out = _conv_im2col_forward(xb, kernels.data)
        saved = None
        vjp_impl = _conv_im2col_vjp

    parents: tuple[Tensor, ...] = (x, kernels)
    if bias is not None:
        bias = _as_tensor(bias)
        if bias.shape != (kernels.shape[3],):
            raise ValueError(f"bias shape {bias.shape} does not match Cout {kernels.shape[3]}")
        out = out + bias.data
        parents = (x, kernels, bias)

    result = out if batched else out[0]

    def vjp(g):
        gb = g if batched else g[None]
        gx, gk = vjp_impl(xb, kernels.data, gb, saved)
        grads = [gx if batched else gx[0], gk]
        if bias is not None:
            grads.append(gb.sum(axis=(0, 1, 2)))
        return tuple(grads)

    return _make(result, parents, vjp)


def _gather_patches(x: np.ndarray, kh: int, kw: int, pt: int, pl: int) -> np.ndarray:
    """im2col: (b, h, w, c) -> (b*h*w, kh*kw*c) patch rows, zero padded."""
    b, h, w, c = x.shape
    xp = np.pad(x, ((0, 0), (pt, kh - 1 - pt), (pl, kw - 1 - pl), (0, 0)))
    view = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(1, 2))
    return np.ascontiguousarray(view.transpose(0, 1, 2, 4, 5, 3)).reshape(b * h * w, kh * kw * c)


def _conv_chunk(b: int, per_sample: int) -> int:
    return max(1, min(b, _CONV_CHUNK_ELEMS // max(1, per_sample)))


def _conv_im2col_forward(x: np.ndarray, k: np.ndarray) -> np.ndarray:
    b, h, w, ci = x.shape
    kh, kw, _, co = k.shape
    pt, pl = (kh - 1) // 2, (kw - 1) // 2
    km = k.reshape(kh * kw * ci, co)
    out = np.empty((b, h, w, co))
    step = _conv_chunk(b, h * w * kh * kw * ci)
    for i in range(0, b, step):
        pm = _gather_patches(x[i : i + step], kh, kw, pt, pl)
        out[i : i + step] = (pm @ km).reshape(-1, h, w, co)
    return out


def _conv_im2col_vjp(x, k, g, _saved):
    # dX is the correlation of g with the flipped, channel-swapped kernel,
    # so both gradients reuse the same gather + GEMM machinery.
    b, h, w, ci = x.shape
    kh, kw, _, co = k.shape
    pt, pl = (kh - 1) // 2, (kw - 1) // 2
    kf = k[::-1, ::-1].transpose(0, 1, 3, 2).reshape(kh * kw * co, ci)
    gk = np.zeros((kh * kw * ci, co))
    gx = np.empty_like(x)
    step = _conv_chunk(b, h * w * kh * kw * max(ci, co))
    for i in range(0, b, step):
        n = min(step, b - i)
        gm = g[i : i + n].reshape(n * h * w, co)
        pm = _gather_patches(x[i : i + n], kh, kw, pt, pl)
        gk += pm.T @ gm
        gpm = _gather_patches(g[i : i + n], kh, kw, kh - 1 - pt, kw - 1 - pl)
        gx[i : i + n] = (gpm @ kf).reshape(n, h, w, ci)
    return gx, gk.reshape(k.shape)


def _tall_kernel_matrix(k: np.ndarray, h: int, dx: int) -> np.ndarray:
    # kd[(r, ci), (i, co)] = k[r - i + pt, dx]; with kh >= 2h-1 the row index
    # never leaves the kernel, so each column offset is one dense row map.
    kh, kw, ci, co = k.shape
    pt = (kh - 1) // 2
    rows = pt + np.arange(h)[:, None] - np.arange(h)[None, :]
    return np.ascontiguousarray(k[rows, dx].transpose(0, 2, 1, 3)).reshape(h * ci, h * co)


def _tall_col_ranges(w: int, kw: int, dx: int):
    pl = (kw - 1) // 2
    j0 = max(0, pl - dx)
    j1 = min(w, w + pl - dx)
    return j0, j1, j0 + dx - pl, j1 + dx - pl


def _conv_tall_forward(x: np.ndarray, k: np.ndarray):
    b, h, w, ci = x.shape
    kh, kw, _, co = k.shape
    xt = np.ascontiguousarray(x.transpose(0, 2, 1, 3)).reshape(b, w, h * ci)
    out2 = np.zeros((b, w, h * co))
    for dx in range(kw):
        j0, j1, s0, s1 = _tall_col_ranges(w, kw, dx)
        if j0 >= j1:
            continue
        out2[:, j0:j1] += xt[:, s0:s1] @ _tall_kernel_matrix(k, h, dx)
    out = np.ascontiguousarray(out2.reshape(b, w, h, co).transpose(0, 2, 1, 3))
    return out, xt


def _conv_tall_vjp(x, k, g, saved):
    xt = saved
    b, h, w, ci = x.shape
    kh, kw, _, co = k.shape
    pt = (kh - 1) // 2
    g2 = np.ascontiguousarray(g.transpose(0, 2, 1, 3)).reshape(b, w, h * co)
    gxt = np.zeros_like(xt)
    gk = np.zeros_like(k)
    for dx in range(kw):
        j0, j1, s0, s1 = _tall_col_ranges(w, kw, dx)
        if j0 >= j1:
            continue
        kd = _tall_kernel_matrix(k, h, dx)
        gslab = g2[:, j0:j1].reshape(-1, h * co)
        gxt[:, s0:s1] += (gslab @ kd.T).reshape(b, j1 - j0, h * ci)
        m = xt[:, s0:s1].reshape(-1, h * ci).T @ gslab
        vals = m.reshape(h, ci, h, co).transpose(0, 2, 1, 3)
        for i in range(h):
            gk[pt - i : pt - i + h, dx] += vals[:, i]
    gx = np.ascontiguousarray(gxt.reshape(b, w, h, ci).transpose(0, 2, 1, 3))
    return gx, gk


# ---------------------------------------------------------------------------
# resizing


def bilinear_resize(x, out_h: int, out_w: int) -> Tensor:
    """Align-corners bilinear resize of ``[H, W, C]`` (or batched) maps.

    Separable: implemented as two dense interpolation matrices, so the
    gradient is their transpose.
    """
    x = _as_tensor(x)
    if x.ndim not in (3, 4):
        raise ValueError(f"bilinear_resize expects 3-d or batched 4-d input, got {x.shape}")
    h, w = x.shape[-3], x.shape[-2]
    if h < 1 or w < 1 or out_h < 1 or out_w < 1:
        raise ValueError("bilinear_resize extents must be positive")
    rh = _align_corners_matrix(h, out_h)
    rw = _align_corners_matrix(w, out_w)
    out = np.einsum("oh,...hwc,pw->...opc", rh, x.data, rw, optimize=True)

    def vjp(g):
        return (np.einsum("oh,...opc,pw->...hwc", rh, g, rw, optimize=True),)

    return _make(out, (x,), vjp)


def _align_corners_matrix(n_src: int, n_dst: int) -> np.ndarray:
    if n_src == 1:
        return np.ones((n_dst, 1))
    if n_dst == 1:
        pos = np.zeros(1)
    else:
        pos = np.arange(n_dst) * (n_src - 1) / (n_dst - 1)
    return linear_interp_matrix(np.arange(n_src, dtype=np.float64), pos)


# ---------------------------------------------------------------------------
# parameter checkpoints

_MAGIC = b"CEPK"
FORMAT_VERSION = 1


def _param_items(params) -> list[tuple[str, np.ndarray]]:
    if isinstance(params, Mapping):
        return [(name, _as_tensor(p).data) for name, p in params.items()]
    items = []
    for p in params:
        if not isinstance(p, Parameter):
            raise TypeError("sequence form requires Parameter objects with names")
        items.append((p.name, p.data))
    return items


def save_parameters(path, params, header: dict | None = None) -> None:
    """Write ordered (name, shape, float64 payload) records with a header."""
    items = _param_items(params)
    head = json.dumps(header or {}, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<HI", FORMAT_VERSION, len(head)))
        fh.write(head)
        fh.write(struct.pack("<I", len(items)))
        for name, data in items:
            encoded = name.encode()
            fh.write(struct.pack("<H", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<B", data.ndim))
            fh.write(struct.pack(f"<{data.ndim}I", *data.shape))
            fh.write(np.ascontiguousarray(data, dtype="<f8").tobytes())


def load_parameters(path) -> tuple[dict, dict[str, np.ndarray]]:
    """Read a checkpoint written by :func:`save_parameters`."""
    with open(path, "rb") as fh:
        if fh.read(4) != _MAGIC:
            raise ValueError(f"{path}: not a parameter checkpoint")
        version, head_len = struct.unpack("<HI", fh.read(6))
        if version != FORMAT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        header = json.loads(fh.read(head_len).decode())
        (count,) = struct.unpack("<I", fh.read(4))
        values: dict[str, np.ndarray] = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<H", fh.read(2))
            name = fh.read(name_len).decode()
            (ndim,) = struct.unpack("<B", fh.read(1))
            shape = struct.unpack(f"<{ndim}I", fh.read(4 * ndim)) if ndim else ()
            n = int(np.prod(shape)) if shape else 1
            data = np.frombuffer(fh.read(8 * n), dtype="<f8").reshape(shape)
            values[name] = data.astype(np.float64)
    return header, values
