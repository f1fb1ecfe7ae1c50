"""A small reverse-mode autodiff tensor on top of numpy.

Only the operators the place-recognition network needs are provided.
Each differentiable op records its parents and a backward closure on the
result; ``backward`` walks that graph in reverse topological order and
accumulates gradients into every leaf that requires them.

Precision is float32 by default. ``precision(np.float64)`` switches the
dtype used for newly created tensors; combined with float64 parameters it
gives the shadow mode used by finite-difference gradient checks.
"""

from __future__ import annotations

import contextlib
import struct
import threading
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

WEIGHTS_MAGIC = b"LPRW"

_state = threading.local()


def _get(name, default):
    return getattr(_state, name, default)


def default_dtype():
    return _get("dtype", np.float32)


def is_grad_enabled() -> bool:
    return _get("grad", True)


@contextlib.contextmanager
def precision(dtype):
    old = default_dtype()
    _state.dtype = np.dtype(dtype).type
    try:
        yield
    finally:
        _state.dtype = old


@contextlib.contextmanager
def no_grad():
    old = is_grad_enabled()
    _state.grad = False
    try:
        yield
    finally:
        _state.grad = old


class ShapeError(ValueError):
    def __init__(self, op: str, *shapes):
        super().__init__(f"{op}: incompatible shapes " + " and ".join(str(tuple(s)) for s in shapes))


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(default_dtype())
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None
        self.name = name

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self):
        self.grad = None

    def detach(self) -> Tensor:
        return Tensor(self.data)

    __add__ = lambda self, o: add(self, o)
    __radd__ = lambda self, o: add(o, self)
    __sub__ = lambda self, o: sub(self, o)
    __rsub__ = lambda self, o: sub(o, self)
    __mul__ = lambda self, o: mul(self, o)
    __rmul__ = lambda self, o: mul(o, self)
    __neg__ = lambda self: mul(self, -1.0)
    __matmul__ = lambda self, o: matmul(self, o)

    def __truediv__(self, o):
        if isinstance(o, Tensor):
            raise TypeError("division by a tensor is not supported")
        return mul(self, 1.0 / o)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], tuple) else shape)

    def transpose(self, *axes):
        return transpose(self, axes[0] if len(axes) == 1 and isinstance(axes[0], tuple) else axes)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def backward(self):
        backward(self)


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=default_dtype()))


def _result(data, parents: Sequence[Tensor], backward_fn) -> Tensor:
    out = Tensor(data)
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _broadcast_shape(op, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None


# --------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)
    return _result(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)
    return _result(a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)
    return _result(a.data * b.data, (a, b),
                   lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _result(np.where(mask, x.data, 0).astype(x.data.dtype), (x,), lambda g: (g * mask,))


# --------------------------------------------------------------------------
# shape manipulation


def reshape(x: Tensor, shape) -> Tensor:
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", x.shape, shape) from None
    return _result(out, (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes=None) -> Tensor:
    axes = tuple(range(x.ndim))[::-1] if not axes else tuple(axes)
    inv = tuple(np.argsort(axes))
    return _result(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


def getitem(x: Tensor, idx) -> Tensor:
    def back(g):
        full = np.zeros_like(x.data)
        np.add.at(full, idx, g)
        return (full,)
    return _result(x.data[idx], (x,), back)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeError("concat", *[t.shape for t in tensors]) from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _result(out, tensors, lambda g: tuple(np.split(g, bounds, axis=axis)))


def split(x: Tensor, axis: int, parts) -> list[Tensor]:
    """Split along ``axis`` into ``parts`` equal pieces or pieces of the listed sizes."""
    n = x.shape[axis]
    if isinstance(parts, int):
        if parts <= 0 or n % parts:
            raise ShapeError("split", x.shape, (parts,))
        sizes = [n // parts] * parts
    else:
        sizes = list(parts)
        if sum(sizes) != n:
            raise ShapeError("split", x.shape, tuple(sizes))
    out = []
    start = 0
    for size in sizes:
        sl = [slice(None)] * x.ndim
        sl[axis] = slice(start, start + size)
        sl = tuple(sl)

        def back(g, sl=sl):
            full = np.zeros_like(x.data)
            full[sl] = g
            return (full,)
        out.append(_result(x.data[sl], (x,), back))
        start += size
    return out


# --------------------------------------------------------------------------
# reductions


def _keep(g, x, axis, keepdims):
    if axis is None or keepdims:
        return g
    return np.expand_dims(g, axis)


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = np.sum(x.data, axis=axis, keepdims=keepdims)
    return _result(out, (x,), lambda g: (np.broadcast_to(_keep(g, x, axis, keepdims), x.shape).copy(),))


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = np.mean(x.data, axis=axis, keepdims=keepdims)
    n = x.size // max(out.size, 1)
    return _result(out, (x,),
                   lambda g: (np.broadcast_to(_keep(g, x, axis, keepdims), x.shape) / n,))


def tmax(x: Tensor, axis: int) -> Tensor:
    """Maximum along one axis; the gradient goes to the first maximiser."""
    idx = np.argmax(x.data, axis=axis)
    out = np.take_along_axis(x.data, np.expand_dims(idx, axis), axis=axis).squeeze(axis)

    def back(g):
        full = np.zeros_like(x.data)
        np.put_along_axis(full, np.expand_dims(idx, axis), np.expand_dims(g, axis), axis=axis)
        return (full,)
    return _result(out, (x,), back)


# --------------------------------------------------------------------------
# linear algebra and network ops


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", a.shape, b.shape)
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise ShapeError("matmul", a.shape, b.shape) from None

    def back(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2)) if a.requires_grad else None
        if not b.requires_grad:
            gb = None
        elif b.ndim == 2:
            # fold batch dims into one GEMM
            gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return (None if ga is None else _unbroadcast(ga, a.shape), gb)
    return _result(out, (a, b), back)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight (+ bias)`` applied over the last axis."""
    y = matmul(x, weight)
    return y if bias is None else add(y, bias)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - np.max(x.data, axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / np.sum(e, axis=axis, keepdims=True)
    return _result(y, (x,), lambda g: (y * (g - np.sum(g * y, axis=axis, keepdims=True)),))


def layer_norm(x: Tensor, axis: int = -1, eps: float = 1e-5) -> Tensor:
    """Normalise to zero mean and unit variance along ``axis`` (no affine)."""
    if eps <= 0:
        raise ValueError("layer_norm eps must be positive")
    mu = np.mean(x.data, axis=axis, keepdims=True)
    xc = x.data - mu
    var = np.mean(xc * xc, axis=axis, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    n = x.shape[axis]

    def back(g):
        gs = np.sum(g, axis=axis, keepdims=True)
        gx = np.sum(g * xhat, axis=axis, keepdims=True)
        return ((inv / n) * (n * g - gs - xhat * gx),)
    return _result(xhat.astype(x.data.dtype), (x,), back)


def l2_normalize(x: Tensor, axis: int = -1, eps: float = 1e-10) -> Tensor:
    if eps <= 0:
        raise ValueError("l2_normalize eps must be positive")
    norm = np.sqrt(np.sum(x.data * x.data, axis=axis, keepdims=True))
    big = norm > eps
    denom = np.where(big, norm, eps)
    y = x.data / denom

    def back(g):
        proj = np.sum(g * y, axis=axis, keepdims=True)
        return (np.where(big, (g - y * proj) / denom, g / eps),)
    return _result(y, (x,), back)


def conv2d_valid(x: Tensor, weight: Tensor, stride=(1, 1)) -> Tensor:
    """Cross-correlation without padding.

    ``x`` is (N, C, H, W), ``weight`` is (O, C, kh, kw); output is
    (N, O, (H - kh) // sh + 1, (W - kw) // sw + 1).
    """
    if x.ndim != 4 or weight.ndim != 4 or x.shape[1] != weight.shape[1]:
        raise ShapeError("conv2d_valid", x.shape, weight.shape)
    N, C, H, W = x.shape
    O, _, kh, kw = weight.shape
    sh, sw = stride
    if kh > H or kw > W:
        raise ShapeError("conv2d_valid", x.shape, weight.shape)
    Ho, Wo = (H - kh) // sh + 1, (W - kw) // sw + 1
    xl = np.moveaxis(x.data, 1, -1)  # N, H, W, C

    def window(i, j):
        return xl[:, i:i + sh * (Ho - 1) + 1:sh, j:j + sw * (Wo - 1) + 1:sw, :]

    # im2col with kernel taps stacked along the contraction axis
    cols = np.concatenate([window(i, j) for i in range(kh) for j in range(kw)], axis=-1)
    wmat = np.transpose(weight.data, (2, 3, 1, 0)).reshape(kh * kw * C, O)
    out = np.moveaxis(cols @ wmat, -1, 1)

    def back(g):
        gl = np.moveaxis(g, 1, -1)  # N, Ho, Wo, O
        gw = None
        if weight.requires_grad:
            gwm = cols.reshape(-1, kh * kw * C).T @ gl.reshape(-1, O)
            gw = np.transpose(gwm.reshape(kh, kw, C, O), (3, 2, 0, 1))
        gx = None
        if x.requires_grad:
            gcols = gl @ wmat.T
            gxl = np.zeros_like(xl)
            k = 0
            for i in range(kh):
                for j in range(kw):
                    gxl[:, i:i + sh * (Ho - 1) + 1:sh, j:j + sw * (Wo - 1) + 1:sw, :] += gcols[..., k * C:(k + 1) * C]
                    k += 1
            gx = np.moveaxis(gxl, -1, 1)
        return (gx, gw)
    return _result(np.ascontiguousarray(out), (x, weight), back)


# --------------------------------------------------------------------------
# backward pass


def _topo_order(root: Tensor) -> list[Tensor]:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every leaf on the graph."""
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise RuntimeError("backward called on a tensor that is not connected to any parameter")
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topo_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


# --------------------------------------------------------------------------
# checkpoint file


def save_tensors(path, tensors: Mapping[str, np.ndarray | Tensor]) -> None:
    """Write named arrays as float32 in the LPRW container."""
    with open(path, "wb") as f:
        f.write(WEIGHTS_MAGIC)
        f.write(struct.pack("<I", len(tensors)))
        for name, t in tensors.items():
            arr = t.data if isinstance(t, Tensor) else np.asarray(t)
            raw = name.encode("utf-8")
            f.write(struct.pack("<I", len(raw)))
            f.write(raw)
            f.write(struct.pack("<I", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_tensors(path) -> dict[str, np.ndarray]:
    raw = Path(path).read_bytes()
    if raw[:4] != WEIGHTS_MAGIC:
        raise ValueError(f"{path}: not a weights file (bad magic)")
    (count,) = struct.unpack_from("<I", raw, 4)
    pos = 8
    out = {}
    for _ in range(count):
        (n,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        name = raw[pos:pos + n].decode("utf-8")
        pos += n
        (rank,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        dims = struct.unpack_from(f"<{rank}I", raw, pos)
        pos += 4 * rank
        size = int(np.prod(dims)) if rank else 1
        out[name] = np.frombuffer(raw, dtype="<f4", count=size, offset=pos).reshape(dims).astype(np.float32)
        pos += 4 * size
    if pos != len(raw):
        raise ValueError(f"{path}: trailing bytes after {count} tensors")
    return out


def parameters(tensors: Iterable[Tensor]) -> list[Tensor]:
    return [t for t in tensors if t.requires_grad]
