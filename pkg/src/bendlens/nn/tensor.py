"""Reverse-mode autodiff on numpy arrays.

Everything is float64. A Tensor wraps an ndarray and remembers how it was
produced; backward() walks the graph in reverse topological order and
accumulates gradients into every node that requires them.
"""

from __future__ import annotations

import numpy as np


class GraphError(ValueError):
    pass


def _as_array(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a gradient down to the shape it was broadcast from."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str = ""):
        self.data = _as_array(data)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple = ()
        self._backward = None
        self.name = name

    # ---- construction helpers -------------------------------------------

    @staticmethod
    def _from_op(data, parents, backward) -> "Tensor":
        out = Tensor(data)
        if any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        return out

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # ---- backward pass ---------------------------------------------------

    def backward(self):
        if self.data.size != 1:
            raise GraphError(
                f"backward() needs a scalar loss, got shape {self.data.shape}"
            )
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))

        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(topo):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is not None:
                for parent, pg in node._backward(g):
                    if not parent.requires_grad:
                        continue
                    acc = grads.get(id(parent))
                    grads[id(parent)] = pg if acc is None else acc + pg
            else:
                node.grad = g if node.grad is None else node.grad + g

    # ---- arithmetic ------------------------------------------------------

    @staticmethod
    def _lift(x) -> "Tensor":
        return x if isinstance(x, Tensor) else Tensor(x)

    def __add__(self, other):
        other = Tensor._lift(other)
        return Tensor._from_op(
            self.data + other.data,
            (self, other),
            lambda g: (
                (self, _unbroadcast(g, self.data.shape)),
                (other, _unbroadcast(g, other.data.shape)),
            ),
        )

    __radd__ = __add__

    def __neg__(self):
        return Tensor._from_op(-self.data, (self,), lambda g: ((self, -g),))

    def __sub__(self, other):
        return self + (-Tensor._lift(other))

    def __rsub__(self, other):
        return Tensor._lift(other) + (-self)

    def __mul__(self, other):
        other = Tensor._lift(other)
        return Tensor._from_op(
            self.data * other.data,
            (self, other),
            lambda g: (
                (self, _unbroadcast(g * other.data, self.data.shape)),
                (other, _unbroadcast(g * self.data, other.data.shape)),
            ),
        )

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = Tensor._lift(other)
        return Tensor._from_op(
            self.data / other.data,
            (self, other),
            lambda g: (
                (self, _unbroadcast(g / other.data, self.data.shape)),
                (
                    other,
                    _unbroadcast(
                        -g * self.data / (other.data * other.data), other.data.shape
                    ),
                ),
            ),
        )

    def __rtruediv__(self, other):
        return Tensor._lift(other) / self

    def __pow__(self, exponent: float):
        e = float(exponent)
        return Tensor._from_op(
            self.data**e,
            (self,),
            lambda g: ((self, g * e * self.data ** (e - 1.0)),),
        )

    def __matmul__(self, other):
        other = Tensor._lift(other)
        return Tensor._from_op(
            self.data @ other.data,
            (self, other),
            lambda g: (
                (self, g @ other.data.T),
                (other, self.data.T @ g),
            ),
        )

    # ---- reductions ------------------------------------------------------

    def sum(self, axis=None, keepdims=False):
        data = self.data.sum(axis=axis, keepdims=keepdims)

        def backward(g):
            if axis is None:
                gx = np.broadcast_to(g, self.data.shape)
            else:
                if not keepdims:
                    g = np.expand_dims(g, axis)
                gx = np.broadcast_to(g, self.data.shape)
            return ((self, np.ascontiguousarray(gx)),)

        return Tensor._from_op(data, (self,), backward)

    def mean(self, axis=None, keepdims=False):
        n = self.data.size if axis is None else np.prod(
            [self.data.shape[a] for a in np.atleast_1d(axis)]
        )
        return self.sum(axis=axis, keepdims=keepdims) / float(n)

    def max(self, axis: int):
        """Max along one axis; gradient flows to the first argmax."""
        idx = self.data.argmax(axis=axis)
        data = np.take_along_axis(self.data, np.expand_dims(idx, axis), axis=axis)
        data = np.squeeze(data, axis=axis)

        def backward(g):
            gx = np.zeros_like(self.data)
            np.put_along_axis(
                gx, np.expand_dims(idx, axis), np.expand_dims(g, axis), axis=axis
            )
            return ((self, gx),)

        return Tensor._from_op(data, (self,), backward)

    # ---- shape ops -------------------------------------------------------

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        old = self.data.shape
        return Tensor._from_op(
            self.data.reshape(shape),
            (self,),
            lambda g: ((self, g.reshape(old)),),
        )

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        inv = np.argsort(axes)
        return Tensor._from_op(
            self.data.transpose(axes),
            (self,),
            lambda g: ((self, g.transpose(inv)),),
        )

    @property
    def T(self):
        return self.transpose(tuple(range(self.data.ndim))[::-1])

    def flip(self, axes):
        axes = tuple(np.atleast_1d(axes))
        return Tensor._from_op(
            np.flip(self.data, axes),
            (self,),
            lambda g: ((self, np.flip(g, axes)),),
        )

    def __getitem__(self, key):
        def backward(g):
            gx = np.zeros_like(self.data)
            np.add.at(gx, key, g)
            return ((self, gx),)

        return Tensor._from_op(self.data[key], (self,), backward)

    @staticmethod
    def concat(tensors, axis: int = 0):
        tensors = [Tensor._lift(t) for t in tensors]
        sizes = [t.data.shape[axis] for t in tensors]
        offsets = np.cumsum([0] + sizes)

        def backward(g):
            out = []
            for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                out.append((t, np.ascontiguousarray(g[tuple(sl)])))
            return tuple(out)

        return Tensor._from_op(
            np.concatenate([t.data for t in tensors], axis=axis), tensors, backward
        )

    # ---- elementwise nonlinearities -------------------------------------

    def exp(self):
        data = np.exp(self.data)
        return Tensor._from_op(data, (self,), lambda g: ((self, g * data),))

    def log(self):
        return Tensor._from_op(
            np.log(self.data), (self,), lambda g: ((self, g / self.data),)
        )

    def sqrt(self):
        data = np.sqrt(self.data)
        return Tensor._from_op(data, (self,), lambda g: ((self, g * 0.5 / data),))

    def relu(self):
        mask = self.data > 0.0
        return Tensor._from_op(
            self.data * mask, (self,), lambda g: ((self, g * mask),)
        )

    def sigmoid(self):
        data = 1.0 / (1.0 + np.exp(-self.data))
        return Tensor._from_op(
            data, (self,), lambda g: ((self, g * data * (1.0 - data)),)
        )

    def clip(self, lo: float, hi: float):
        """Clamp values; gradient passes through only inside the bounds."""
        mask = (self.data > lo) & (self.data < hi)
        return Tensor._from_op(
            np.clip(self.data, lo, hi), (self,), lambda g: ((self, g * mask),)
        )

    # ---- spatial ops (NCHW) ---------------------------------------------

    def pad2d(self, top: int, bottom: int, left: int, right: int):
        pads = ((0, 0), (0, 0), (top, bottom), (left, right))
        h, w = self.data.shape[2], self.data.shape[3]

        def backward(g):
            return ((self, g[:, :, top : top + h, left : left + w].copy()),)

        return Tensor._from_op(np.pad(self.data, pads), (self,), backward)

    def dilate2d(self, stride: int):
        """Insert stride-1 zeros between spatial elements (for transposed conv)."""
        if stride == 1:
            return self
        b, c, h, w = self.data.shape
        data = np.zeros((b, c, (h - 1) * stride + 1, (w - 1) * stride + 1))
        data[:, :, ::stride, ::stride] = self.data
        return Tensor._from_op(
            data, (self,), lambda g: ((self, g[:, :, ::stride, ::stride].copy()),)
        )

    def upsample_nearest2d(self, factor: int):
        b, c, h, w = self.data.shape
        data = self.data.repeat(factor, axis=2).repeat(factor, axis=3)

        def backward(g):
            g = g.reshape(b, c, h, factor, w, factor)
            return ((self, g.sum(axis=(3, 5))),)

        return Tensor._from_op(data, (self,), backward)

    def conv2d(self, weight: "Tensor", bias: "Tensor | None", stride: int, padding: int):
        """2D cross-correlation. input (B,C,H,W), weight (OC,C,kh,kw)."""
        x = self
        if padding:
            x = x.pad2d(padding, padding, padding, padding)
        b, c, h, w = x.data.shape
        oc, wc, kh, kw = weight.data.shape
        if wc != c:
            raise GraphError(f"conv2d channel mismatch: input {c}, weight {wc}")
        oh = (h - kh) // stride + 1
        ow = (w - kw) // stride + 1
        if oh <= 0 or ow <= 0:
            raise GraphError(
                f"conv2d output would be empty for input {x.data.shape} "
                f"and kernel {(kh, kw)} stride {stride}"
            )
        windows = np.lib.stride_tricks.sliding_window_view(x.data, (kh, kw), (2, 3))
        windows = windows[:, :, ::stride, ::stride]  # (B,C,OH,OW,kh,kw)
        cols = windows.transpose(0, 2, 3, 1, 4, 5).reshape(b * oh * ow, c * kh * kw)
        wmat = weight.data.reshape(oc, c * kh * kw)
        out = (cols @ wmat.T).reshape(b, oh, ow, oc).transpose(0, 3, 1, 2)
        if bias is not None:
            out = out + bias.data.reshape(1, oc, 1, 1)

        parents = (x, weight) if bias is None else (x, weight, bias)

        def backward(g):
            gmat = g.transpose(0, 2, 3, 1).reshape(b * oh * ow, oc)
            gw = (gmat.T @ cols).reshape(weight.data.shape)
            gcols = (gmat @ wmat).reshape(b, oh, ow, c, kh, kw)
            gx = np.zeros((b, c, h, w))
            for i in range(kh):
                for j in range(kw):
                    gx[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride] += (
                        gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
                    )
            grads = [(x, gx), (weight, gw)]
            if bias is not None:
                grads.append((bias, g.sum(axis=(0, 2, 3))))
            return tuple(grads)

        return Tensor._from_op(out, parents, backward)

    def maxpool2d(self, window: int):
        b, c, h, w = self.data.shape
        if h % window or w % window:
            raise GraphError(
                f"maxpool2d window {window} does not divide spatial size {(h, w)}"
            )
        oh, ow = h // window, w // window
        patches = self.data.reshape(b, c, oh, window, ow, window)
        patches = patches.transpose(0, 1, 2, 4, 3, 5).reshape(b, c, oh, ow, window * window)
        idx = patches.argmax(axis=-1)
        out = np.take_along_axis(patches, idx[..., None], axis=-1)[..., 0]

        def backward(g):
            gp = np.zeros((b, c, oh, ow, window * window))
            np.put_along_axis(gp, idx[..., None], g[..., None], axis=-1)
            gp = gp.reshape(b, c, oh, ow, window, window).transpose(0, 1, 2, 4, 3, 5)
            return ((self, gp.reshape(b, c, h, w)),)

        return Tensor._from_op(out, (self,), backward)


def softmax(logits: Tensor, axis: int = -1) -> Tensor:
    shifted = logits - Tensor(logits.data.max(axis=axis, keepdims=True))
    e = shifted.exp()
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(logits: Tensor, axis: int = -1) -> Tensor:
    shifted = logits - Tensor(logits.data.max(axis=axis, keepdims=True))
    return shifted - shifted.exp().sum(axis=axis, keepdims=True).log()
