"""Dense float32 tensors with reverse-mode automatic differentiation.

The op set is deliberately small: exactly what a small residual CNN with a
linear head needs (conv2d, relu, global average pooling, linear, same-shape
add/mul, scalar scaling, sum). No broadcasting beyond these signatures.
Gradients accumulate additively into ``.grad`` until cleared.
"""

from __future__ import annotations

import contextlib

import numpy as np

from . import kernels

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block (pure forward evaluation)."""
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


def grad_enabled():
    return _grad_enabled


class Tensor:
    """A C-contiguous float32 array plus an optional gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad", "_prev", "_backward")

    def __init__(self, data, requires_grad=False):
        self.data = np.ascontiguousarray(data, dtype=np.float32)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._prev = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data.reshape(-1)[0])

    def detach(self):
        """A leaf view of the same data, cut out of the graph."""
        out = Tensor.__new__(Tensor)
        out.data = self.data
        out.grad = None
        out.requires_grad = False
        out._prev = ()
        out._backward = None
        return out

    def zero_grad(self):
        self.grad = None

    def _accumulate(self, g, own=False):
        """Add into the grad buffer; own=True donates a freshly allocated g."""
        if self.grad is None:
            self.grad = g if own and g.dtype == np.float32 else g.astype(np.float32)
        else:
            self.grad += g

    def backward(self):
        """Reverse-mode sweep from a scalar loss; populates ``.grad`` on the graph."""
        if self.size != 1:
            raise ValueError(
                f"backward() requires a scalar loss, got shape {tuple(self.shape)}"
            )
        topo = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._prev:
                if id(parent) not in visited:
                    stack.append((parent, False))
        self._accumulate(np.ones_like(self.data))
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    def __add__(self, other):
        if not isinstance(other, Tensor):
            return NotImplemented
        if self.shape != other.shape:
            raise ValueError(f"add: shape mismatch {self.shape} vs {other.shape}")
        out = _node(self.data + other.data, (self, other))
        if out._prev:

            def backward(g):
                if _wants_grad(self):
                    self._accumulate(g)
                if _wants_grad(other):
                    other._accumulate(g)

            out._backward = backward
        return out

    def __mul__(self, other):
        if isinstance(other, Tensor):
            if self.shape != other.shape:
                raise ValueError(f"mul: shape mismatch {self.shape} vs {other.shape}")
            out = _node(self.data * other.data, (self, other))
            if out._prev:
                a_data, b_data = self.data, other.data

                def backward(g):
                    if _wants_grad(self):
                        self._accumulate(g * b_data)
                    if _wants_grad(other):
                        other._accumulate(g * a_data)

                out._backward = backward
            return out
        scale = float(other)
        out = _node(self.data * scale, (self,))
        if out._prev:

            def backward(g):
                self._accumulate(g * scale)

            out._backward = backward
        return out

    __rmul__ = __mul__

    def sum(self):
        """Scalar sum of all elements."""
        out = _node(np.asarray(self.data.sum(), dtype=np.float32), (self,))
        if out._prev:
            shape = self.data.shape

            def backward(g):
                self._accumulate(np.full(shape, g.reshape(-1)[0], dtype=np.float32))

            out._backward = backward
        return out

    def __repr__(self):
        return f"Tensor(shape={tuple(self.shape)}, requires_grad={self.requires_grad})"


def _wants_grad(t):
    return t.requires_grad or bool(t._prev)


def _node(data, parents):
    """Wrap an op result; tracks parents only while grads are enabled."""
    out = Tensor(data)
    tracked = tuple(p for p in parents if _wants_grad(p)) if _grad_enabled else ()
    if tracked:
        out._prev = tracked
    return out


def relu(x: Tensor) -> Tensor:
    """Elementwise max(x, 0); gradient passes only where x > 0."""
    out = _node(np.maximum(x.data, 0.0), (x,))
    if out._prev:
        mask = x.data > 0

        def backward(g):
            x._accumulate(g * mask, own=True)

        out._backward = backward
    return out


# Per-chunk im2col buffer budget. Patch matrices for a whole batch can run to
# tens of MB, which falls off the cache cliff; processing a fixed number of
# images at a time keeps the working set small. The chunk size depends only on
# tensor shapes, so results stay deterministic everywhere.
_CONV_CHUNK_BYTES = 2_000_000


def _conv_chunks(n, per_image_bytes):
    step = max(1, _CONV_CHUNK_BYTES // max(per_image_bytes, 1))
    return [(s, min(s + step, n)) for s in range(0, n, step)]


def conv2d(x: Tensor, weight: Tensor, bias: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D convolution (cross-correlation) with zero padding.

    x: (N, Cin, H, W), weight: (Cout, Cin, kh, kw), bias: (Cout,).
    Output spatial side: floor((H + 2·padding − kh) / stride) + 1.
    """
    if x.ndim != 4 or weight.ndim != 4 or bias.ndim != 1:
        raise ValueError(
            f"conv2d: expected 4-d input, 4-d weight, 1-d bias; got "
            f"{x.ndim}-d/{weight.ndim}-d/{bias.ndim}-d"
        )
    n, cin, h, w = x.shape
    cout, cin_w, kh, kw = weight.shape
    if cin != cin_w:
        raise ValueError(f"conv2d: input has {cin} channels but weight expects {cin_w}")
    if bias.shape[0] != cout:
        raise ValueError(f"conv2d: bias has {bias.shape[0]} entries for {cout} filters")
    if stride < 1:
        raise ValueError(f"conv2d: stride must be >= 1, got {stride}")
    if kh > h + 2 * padding or kw > w + 2 * padding:
        raise ValueError(
            f"conv2d: kernel {kh}x{kw} larger than padded input "
            f"{h + 2 * padding}x{w + 2 * padding}"
        )
    out_h = (h + 2 * padding - kh) // stride + 1
    out_w = (w + 2 * padding - kw) // stride + 1

    backend = kernels.active()
    x_data = x.data
    w2 = weight.data.reshape(cout, cin * kh * kw)
    patch = cin * kh * kw
    chunks = _conv_chunks(n, out_h * out_w * patch * 4)

    build_graph = _grad_enabled and any(_wants_grad(t) for t in (x, weight, bias))
    keep_cols = build_graph and _wants_grad(weight)
    cols_chunks = [] if keep_cols else None
    out_data = np.empty((n, cout, out_h, out_w), dtype=np.float32)
    for a, b in chunks:
        cols = backend.im2col(x_data[a:b], kh, kw, stride, padding, out_h, out_w)
        if keep_cols:
            cols_chunks.append(cols)
        out_mat = cols @ w2.T
        out_mat += bias.data
        out_data[a:b] = out_mat.reshape(b - a, out_h, out_w, cout).transpose(0, 3, 1, 2)

    out = _node(out_data, (x, weight, bias))
    if out._prev:

        def backward(g):
            need_b, need_w, need_x = _wants_grad(bias), _wants_grad(weight), _wants_grad(x)
            if need_b:
                bias._accumulate(g.sum(axis=(0, 2, 3)), own=True)
            dw = np.zeros((cout, patch), dtype=np.float32) if need_w else None
            dx = np.empty((n, cin, h, w), dtype=np.float32) if need_x else None
            for i, (a, b) in enumerate(chunks):
                if not (need_w or need_x):
                    break
                gmat = np.ascontiguousarray(g[a:b].transpose(0, 2, 3, 1)).reshape(-1, cout)
                if need_w:
                    dw += gmat.T @ cols_chunks[i]
                if need_x:
                    dx[a:b] = backend.col2im(
                        gmat @ w2, b - a, cin, h, w, kh, kw, stride, padding, out_h, out_w
                    )
            if need_w:
                weight._accumulate(dw.reshape(cout, cin, kh, kw), own=True)
            if need_x:
                x._accumulate(dx, own=True)

        out._backward = backward
    return out


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Affine map x @ weight.T + bias for x: (N, C), weight: (K, C), bias: (K,)."""
    if x.ndim != 2 or weight.ndim != 2 or bias.ndim != 1:
        raise ValueError(
            f"linear: expected 2-d input, 2-d weight, 1-d bias; got "
            f"{x.ndim}-d/{weight.ndim}-d/{bias.ndim}-d"
        )
    if x.shape[1] != weight.shape[1]:
        raise ValueError(
            f"linear: input width {x.shape[1]} != weight width {weight.shape[1]}"
        )
    if bias.shape[0] != weight.shape[0]:
        raise ValueError(
            f"linear: bias has {bias.shape[0]} entries for {weight.shape[0]} outputs"
        )
    out = _node(x.data @ weight.data.T + bias.data, (x, weight, bias))
    if out._prev:

        def backward(g):
            if _wants_grad(bias):
                bias._accumulate(g.sum(axis=0), own=True)
            if _wants_grad(weight):
                weight._accumulate(g.T @ x.data, own=True)
            if _wants_grad(x):
                x._accumulate(g @ weight.data, own=True)

        out._backward = backward
    return out


def global_average_pool(x: Tensor) -> Tensor:
    """Mean over the spatial grid: (N, C, H, W) -> (N, C)."""
    if x.ndim != 4:
        raise ValueError(f"global_average_pool: expected 4-d input, got {x.ndim}-d")
    n, c, h, w = x.shape
    out = _node(x.data.mean(axis=(2, 3)), (x,))
    if out._prev:
        inv_area = 1.0 / (h * w)

        def backward(g):
            x._accumulate(
                np.broadcast_to(g[:, :, None, None] * inv_area, (n, c, h, w)).astype(
                    np.float32
                ),
                own=True,
            )

        out._backward = backward
    return out


class SGD:
    """Stochastic gradient descent with classical momentum and L2 weight decay.

    Per step: v <- momentum·v + (grad + weight_decay·param);
    param <- param − lr·v; gradients are cleared afterwards.
    Velocity buffers start at zero and persist across steps.
    """

    def __init__(self, params, lr, momentum=0.9, weight_decay=1e-4):
        if lr <= 0:
            raise ValueError(f"lr must be positive, got {lr}")
        if not 0.0 <= momentum < 1.0:
            raise ValueError(f"momentum must be in [0, 1), got {momentum}")
        if weight_decay < 0:
            raise ValueError(f"weight_decay must be nonnegative, got {weight_decay}")
        if isinstance(params, dict):
            self._names = list(params)
            self.params = list(params.values())
        else:
            self.params = list(params)
            self._names = [f"param{i}" for i in range(len(self.params))]
        self.lr = float(lr)
        self.momentum = float(momentum)
        self.weight_decay = float(weight_decay)
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    def step(self):
        for name, p, v in zip(self._names, self.params, self.velocity):
            if p.grad is None:
                raise ValueError(f"sgd step: missing gradient for parameter {name!r}")
            g = p.grad
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            v *= self.momentum
            v += g
            p.data -= self.lr * v
            p.grad = None

    def zero_grad(self):
        for p in self.params:
            p.grad = None
