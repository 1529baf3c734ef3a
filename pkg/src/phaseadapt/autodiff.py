"""Reverse-mode automatic differentiation over a fixed catalog of dense tensor ops.

A :class:`Graph` is a tape of nodes. Nodes are appended in creation order,
which is therefore always a valid topological order. Values are computed
eagerly when all inputs are bound; graphs stay re-runnable: rebinding the
input leaves via :meth:`Graph.forward` recomputes every interior node, so one
graph can drive an entire training loop without rebuild overhead.

Layout conventions: feature-map tensors are NCHW, conv weights are
(C_out, C_in, kh, kw), transposed-conv weights are (C_in, C_out, kh, kw).
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class GraphError(RuntimeError):
    """Structural misuse of a graph (unbound leaf, backward before forward...)."""


class ShapeError(GraphError):
    """Operand shapes do not satisfy an op's signature."""


DTYPES = {"f32": np.float32, "f64": np.float64}

LOG_FLOOR = 1e-30  # clamp for log(); keeps saturated losses finite


def _dtype_of(*arrays):
    return np.float64 if any(a.dtype == np.float64 for a in arrays) else np.float32


class Node:
    __slots__ = ("graph", "idx", "op", "inputs", "attrs", "value", "grad",
                 "requires_grad", "name", "cache", "_fwd", "_bwd")

    def __init__(self, graph, idx, op, inputs, attrs, fwd, bwd, name=None):
        self.graph = graph
        self.idx = idx
        self.op = op
        self.inputs = inputs
        self.attrs = attrs
        self.name = name
        self.value = None
        self.grad = None
        self.cache = {}
        self._fwd = fwd
        self._bwd = bwd
        self.requires_grad = any(i.requires_grad for i in inputs)

    @property
    def shape(self):
        return None if self.value is None else self.value.shape

    def add_grad(self, g):
        if self.grad is None:
            # copy: g may be a view into another node's gradient buffer
            self.grad = np.array(np.broadcast_to(g, self.value.shape), dtype=self.value.dtype)
        else:
            self.grad += g

    def __repr__(self):
        return f"Node({self.idx}:{self.op}{'' if self.name is None else ':' + self.name})"


class Graph:
    """Tape of tensor ops supporting repeated forward/backward passes."""

    def __init__(self, check_finite=False):
        self.nodes: list[Node] = []
        self.params: dict[str, Node] = {}
        self.leaves: dict[str, Node] = {}
        self.check_finite = check_finite

    # -- construction -----------------------------------------------------

    def _add(self, op, inputs, attrs, fwd, bwd, name=None) -> Node:
        for i in inputs:
            if i.graph is not self:
                raise GraphError(f"node {i!r} belongs to a different graph")
        node = Node(self, len(self.nodes), op, inputs, attrs, fwd, bwd, name)
        self.nodes.append(node)
        if fwd is not None and all(i.value is not None for i in inputs):
            self._eval(node)
        return node

    def _eval(self, node):
        try:
            node.value = node._fwd(node)
        except ShapeError as e:
            raise ShapeError(f"node {node.idx} ({node.op}): {e}") from None
        if self.check_finite:
            self._assert_finite(node)

    def leaf(self, name, value=None, shape=None, dtype=np.float32) -> Node:
        """Unparameterized input; rebind through :meth:`forward`."""
        if name in self.leaves:
            raise GraphError(f"duplicate leaf name {name!r}")
        node = self._add("leaf", [], {"shape": shape, "dtype": dtype}, None, None, name)
        if value is not None:
            node.value = np.asarray(value)
        self.leaves[name] = node
        return node

    def param(self, name, value, trainable=True) -> Node:
        """Named parameter. Re-registering a name returns the existing node,
        so weight sharing inside one graph accumulates gradients correctly."""
        if name in self.params:
            node = self.params[name]
            if node.value is not value:
                raise GraphError(f"parameter {name!r} rebound to a different array")
            return node
        node = self._add("param", [], {}, None, None, name)
        node.value = value
        node.requires_grad = trainable
        self.params[name] = node
        return node

    def const(self, value) -> Node:
        node = self._add("const", [], {}, None, None)
        node.value = np.asarray(value)
        return node

    # -- execution --------------------------------------------------------

    def forward(self, bindings=None):
        """Bind leaves and recompute every interior node in tape order."""
        bindings = bindings or {}
        for name, value in bindings.items():
            if name not in self.leaves:
                raise GraphError(f"no leaf named {name!r}; have {sorted(self.leaves)}")
            self.leaves[name].value = np.asarray(value)
        for name, node in self.leaves.items():
            if node.value is None:
                raise GraphError(f"unbound leaf {name!r}")
        for node in self.nodes:
            if node._fwd is not None:
                self._eval(node)

    def zero_grad(self):
        for node in self.nodes:
            node.grad = None

    def backward(self, loss: Node) -> dict[str, np.ndarray]:
        """Reverse sweep from ``loss``; returns trainable-parameter gradients."""
        if loss.graph is not self:
            raise GraphError("loss node belongs to a different graph")
        if loss.value is None:
            raise GraphError("backward before forward: loss has no value")
        if loss.value.ndim != 0 and loss.value.size != 1:
            raise GraphError(f"loss must be scalar, got shape {loss.value.shape}")
        self.zero_grad()
        loss.grad = np.ones_like(loss.value)
        for node in reversed(self.nodes[: loss.idx + 1]):
            if node.grad is None or node._bwd is None or not node.requires_grad:
                continue
            node._bwd(node)
        return {name: p.grad if p.grad is not None else np.zeros_like(p.value)
                for name, p in self.params.items() if p.requires_grad}

    def _assert_finite(self, node):
        if not np.all(np.isfinite(node.value)):
            raise GraphError(f"non-finite value produced by {node!r}")


# -- broadcasting helpers -------------------------------------------------

def _unbroadcast(g, shape):
    """Sum ``g`` down to ``shape`` (adjoint of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.astype(g.dtype, copy=False)


# -- elementwise / reduction ops ------------------------------------------

def add(a: Node, b: Node) -> Node:
    def fwd(n):
        return n.inputs[0].value + n.inputs[1].value

    def bwd(n):
        x, y = n.inputs
        if x.requires_grad:
            x.add_grad(_unbroadcast(n.grad, x.value.shape))
        if y.requires_grad:
            y.add_grad(_unbroadcast(n.grad, y.value.shape))

    return a.graph._add("add", [a, b], {}, fwd, bwd)


def mul(a: Node, b: Node) -> Node:
    def fwd(n):
        return n.inputs[0].value * n.inputs[1].value

    def bwd(n):
        x, y = n.inputs
        if x.requires_grad:
            x.add_grad(_unbroadcast(n.grad * y.value, x.value.shape))
        if y.requires_grad:
            y.add_grad(_unbroadcast(n.grad * x.value, y.value.shape))

    return a.graph._add("mul", [a, b], {}, fwd, bwd)


def scale(a: Node, alpha: float) -> Node:
    def fwd(n):
        return n.inputs[0].value * n.attrs["alpha"]

    def bwd(n):
        x = n.inputs[0]
        if x.requires_grad:
            x.add_grad(n.grad * n.attrs["alpha"])

    return a.graph._add("scale", [a], {"alpha": float(alpha)}, fwd, bwd)


def neg(a: Node) -> Node:
    return scale(a, -1.0)


def sub(a: Node, b: Node) -> Node:
    return add(a, neg(b))


def matmul(a: Node, b: Node) -> Node:
    def fwd(n):
        x, y = n.inputs[0].value, n.inputs[1].value
        if x.ndim != 2 or y.ndim != 2 or x.shape[1] != y.shape[0]:
            raise ShapeError(f"node {n.idx} matmul: {x.shape} @ {y.shape}")
        return x @ y

    def bwd(n):
        x, y = n.inputs
        if x.requires_grad:
            x.add_grad(n.grad @ y.value.T)
        if y.requires_grad:
            y.add_grad(x.value.T @ n.grad)

    return a.graph._add("matmul", [a, b], {}, fwd, bwd)


def relu(a: Node) -> Node:
    def fwd(n):
        return np.maximum(n.inputs[0].value, 0)

    def bwd(n):
        x = n.inputs[0]
        if x.requires_grad:
            x.add_grad(n.grad * (x.value > 0))

    return a.graph._add("relu", [a], {}, fwd, bwd)


def leaky_relu(a: Node, slope=0.2) -> Node:
    def fwd(n):
        x = n.inputs[0].value
        return np.where(x > 0, x, n.attrs["slope"] * x).astype(x.dtype)

    def bwd(n):
        x = n.inputs[0]
        if x.requires_grad:
            x.add_grad(n.grad * np.where(x.value > 0, 1.0, n.attrs["slope"]).astype(x.value.dtype))

    return a.graph._add("leaky_relu", [a], {"slope": slope}, fwd, bwd)


def tanh(a: Node) -> Node:
    def fwd(n):
        return np.tanh(n.inputs[0].value)

    def bwd(n):
        x = n.inputs[0]
        if x.requires_grad:
            x.add_grad(n.grad * (1.0 - n.value * n.value))

    return a.graph._add("tanh", [a], {}, fwd, bwd)


def sigmoid(a: Node) -> Node:
    def fwd(n):
        x = n.inputs[0].value
        out = np.empty_like(x)
        pos = x >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
        ex = np.exp(x[~pos])
        out[~pos] = ex / (1.0 + ex)
        return out

    def bwd(n):
        x = n.inputs[0]
        if x.requires_grad:
            x.add_grad(n.grad * n.value * (1.0 - n.value))

    return a.graph._add("sigmoid", [a], {}, fwd, bwd)


def log(a: Node) -> Node:
    """Natural log with the input clamped at LOG_FLOOR (keeps losses finite)."""
    def fwd(n):
        return np.log(np.maximum(n.inputs[0].value, LOG_FLOOR))

    def bwd(n):
        x = n.inputs[0]
        if x.requires_grad:
            x.add_grad(n.grad / np.maximum(x.value, LOG_FLOOR))

    return a.graph._add("log", [a], {}, fwd, bwd)


def softmax_c(a: Node) -> Node:
    """Softmax over the channel axis (axis 1 of NCHW)."""
    def fwd(n):
        x = n.inputs[0].value
        z = x - x.max(axis=1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=1, keepdims=True)

    def bwd(n):
        x = n.inputs[0]
        if x.requires_grad:
            y = n.value
            dot = (n.grad * y).sum(axis=1, keepdims=True)
            x.add_grad((n.grad - dot) * y)

    return a.graph._add("softmax_c", [a], {}, fwd, bwd)


def sum_all(a: Node) -> Node:
    def fwd(n):
        return np.asarray(n.inputs[0].value.sum(), dtype=n.inputs[0].value.dtype)

    def bwd(n):
        x = n.inputs[0]
        if x.requires_grad:
            x.add_grad(np.broadcast_to(n.grad, x.value.shape).astype(x.value.dtype))

    return a.graph._add("sum", [a], {}, fwd, bwd)


def mean_all(a: Node) -> Node:
    def fwd(n):
        return np.asarray(n.inputs[0].value.mean(), dtype=n.inputs[0].value.dtype)

    def bwd(n):
        x = n.inputs[0]
        if x.requires_grad:
            x.add_grad(np.broadcast_to(n.grad / x.value.size, x.value.shape).astype(x.value.dtype))

    return a.graph._add("mean", [a], {}, fwd, bwd)


def concat_c(parts: list[Node]) -> Node:
    def fwd(n):
        vals = [i.value for i in n.inputs]
        base = vals[0].shape
        for v in vals[1:]:
            if v.ndim != 4 or v.shape[0] != base[0] or v.shape[2:] != base[2:]:
                raise ShapeError(f"node {n.idx} concat_c: incompatible {[x.shape for x in vals]}")
        return np.concatenate(vals, axis=1)

    def bwd(n):
        off = 0
        for x in n.inputs:
            c = x.value.shape[1]
            if x.requires_grad:
                x.add_grad(n.grad[:, off:off + c])
            off += c

    return parts[0].graph._add("concat_c", list(parts), {}, fwd, bwd)


# -- spatial ops ----------------------------------------------------------

def _pad2d(x, pad):
    """Zero-pad the two trailing axes (faster than np.pad for this case)."""
    if pad == 0:
        return x
    n, c, h, w = x.shape
    out = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=x.dtype)
    out[:, :, pad:pad + h, pad:pad + w] = x
    return out


def _im2col(x, kh, kw, stride, pad):
    """(N,C,H,W) -> columns (N, C*kh*kw, OH*OW); returns (cols, OH, OW)."""
    x = _pad2d(x, pad)
    n, c, h, w = x.shape
    oh = (h - kh) // stride + 1
    ow = (w - kw) // stride + 1
    v = sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    cols = v.transpose(0, 1, 4, 5, 2, 3).reshape(n, c * kh * kw, oh * ow)
    return cols, oh, ow


def _conv_forward(x, w, stride, pad):
    n = x.shape[0]
    co, ci, kh, kw = w.shape
    if x.shape[1] != ci:
        raise ShapeError(f"conv2d: input channels {x.shape[1]} != weight {ci}")
    if x.shape[2] + 2 * pad < kh or x.shape[3] + 2 * pad < kw:
        raise ShapeError(f"conv2d: spatial {x.shape[2:]} smaller than kernel {(kh, kw)}")
    cols, oh, ow = _im2col(x, kh, kw, stride, pad)
    out = np.matmul(w.reshape(co, ci * kh * kw), cols)  # (N, co, OH*OW) via broadcast
    return out.reshape(n, co, oh, ow), cols


def _dilate_pad(g, stride, pad_l, pad_r):
    """Insert stride-1 zeros between entries, then pad spatially."""
    n, c, h, w = g.shape
    hd = (h - 1) * stride + 1
    wd = (w - 1) * stride + 1
    if stride == 1 and not (pad_l or pad_r):
        return g
    out = np.zeros((n, c, hd + pad_l + pad_r, wd + pad_l + pad_r), dtype=g.dtype)
    out[:, :, pad_l:pad_l + hd:stride, pad_l:pad_l + wd:stride] = g
    return out


def conv2d(x: Node, w: Node, stride=1, pad=0) -> Node:
    def fwd(n):
        out, cols = _conv_forward(n.inputs[0].value, n.inputs[1].value,
                                  n.attrs["stride"], n.attrs["pad"])
        n.cache["cols"] = cols
        return out

    def bwd(n):
        x_, w_ = n.inputs
        s, p = n.attrs["stride"], n.attrs["pad"]
        g = n.grad
        co, ci, kh, kw = w_.value.shape
        if w_.requires_grad:
            cols = n.cache["cols"]
            gm = g.reshape(g.shape[0], co, -1)
            gw = np.matmul(gm, cols.transpose(0, 2, 1)).sum(axis=0)
            w_.add_grad(gw.reshape(co, ci, kh, kw))
        if x_.requires_grad:
            h_in = x_.value.shape[2]
            r = (h_in + 2 * p - kh) % s
            gp = _dilate_pad(g, s, kh - 1 - p, kh - 1 - p + r)
            wf = w_.value[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)  # (ci, co, kh, kw)
            gx, _ = _conv_forward(gp, wf, 1, 0)
            x_.add_grad(gx)
        n.cache.clear()

    return x.graph._add("conv2d", [x, w], {"stride": stride, "pad": pad}, fwd, bwd)


def conv2d_transpose(x: Node, w: Node, stride=1, pad=0) -> Node:
    """Adjoint of conv2d. Weight (C_in, C_out, kh, kw); out = (H-1)*s + k - 2p."""
    def fwd(n):
        xv, wv = n.inputs[0].value, n.inputs[1].value
        ci, co, kh, kw = wv.shape
        if xv.shape[1] != ci:
            raise ShapeError(f"conv2d_transpose: input channels {xv.shape[1]} != weight {ci}")
        s, p = n.attrs["stride"], n.attrs["pad"]
        xp = _dilate_pad(xv, s, kh - 1 - p, kh - 1 - p)
        wf = wv[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)  # (co, ci, kh, kw)
        out, _ = _conv_forward(xp, wf, 1, 0)
        return out

    def bwd(n):
        # tconv(., w) is the adjoint of conv2d(., w) with w read as an
        # (out=C_in, in=C_out) conv weight, so grad_x is that plain conv and
        # grad_w is the conv weight-gradient with input/cotangent roles swapped.
        x_, w_ = n.inputs
        s, p = n.attrs["stride"], n.attrs["pad"]
        g = n.grad
        ci, co, kh, kw = w_.value.shape
        if x_.requires_grad:
            gx, _ = _conv_forward(g, w_.value, s, p)
            x_.add_grad(gx)
        if w_.requires_grad:
            cols, oh, ow = _im2col(g, kh, kw, s, p)       # (N, co*kh*kw, H*W)
            xm = x_.value.reshape(x_.value.shape[0], ci, -1)
            gw = np.matmul(xm, cols.transpose(0, 2, 1)).sum(axis=0)  # (ci, co*kh*kw)
            w_.add_grad(gw.reshape(ci, co, kh, kw))

    return x.graph._add("conv2d_transpose", [x, w], {"stride": stride, "pad": pad}, fwd, bwd)


def max_pool2(a: Node) -> Node:
    """Non-overlapping 2x2 max pooling."""
    def fwd(n):
        x = n.inputs[0].value
        nb, c, h, w = x.shape
        if h % 2 or w % 2:
            raise ShapeError(f"node {n.idx} max_pool2: odd spatial extents {(h, w)}")
        xr = x.reshape(nb, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(nb, c, h // 2, w // 2, 4)
        idx = xr.argmax(axis=-1)
        n.cache["idx"] = idx
        return np.take_along_axis(xr, idx[..., None], axis=-1)[..., 0]

    def bwd(n):
        x = n.inputs[0]
        if not x.requires_grad:
            return
        nb, c, h, w = x.value.shape
        flat = np.zeros((nb, c, h // 2, w // 2, 4), dtype=n.grad.dtype)
        np.put_along_axis(flat, n.cache["idx"][..., None], n.grad[..., None], axis=-1)
        gx = flat.reshape(nb, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(nb, c, h, w)
        x.add_grad(gx)

    return a.graph._add("max_pool2", [a], {}, fwd, bwd)


def upsample2(a: Node) -> Node:
    """Nearest-neighbor x2 upsampling."""
    def fwd(n):
        x = n.inputs[0].value
        return np.repeat(np.repeat(x, 2, axis=2), 2, axis=3)

    def bwd(n):
        x = n.inputs[0]
        if x.requires_grad:
            nb, c, h, w = x.value.shape
            x.add_grad(n.grad.reshape(nb, c, h, 2, w, 2).sum(axis=(3, 5)))

    return a.graph._add("upsample2", [a], {}, fwd, bwd)


def instance_norm(a: Node, eps=1e-5) -> Node:
    """Per-sample, per-channel normalization over the spatial axes (no affine)."""
    def fwd(n):
        x = n.inputs[0].value
        mu = x.mean(axis=(2, 3), keepdims=True)
        var = np.maximum((x * x).mean(axis=(2, 3), keepdims=True) - mu * mu, 0.0)
        inv = 1.0 / np.sqrt(var + n.attrs["eps"])
        n.cache["inv"] = inv
        return (x - mu) * inv

    def bwd(n):
        x = n.inputs[0]
        if not x.requires_grad:
            return
        y, g = n.value, n.grad
        inv = n.cache["inv"]
        gm = g.mean(axis=(2, 3), keepdims=True)
        gym = (g * y).mean(axis=(2, 3), keepdims=True)
        x.add_grad(inv * (g - gm - y * gym))

    return a.graph._add("instance_norm", [a], {"eps": eps}, fwd, bwd)


def abs_val(a: Node) -> Node:
    """|x| composed from the catalog: relu(x) + relu(-x)."""
    return add(relu(a), relu(neg(a)))


def detach(a: Node) -> Node:
    """Identity forward, gradient barrier backward (graph plumbing, like
    const/leaf; not a differentiable primitive)."""
    def fwd(n):
        return n.inputs[0].value

    node = a.graph._add("detach", [a], {}, fwd, None)
    node.requires_grad = False
    return node


# -- gradient verification -------------------------------------------------

def grad_check(graph: Graph, loss: Node, step=1e-4) -> float:
    """Max relative error between backward() and central finite differences,
    taken over every coordinate of every trainable parameter. f64 graphs only."""
    analytic = graph.backward(loss)
    worst = 0.0
    for name, pnode in graph.params.items():
        if not pnode.requires_grad:
            continue
        pv = pnode.value
        ga = analytic[name]
        flat = pv.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            graph.forward()
            hi = float(loss.value)
            flat[i] = orig - step
            graph.forward()
            lo = float(loss.value)
            flat[i] = orig
            num = (hi - lo) / (2 * step)
            ana = float(ga.reshape(-1)[i])
            err = abs(ana - num) / max(abs(ana), abs(num), 1e-8)
            worst = max(worst, err)
    graph.forward()
    return worst
