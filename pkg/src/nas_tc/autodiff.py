"""Minimal reverse-mode autodiff engine.

Define-by-run: every operation returns a fresh ``Tensor`` holding the result
plus a closure that routes the upstream gradient to its parents.  The graph
is rebuilt on every forward pass and never mutated in place, so a backward
pass visits each node exactly once in reverse topological order.

Feature maps are rank-5 arrays (batch N, channels C, timesteps T, height H,
width W).  All arithmetic is 64-bit; file formats downcast to 32-bit.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ConfigurationError, NumericError, UsageError

DTYPE = np.float64


class Tensor:
    """A value in the computation graph.

    ``grad`` stays ``None`` until a backward pass reaches the tensor.
    Leaf tensors created from raw data do not require gradients unless
    asked to (inputs under a gradient check, ``Parameter``).
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False,
                 parents: tuple["Tensor", ...] = (),
                 backward: Callable[[np.ndarray], None] | None = None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents = parents
        self._backward = backward

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
        return float(self.data)

    def backward(self) -> None:
        """Populate gradients of every reachable tensor that requires them."""
        if self.data.size != 1:
            raise UsageError(
                f"backward requires a scalar root, got shape {self.shape}")
        order = _topo_order(self)
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None:
                node._backward(node.grad)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


class Parameter(Tensor):
    """A trainable tensor with a stable name for optimizer state and files."""

    __slots__ = ("name",)

    def __init__(self, data, name: str):
        super().__init__(data, requires_grad=True)
        self.name = name
        self.grad = np.zeros_like(self.data)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape})"


def _topo_order(root: Tensor) -> list[Tensor]:
    """Iterative post-order DFS; graphs are DAGs by construction."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    t.grad = g if t.grad is None else t.grad + g


def _node(data: np.ndarray, parents: Sequence[Tensor],
          backward: Callable[[np.ndarray], None]) -> Tensor:
    parents = tuple(parents)
    if any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, parents=parents, backward=backward)
    return Tensor(data)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# elementwise / structural primitives
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ConfigurationError(f"add shape mismatch: {a.shape} vs {b.shape}")
    out_data = a.data + b.data

    def backward(g):
        _accum(a, g)
        _accum(b, g)

    return _node(out_data, (a, b), backward)


def scale(x: Tensor, s: float) -> Tensor:
    out_data = x.data * s

    def backward(g):
        _accum(x, g * s)

    return _node(out_data, (x,), backward)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    out_data = np.where(mask, x.data, 0.0)

    def backward(g):
        _accum(x, g * mask)

    return _node(out_data, (x,), backward)


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid(x.data)

    def backward(g):
        _accum(x, g * s * (1.0 - s))

    return _node(s, (x,), backward)


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def weighted_sum(xs: Sequence[Tensor], w: Tensor) -> Tensor:
    """sum_i w[i] * xs[i], with w a length-len(xs) vector."""
    if w.ndim != 1 or w.size != len(xs):
        raise ConfigurationError(
            f"weight vector of length {w.size} for {len(xs)} operands")
    if not xs:
        raise ConfigurationError("weighted_sum of no operands")
    out_data = xs[0].data * w.data[0]
    for i in range(1, len(xs)):
        out_data = out_data + xs[i].data * w.data[i]

    def backward(g):
        if w.requires_grad:
            dw = np.array([np.sum(g * x.data) for x in xs], dtype=DTYPE)
            _accum(w, dw)
        for i, x in enumerate(xs):
            _accum(x, g * w.data[i])

    return _node(out_data, tuple(xs) + (w,), backward)


def concat_channels(xs: Sequence[Tensor]) -> Tensor:
    if not xs:
        raise ConfigurationError("concat of empty tensor list")
    base = xs[0].shape
    for x in xs[1:]:
        if x.ndim != 5 or x.shape[0] != base[0] or x.shape[2:] != base[2:]:
            raise ConfigurationError(
                f"concat shape mismatch: {x.shape} vs {base}")
    out_data = np.concatenate([x.data for x in xs], axis=1)
    splits = np.cumsum([x.shape[1] for x in xs])[:-1]

    def backward(g):
        for x, part in zip(xs, np.split(g, splits, axis=1)):
            _accum(x, part)

    return _node(out_data, tuple(xs), backward)


def slice_channels(x: Tensor, lo: int, hi: int) -> Tensor:
    if not (0 <= lo < hi <= x.shape[1]):
        raise ConfigurationError(
            f"channel slice [{lo}:{hi}] out of range for C={x.shape[1]}")
    out_data = x.data[:, lo:hi].copy()

    def backward(g):
        gx = np.zeros_like(x.data)
        gx[:, lo:hi] = g
        _accum(x, gx)

    return _node(out_data, (x,), backward)


def permute_channels(x: Tensor, perm: np.ndarray) -> Tensor:
    perm = np.asarray(perm, dtype=np.intp)
    if perm.shape != (x.shape[1],):
        raise ConfigurationError(
            f"permutation of length {perm.size} for C={x.shape[1]}")
    inv = np.empty_like(perm)
    inv[perm] = np.arange(perm.size)
    out_data = x.data[:, perm]

    def backward(g):
        _accum(x, g[:, inv])

    return _node(out_data, (x,), backward)


# ---------------------------------------------------------------------------
# convolutions
# ---------------------------------------------------------------------------

def temporal_conv(x: Tensor, w: Tensor, *, dilation: int = 1, groups: int = 1,
                  pad: tuple[int, int] = (0, 0)) -> Tensor:
    """Grouped 1-D convolution along T, stride 1, zero padding.

    ``w`` has shape (C_out, C_in // groups, k); H and W pass through.
    """
    n, c, t, hh, ww = x.shape
    c_out, c_in_pg, k = w.shape
    if c % groups != 0 or c_out % groups != 0:
        raise ConfigurationError(
            f"channels ({c} in, {c_out} out) not divisible by groups={groups}")
    if c_in_pg != c // groups:
        raise ConfigurationError(
            f"kernel expects {c_in_pg} channels per group, input has {c // groups}")
    if not np.isfinite(x.data).all():
        raise NumericError("non-finite values in convolution input")
    pl, pr = pad
    t_out = t + pl + pr - (k - 1) * dilation
    if t_out < 1:
        raise ConfigurationError(
            f"kernel span {(k - 1) * dilation + 1} exceeds padded length {t + pl + pr}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (pl, pr), (0, 0), (0, 0)))
    # windows[j] = xp shifted by j*dilation, stacked: (k, N, G, C/G, T_out, H, W)
    win = np.stack([xp[:, :, j * dilation: j * dilation + t_out]
                    for j in range(k)])
    win = win.reshape(k, n, groups, c_in_pg, t_out, hh, ww)
    wr = w.data.reshape(groups, c_out // groups, c_in_pg, k)
    out = np.einsum("goik,kngithw->ngothw", wr, win, optimize=True)
    out_data = out.reshape(n, c_out, t_out, hh, ww)

    def backward(g):
        gr = g.reshape(n, groups, c_out // groups, t_out, hh, ww)
        if w.requires_grad:
            dw = np.einsum("ngothw,kngithw->goik", gr, win, optimize=True)
            _accum(w, dw.reshape(c_out, c_in_pg, k))
        if x.requires_grad:
            dxp = np.zeros((n, groups, c_in_pg, t + pl + pr, hh, ww), dtype=DTYPE)
            for j in range(k):
                dxp[:, :, :, j * dilation: j * dilation + t_out] += np.einsum(
                    "goi,ngothw->ngithw", wr[..., j], gr, optimize=True)
            dx = dxp.reshape(n, c, t + pl + pr, hh, ww)[:, :, pl: pl + t]
            _accum(x, dx)

    return _node(out_data, (x, w), backward)


def pointwise_conv(x: Tensor, w: Tensor) -> Tensor:
    """1x1x1 convolution: a linear map across channels at every position."""
    if w.ndim != 2 or w.shape[1] != x.shape[1]:
        raise ConfigurationError(
            f"pointwise kernel {w.shape} incompatible with C={x.shape[1]}")
    out_data = np.einsum("oc,ncthw->nothw", w.data, x.data, optimize=True)

    def backward(g):
        if w.requires_grad:
            _accum(w, np.einsum("nothw,ncthw->oc", g, x.data, optimize=True))
        if x.requires_grad:
            _accum(x, np.einsum("oc,nothw->ncthw", w.data, g, optimize=True))

    return _node(out_data, (x, w), backward)


# ---------------------------------------------------------------------------
# batch normalization
# ---------------------------------------------------------------------------

class BatchNormState:
    """Running statistics owned by a BatchNorm block (not trainable)."""

    __slots__ = ("name", "running_mean", "running_var", "momentum", "eps")

    def __init__(self, channels: int, name: str = "bn",
                 momentum: float = 0.1, eps: float = 1e-5):
        self.name = name
        self.running_mean = np.zeros(channels, dtype=DTYPE)
        self.running_var = np.ones(channels, dtype=DTYPE)
        self.momentum = momentum
        self.eps = eps


def batch_norm(x: Tensor, gamma: Tensor | None, beta: Tensor | None,
               state: BatchNormState, training: bool) -> Tensor:
    """Per-channel standardization over (N, T, H, W) with optional affine."""
    n, c, t, hh, ww = x.shape
    axes = (0, 2, 3, 4)
    m = n * t * hh * ww
    if training:
        if m < 2:
            raise ConfigurationError(
                "batch norm in training mode needs at least 2 positions per channel")
        mean = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        state.running_mean = (1 - state.momentum) * state.running_mean \
            + state.momentum * mean
        state.running_var = (1 - state.momentum) * state.running_var \
            + state.momentum * var
    else:
        mean = state.running_mean
        var = state.running_var
    inv_std = 1.0 / np.sqrt(var + state.eps)
    bshape = (1, c, 1, 1, 1)
    x_hat = (x.data - mean.reshape(bshape)) * inv_std.reshape(bshape)
    if gamma is not None:
        out_data = x_hat * gamma.data.reshape(bshape) + beta.data.reshape(bshape)
    else:
        out_data = x_hat

    def backward(g):
        if gamma is not None:
            _accum(gamma, np.sum(g * x_hat, axis=axes))
            _accum(beta, np.sum(g, axis=axes))
            gxh = g * gamma.data.reshape(bshape)
        else:
            gxh = g
        if not x.requires_grad:
            return
        if training:
            # d/dx of ((x - mu) / sqrt(var + eps)) with mu, var batch statistics
            mean_g = gxh.mean(axis=axes).reshape(bshape)
            mean_gx = (gxh * x_hat).mean(axis=axes).reshape(bshape)
            dx = inv_std.reshape(bshape) * (gxh - mean_g - x_hat * mean_gx)
        else:
            dx = gxh * inv_std.reshape(bshape)
        _accum(x, dx)

    parents = (x,) if gamma is None else (x, gamma, beta)
    return _node(out_data, parents, backward)


# ---------------------------------------------------------------------------
# pooling
# ---------------------------------------------------------------------------

def pool_t(x: Tensor, kind: str, k: int = 2, stride: int = 1) -> Tensor:
    """Sliding window over T only.

    stride 1 pads left by k-1 so T is preserved (-inf pad for max, zero pad
    for avg with the pad counted in the divisor); stride 2 uses no padding
    and yields floor(T/2) steps for k=2.
    """
    if kind not in ("max", "avg"):
        raise ConfigurationError(f"unknown pool kind {kind!r}")
    if stride not in (1, 2):
        raise ConfigurationError(f"pool stride must be 1 or 2, got {stride}")
    n, c, t, hh, ww = x.shape
    if t == 0:
        raise ConfigurationError("pooling over empty time axis")

    if stride == 1:
        pl = k - 1
        fill = -np.inf if kind == "max" else 0.0
        xp = np.pad(x.data, ((0, 0), (0, 0), (pl, 0), (0, 0), (0, 0)),
                    constant_values=fill)
        t_out = t
        win = np.stack([xp[:, :, j: j + t_out] for j in range(k)])
    else:
        t_out = (t - k) // 2 + 1
        if t_out < 1:
            raise ConfigurationError(f"pool kernel {k} exceeds T={t} at stride 2")
        pl = 0
        win = np.stack([x.data[:, :, j: j + 2 * t_out: 2] for j in range(k)])

    if kind == "max":
        out_data = win.max(axis=0)
        amax = win.argmax(axis=0)  # first max wins on ties
    else:
        out_data = win.sum(axis=0) / k

    def backward(g):
        if not x.requires_grad:
            return
        dxp = np.zeros((n, c, t + pl, hh, ww), dtype=DTYPE)
        for j in range(k):
            contrib = g * (amax == j) if kind == "max" else g / k
            if stride == 1:
                dxp[:, :, j: j + t_out] += contrib
            else:
                dxp[:, :, j: j + 2 * t_out: 2] += contrib
        _accum(x, dxp[:, :, pl:] if stride == 1 else dxp)

    return _node(out_data, (x,), backward)


def global_avg_pool(x: Tensor) -> Tensor:
    """Mean over (T, H, W): (N, C, T, H, W) -> (N, C)."""
    n, c, t, hh, ww = x.shape
    m = t * hh * ww
    out_data = x.data.mean(axis=(2, 3, 4))

    def backward(g):
        _accum(x, np.broadcast_to(g[:, :, None, None, None] / m, x.shape).copy())

    return _node(out_data, (x,), backward)


# ---------------------------------------------------------------------------
# dense head ops
# ---------------------------------------------------------------------------

def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """x (N, F) @ w (F, K) + b (K)."""
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ConfigurationError(
            f"linear shapes incompatible: x{x.shape}, w{w.shape}")
    out_data = x.data @ w.data + b.data

    def backward(g):
        if w.requires_grad:
            _accum(w, x.data.T @ g)
        if b.requires_grad:
            _accum(b, g.sum(axis=0))
        if x.requires_grad:
            _accum(x, g @ w.data.T)

    return _node(out_data, (x, w, b), backward)


def dropout(x: Tensor, p: float, rng: np.random.Generator,
            training: bool) -> Tensor:
    """Inverted dropout; identity when not training or p == 0."""
    if not training or p == 0.0:
        return x
    if not 0.0 <= p < 1.0:
        raise ConfigurationError(f"dropout probability {p} outside [0, 1)")
    keep = (rng.random(x.shape) >= p) / (1.0 - p)

    def backward(g):
        _accum(x, g * keep)

    return _node(x.data * keep, (x,), backward)


def softmax_vec(v: Tensor) -> Tensor:
    """Stable softmax of a 1-D vector."""
    if v.ndim != 1:
        raise ConfigurationError(f"softmax_vec expects a vector, got {v.shape}")
    s = _softmax(v.data)

    def backward(g):
        _accum(v, s * (g - np.dot(g, s)))

    return _node(s, (v,), backward)


def _softmax(z: np.ndarray, axis: int = -1) -> np.ndarray:
    e = np.exp(z - z.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


# ---------------------------------------------------------------------------
# losses / reductions
# ---------------------------------------------------------------------------

def sum_all(x: Tensor) -> Tensor:
    out_data = np.asarray(x.data.sum())

    def backward(g):
        _accum(x, np.broadcast_to(g, x.shape).copy())

    return _node(out_data, (x,), backward)


def dot_const(x: Tensor, r: np.ndarray) -> Tensor:
    """sum(x * r) against a constant projection; handy for gradient checks."""
    r = np.asarray(r, dtype=DTYPE)
    out_data = np.asarray(np.sum(x.data * r))

    def backward(g):
        _accum(x, g * r)

    return _node(out_data, (x,), backward)


def bce_with_logits(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean binary cross-entropy over all entries, numerically stable."""
    z = logits.data
    y = np.asarray(targets, dtype=DTYPE)
    if z.shape != y.shape:
        raise ConfigurationError(f"logits {z.shape} vs targets {y.shape}")
    loss = np.maximum(z, 0) - z * y + np.log1p(np.exp(-np.abs(z)))
    out_data = np.asarray(loss.mean())

    def backward(g):
        _accum(logits, g * (_sigmoid(z) - y) / z.size)

    return _node(out_data, (logits,), backward)


def softmax_cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean cross-entropy for integer class labels; logits (N, K)."""
    z = logits.data
    idx = np.asarray(labels)
    if z.ndim != 2 or idx.shape != (z.shape[0],):
        raise ConfigurationError(
            f"cross entropy expects (N, K) logits and N labels, got {z.shape}")
    zmax = z.max(axis=1, keepdims=True)
    logsumexp = zmax[:, 0] + np.log(np.exp(z - zmax).sum(axis=1))
    out_data = np.asarray(np.mean(logsumexp - z[np.arange(len(idx)), idx]))

    def backward(g):
        p = _softmax(z, axis=1)
        p[np.arange(len(idx)), idx] -= 1.0
        _accum(logits, g * p / len(idx))

    return _node(out_data, (logits,), backward)


# ---------------------------------------------------------------------------
# optimizers
# ---------------------------------------------------------------------------

class SGD:
    """SGD with classical momentum and optional L2 weight decay."""

    def __init__(self, params: Iterable[Parameter], lr: float,
                 momentum: float = 0.0, weight_decay: float = 0.0):
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self._velocity: dict[str, np.ndarray] = {}

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def step(self) -> None:
        for p in self.params:
            g = p.grad
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            if self.momentum:
                v = self._velocity.get(p.name)
                v = g if v is None else self.momentum * v + g
                self._velocity[p.name] = v
                g = v
            p.data = p.data - self.lr * g


class Adam:
    """Adam with bias correction; defaults follow the training recipe."""

    def __init__(self, params: Iterable[Parameter], lr: float = 0.01,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-4,
                 weight_decay: float = 0.0):
        self.params = list(params)
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}
        self._t = 0

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def step(self) -> None:
        self._t += 1
        b1, b2 = self.betas
        for p in self.params:
            g = p.grad
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            m = self._m.get(p.name, np.zeros_like(p.data))
            v = self._v.get(p.name, np.zeros_like(p.data))
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            self._m[p.name] = m
            self._v[p.name] = v
            m_hat = m / (1 - b1 ** self._t)
            v_hat = v / (1 - b2 ** self._t)
            p.data = p.data - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
