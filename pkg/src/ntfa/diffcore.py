"""Dense float64 tensors with a reverse-mode differentiation engine.

The engine covers exactly the primitives the factor model needs:
elementwise arithmetic with numpy broadcasting, 2-D matrix products,
PReLU, summed Gaussian log-densities, reparameterized Gaussian sampling,
pairwise squared distances, gather/concat/reshape plumbing, and a stable
log-mean-exp reduction.  Graphs are implicit: every operation returns a
`Tensor` node holding its value, references to the inputs that require
gradients, and a closure that accumulates adjoints into those inputs.

Scale parameters are carried everywhere as unconstrained log-scales;
sigma = exp(log_sigma) is applied internally after clamping the
log-scale to [LOG_SIGMA_MIN, LOG_SIGMA_MAX].  The clamp is part of the
function, so its gradient is zero outside the window.
"""

from __future__ import annotations

import numpy as np

LOG_SIGMA_MIN = -8.0
LOG_SIGMA_MAX = 8.0
_LOG_2PI = float(np.log(2.0 * np.pi))

# When enabled, every primitive validates that its output is finite.
# Off by default: the scan costs a full pass over each array.
CHECK_FINITE = False


class ShapeError(ValueError):
    """Operand shapes violate an operation's contract."""


class NumericalError(RuntimeError):
    """A computation produced non-finite values."""


class Tensor:
    """One node of the differentiation graph.

    `data` is always a float64 ndarray (0-d for scalars).  `grad` is
    populated by `backward()` for every node on a path from a gradient
    leaf to the root; leaves off every such path keep `grad=None`,
    which reads back as zero through `gradient()`.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backprop")

    def __init__(self, data, requires_grad=False, parents=(), backprop=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = parents
        self._backprop = backprop
        if self.data.size != int(np.prod(self.data.shape, dtype=np.int64)):
            raise ShapeError("inconsistent shape/size")
        if CHECK_FINITE and not np.all(np.isfinite(self.data)):
            raise NumericalError("non-finite tensor value")

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def gradient(self) -> np.ndarray:
        """Gradient accumulated by the last backward pass, zero if none."""
        if self.grad is None:
            return np.zeros_like(self.data)
        return self.grad

    def backward(self) -> None:
        """Reverse-mode pass from a scalar root.

        Accumulates into `.grad` of every reachable node, so callers
        reusing leaves across passes must clear grads in between.
        """
        if self.data.size != 1:
            raise ShapeError(
                f"backward() needs a scalar root, got shape {self.data.shape}"
            )
        _accumulate(self, np.ones_like(self.data))
        for node in _topo_order(self):
            if node._backprop is not None:
                node._backprop(node.grad)

    def sum(self) -> "Tensor":
        return tsum(self)

    def reshape(self, shape) -> "Tensor":
        return reshape(self, shape)

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        tag = "param" if self.requires_grad else "const"
        return f"Tensor({tag}, shape={self.data.shape})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data) -> Tensor:
    """A trainable leaf (copies its input)."""
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True)


def constant(data) -> Tensor:
    return Tensor(data)


def _topo_order(root):
    """Nodes reachable from `root` through gradient-requiring parents,
    in reverse topological (root-first) order."""
    order = []
    seen = set()
    stack = [(root, False)]
    while stack:
        node, emitted = stack.pop()
        if emitted:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    order.reverse()
    return order


def _accumulate(t, g):
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _sum_to_shape(g, shape):
    """Reduce a broadcast gradient back to an operand's shape."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _node(data, inputs, backprop):
    """Build an output node; drops the backprop machinery when no input
    requires a gradient."""
    parents = tuple(t for t in inputs if t.requires_grad)
    if not parents:
        return Tensor(data)
    return Tensor(data, requires_grad=True, parents=parents, backprop=backprop)


def _clamp_log_sigma(ls):
    clamped = np.clip(ls, LOG_SIGMA_MIN, LOG_SIGMA_MAX)
    mask = (ls >= LOG_SIGMA_MIN) & (ls <= LOG_SIGMA_MAX)
    return clamped, mask


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data

    def backprop(g):
        if a.requires_grad:
            _accumulate(a, _sum_to_shape(g, a.data.shape))
        if b.requires_grad:
            _accumulate(b, _sum_to_shape(g, b.data.shape))

    return _node(out, (a, b), backprop)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data - b.data

    def backprop(g):
        if a.requires_grad:
            _accumulate(a, _sum_to_shape(g, a.data.shape))
        if b.requires_grad:
            _accumulate(b, _sum_to_shape(-g, b.data.shape))

    return _node(out, (a, b), backprop)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data * b.data

    def backprop(g):
        if a.requires_grad:
            _accumulate(a, _sum_to_shape(g * b.data, a.data.shape))
        if b.requires_grad:
            _accumulate(b, _sum_to_shape(g * a.data, b.data.shape))

    return _node(out, (a, b), backprop)


def neg(a) -> Tensor:
    a = as_tensor(a)

    def backprop(g):
        _accumulate(a, -g)

    return _node(-a.data, (a,), backprop)


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)

    def backprop(g):
        _accumulate(a, g * out)

    return _node(out, (a,), backprop)


def tsum(a) -> Tensor:
    """Sum of all elements, as a 0-d scalar node."""
    a = as_tensor(a)

    def backprop(g):
        _accumulate(a, np.broadcast_to(g, a.data.shape).copy())

    return _node(a.data.sum(), (a,), backprop)


def clamp(a, lo=LOG_SIGMA_MIN, hi=LOG_SIGMA_MAX) -> Tensor:
    """Clip to [lo, hi]; gradient is zero outside the window."""
    a = as_tensor(a)
    out = np.clip(a.data, lo, hi)
    mask = (a.data >= lo) & (a.data <= hi)

    def backprop(g):
        _accumulate(a, g * mask)

    return _node(out, (a,), backprop)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError("matmul expects 2-D operands")
    if a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(
            f"matmul inner dimensions disagree: {a.data.shape} x {b.data.shape}"
        )
    out = a.data @ b.data

    def backprop(g):
        if a.requires_grad:
            _accumulate(a, g @ b.data.T)
        if b.requires_grad:
            _accumulate(b, a.data.T @ g)

    return _node(out, (a, b), backprop)


def pairwise_sqdist(a, b) -> Tensor:
    """Squared Euclidean distances between row sets: out[i, j] = |a_i - b_j|^2.

    a: (m, d), b: (n, d) -> (m, n).  Computed via the expanded form so the
    heavy lifting is one matrix product.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[1]:
        raise ShapeError("pairwise_sqdist expects (m, d) and (n, d)")
    aa = np.sum(a.data * a.data, axis=1)
    bb = np.sum(b.data * b.data, axis=1)
    out = aa[:, None] + bb[None, :] - 2.0 * (a.data @ b.data.T)
    np.maximum(out, 0.0, out=out)  # guard tiny negative round-off

    def backprop(g):
        if a.requires_grad:
            _accumulate(a, 2.0 * (a.data * g.sum(axis=1)[:, None] - g @ b.data))
        if b.requires_grad:
            _accumulate(b, 2.0 * (b.data * g.sum(axis=0)[:, None] - g.T @ a.data))

    return _node(out, (a, b), backprop)


# ---------------------------------------------------------------------------
# shape plumbing


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    out = a.data.reshape(shape)

    def backprop(g):
        _accumulate(a, g.reshape(a.data.shape))

    return _node(out, (a,), backprop)


def take(a, key) -> Tensor:
    """Basic (slice/int tuple) indexing with scatter-add backward."""
    a = as_tensor(a)
    out = a.data[key]

    def backprop(g):
        ga = np.zeros_like(a.data)
        ga[key] += g
        _accumulate(a, ga)

    return _node(np.ascontiguousarray(out), (a,), backprop)


def take_rows(a, idx) -> Tensor:
    """Gather rows along axis 0; repeated indices accumulate on backward."""
    a = as_tensor(a)
    idx = np.asarray(idx, dtype=np.intp)
    out = a.data[idx]

    def backprop(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, idx, g)
        _accumulate(a, ga)

    return _node(out, (a,), backprop)


def concat(tensors, axis=0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    spans = np.cumsum([t.data.shape[axis] for t in tensors])[:-1]

    def backprop(g):
        pieces = np.split(g, spans, axis=axis)
        for t, piece in zip(tensors, pieces):
            if t.requires_grad:
                _accumulate(t, piece)

    return _node(out, tuple(tensors), backprop)


# ---------------------------------------------------------------------------
# model-specific primitives


def prelu(x, slope) -> Tensor:
    """Elementwise x if x >= 0 else slope * x, with a scalar learnable slope."""
    x, slope = as_tensor(x), as_tensor(slope)
    if slope.data.size != 1:
        raise ShapeError("prelu slope must be a scalar")
    pos = x.data >= 0
    out = np.where(pos, x.data, slope.data * x.data)

    def backprop(g):
        if x.requires_grad:
            _accumulate(x, g * np.where(pos, 1.0, float(slope.data)))
        if slope.requires_grad:
            _accumulate(slope, np.sum(g * np.where(pos, 0.0, x.data)).reshape(slope.data.shape))

    return _node(out, (x, slope), backprop)


def gaussian_logpdf(x, mu, log_sigma) -> Tensor:
    """Sum over all (broadcast) elements of the Normal log-density.

    log N(x; mu, exp(ls)) = -log(2 pi)/2 - ls - (x - mu)^2 / (2 exp(2 ls)),
    with ls clamped to the global window before exponentiation.
    """
    x, mu, log_sigma = as_tensor(x), as_tensor(mu), as_tensor(log_sigma)
    ls, ls_mask = _clamp_log_sigma(log_sigma.data)
    centered = x.data - mu.data
    inv_var = np.exp(-2.0 * ls)
    elem = -0.5 * _LOG_2PI - ls - 0.5 * centered * centered * inv_var
    bshape = elem.shape
    out = elem.sum()

    def backprop(g):
        g = float(g)
        if x.requires_grad or mu.requires_grad:
            dmu = g * np.broadcast_to(centered * inv_var, bshape)
            if mu.requires_grad:
                _accumulate(mu, _sum_to_shape(dmu, mu.data.shape))
            if x.requires_grad:
                _accumulate(x, _sum_to_shape(-dmu, x.data.shape))
        if log_sigma.requires_grad:
            dls = g * np.broadcast_to(
                (-1.0 + centered * centered * inv_var) * ls_mask, bshape
            )
            _accumulate(log_sigma, _sum_to_shape(dls, log_sigma.data.shape))

    return _node(out, (x, mu, log_sigma), backprop)


def reparam_sample(mu, log_sigma, eps) -> Tensor:
    """mu + exp(log_sigma) * eps for a fixed noise draw `eps`.

    Gradients flow to mu and log_sigma only; eps is treated as data.
    Broadcasting follows numpy rules (e.g. per-trial (B,1,K) parameters
    against (B,T,K) noise).
    """
    mu, log_sigma = as_tensor(mu), as_tensor(log_sigma)
    eps = np.asarray(eps, dtype=np.float64)
    ls, ls_mask = _clamp_log_sigma(log_sigma.data)
    sigma = np.exp(ls)
    out = mu.data + sigma * eps

    def backprop(g):
        if mu.requires_grad:
            _accumulate(mu, _sum_to_shape(g, mu.data.shape))
        if log_sigma.requires_grad:
            dls = g * np.broadcast_to(sigma * eps * ls_mask, g.shape)
            _accumulate(log_sigma, _sum_to_shape(dls, log_sigma.data.shape))

    return _node(out, (mu, log_sigma), backprop)


def logmeanexp(parts) -> Tensor:
    """log((1/L) sum_l exp(v_l)) over a list of scalar nodes, stably."""
    parts = [as_tensor(p) for p in parts]
    if not parts:
        raise ShapeError("logmeanexp needs at least one term")
    vals = np.array([float(p.data) for p in parts])
    m = vals.max()
    shifted = np.exp(vals - m)
    total = shifted.sum()
    out = m + np.log(total / len(vals))
    weights = shifted / total  # softmax of the particle values

    def backprop(g):
        g = float(g)
        for p, w in zip(parts, weights):
            if p.requires_grad:
                _accumulate(p, np.full_like(p.data, g * w))

    return _node(out, tuple(parts), backprop)


# ---------------------------------------------------------------------------
# optimizer


class AdamState:
    """Per-parameter first/second moment accumulators plus a step counter."""

    def __init__(self, shapes, beta1=0.9, beta2=0.999, eps=1e-8):
        self.m = [np.zeros(s) for s in shapes]
        self.v = [np.zeros(s) for s in shapes]
        self.step = 0
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps


def adam_step(values, grads, state, lr):
    """One Adam update, in place, with bias-corrected moments."""
    if lr <= 0:
        raise ValueError("lr must be positive")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for p, g, m, v in zip(values, grads, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


class Adam:
    """Adam over a fixed list of leaf tensors.

    `step()` consumes and clears the leaves' accumulated gradients; a
    missing gradient counts as zero.
    """

    def __init__(self, params, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.state = AdamState([p.data.shape for p in self.params], beta1, beta2, eps)

    def step(self):
        grads = [p.gradient() for p in self.params]
        adam_step([p.data for p in self.params], grads, self.state, self.lr)
        for p in self.params:
            p.grad = None
