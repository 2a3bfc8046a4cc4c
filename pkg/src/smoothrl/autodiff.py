"""Reverse-mode automatic differentiation on an append-only tape.

Nodes hold numpy values (scalars or arrays).  Each node records the indices
of its parents, which always precede it, and one vector-Jacobian product that
maps the node's cotangent to one cotangent per parent.  Small MLPs enter the
tape as a single fused node whose VJP is computed by :mod:`smoothrl.kernels`.

    tape = Tape()
    w = tape.param(np.array([0.5, -1.0]))
    x = tape.input(np.array([3.0, 2.0]))
    loss = ad.sum(w * x)
    tape.grad_params(loss)   # -> [3., 2.]
"""

import numpy as np

from . import kernels


class Var:
    """Handle to one node of a :class:`Tape`."""

    __slots__ = ("tape", "idx")
    __array_priority__ = 100.0

    def __init__(self, tape, idx):
        self.tape = tape
        self.idx = idx

    @property
    def value(self):
        return self.tape.values[self.idx]

    @property
    def shape(self):
        return np.shape(self.value)

    @property
    def size(self):
        return np.size(self.value)

    def __repr__(self):
        kind = self.tape.nodes[self.idx][0]
        return f"Var(#{self.idx} {kind}, shape={self.shape})"

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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, k):
        return power(self, k)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, key):
        return getitem(self, key)

    def sum(self, axis=None):
        return sum(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)


class Tape:
    """Append-only record of a computation.

    ``nodes[i]`` is ``(kind, parent_indices, vjp)``; ``values[i]`` is the
    node's value.  Leaves have no parents and ``vjp=None``.
    """

    def __init__(self):
        self.nodes = []
        self.values = []
        self.params = []

    def __len__(self):
        return len(self.nodes)

    def _push(self, kind, value, parents=(), vjp=None):
        for p in parents:
            assert p < len(self.nodes)
        self.nodes.append((kind, tuple(parents), vjp))
        self.values.append(value)
        return Var(self, len(self.nodes) - 1)

    def param(self, value):
        """Register a differentiable parameter leaf (order matters for grad_params)."""
        v = self._push("param", np.array(value, dtype=np.float64))
        self.params.append(v.idx)
        return v

    def input(self, value):
        """Register a differentiable input leaf (see :meth:`grad_input`)."""
        return self._push("input", np.array(value, dtype=np.float64))

    def const(self, value):
        return self._push("const", np.asarray(value, dtype=np.float64))

    def backward(self, loss):
        """Cotangents of every node with respect to a scalar ``loss``.

        Returns a list indexed like ``nodes``; entries the loss does not
        depend on are ``None``.
        """
        if not isinstance(loss, Var) or loss.tape is not self:
            raise ValueError("loss must be a node of this tape")
        if np.size(loss.value) != 1:
            raise ValueError(f"loss must be scalar, got shape {loss.shape}")
        grads = [None] * len(self.nodes)
        grads[loss.idx] = np.ones_like(loss.value, dtype=np.float64)
        for i in range(loss.idx, -1, -1):
            g = grads[i]
            if g is None:
                continue
            _, parents, vjp = self.nodes[i]
            if not parents:
                continue
            for p, gp in zip(parents, vjp(g)):
                if gp is None:
                    continue
                gp = _unbroadcast(gp, np.shape(self.values[p]))
                grads[p] = gp if grads[p] is None else grads[p] + gp
        return grads

    def grad_params(self, loss):
        """Flat gradient of ``loss`` over all param leaves, in registration order."""
        grads = self.backward(loss)
        parts = []
        for i in self.params:
            g = grads[i]
            if g is None:
                g = np.zeros_like(self.values[i])
            parts.append(np.ravel(g))
        if not parts:
            return np.zeros(0)
        return np.concatenate(parts)

    def grad_input(self, loss, x):
        """Gradient of ``loss`` with respect to leaf ``x``."""
        if isinstance(x, Var):
            x = [x]
            single = True
        else:
            single = False
        grads = self.backward(loss)
        out = []
        for v in x:
            if self.nodes[v.idx][1]:
                raise ValueError("grad_input expects leaf nodes")
            g = grads[v.idx]
            out.append(np.zeros_like(v.value) if g is None else np.asarray(g))
        return out[0] if single else out


def _unbroadcast(g, shape):
    g = np.asarray(g)
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g.reshape(shape)


def _find_tape(*args):
    for a in args:
        if isinstance(a, Var):
            return a.tape
    return None


def _lift(tape, x):
    return x if isinstance(x, Var) else tape.const(x)


def _val(x):
    return x.value if isinstance(x, Var) else x


# --- elementwise binary ------------------------------------------------------


def add(a, b):
    tape = _find_tape(a, b)
    if tape is None:
        return np.add(a, b)
    a, b = _lift(tape, a), _lift(tape, b)
    return tape._push("add", a.value + b.value, (a.idx, b.idx), lambda g: (g, g))


def sub(a, b):
    tape = _find_tape(a, b)
    if tape is None:
        return np.subtract(a, b)
    a, b = _lift(tape, a), _lift(tape, b)
    return tape._push("sub", a.value - b.value, (a.idx, b.idx), lambda g: (g, -g))


def mul(a, b):
    tape = _find_tape(a, b)
    if tape is None:
        return np.multiply(a, b)
    a, b = _lift(tape, a), _lift(tape, b)
    av, bv = a.value, b.value
    return tape._push("mul", av * bv, (a.idx, b.idx), lambda g: (g * bv, g * av))


def div(a, b):
    tape = _find_tape(a, b)
    if tape is None:
        return np.divide(a, b)
    a, b = _lift(tape, a), _lift(tape, b)
    av, bv = a.value, b.value
    out = av / bv
    return tape._push("div", out, (a.idx, b.idx), lambda g: (g / bv, -g * out / bv))


# --- elementwise unary -------------------------------------------------------


def neg(a):
    if not isinstance(a, Var):
        return np.negative(a)
    return a.tape._push("neg", -a.value, (a.idx,), lambda g: (-g,))


def power(a, k):
    if not isinstance(a, Var):
        return np.power(a, k)
    av = a.value
    return a.tape._push("pow", av ** k, (a.idx,), lambda g: (g * k * av ** (k - 1),))


def square(a):
    if not isinstance(a, Var):
        return np.square(a)
    av = a.value
    return a.tape._push("square", av * av, (a.idx,), lambda g: (2.0 * g * av,))


def exp(a):
    if not isinstance(a, Var):
        return np.exp(a)
    out = np.exp(a.value)
    return a.tape._push("exp", out, (a.idx,), lambda g: (g * out,))


def log(a):
    if not isinstance(a, Var):
        return np.log(a)
    av = a.value
    return a.tape._push("log", np.log(av), (a.idx,), lambda g: (g / av,))


def tanh(a):
    if not isinstance(a, Var):
        return np.tanh(a)
    out = np.tanh(a.value)
    return a.tape._push("tanh", out, (a.idx,), lambda g: (g * (1.0 - out * out),))


# --- reductions and shape ----------------------------------------------------


def sum(a, axis=None):  # noqa: A001 - mirrors numpy naming
    if not isinstance(a, Var):
        return np.sum(a, axis=axis)
    shape = a.shape

    def vjp(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return a.tape._push("sum", np.sum(a.value, axis=axis), (a.idx,), vjp)


def mean(a, axis=None):
    if not isinstance(a, Var):
        return np.mean(a, axis=axis)
    n = a.size if axis is None else a.shape[axis]
    return sum(a, axis) * (1.0 / n)


def getitem(a, key):
    if not isinstance(a, Var):
        return a[key]
    shape = a.shape

    def vjp(g):
        out = np.zeros(shape)
        np.add.at(out, key, g)
        return (out,)

    return a.tape._push("getitem", a.value[key], (a.idx,), vjp)


def reshape(a, shape):
    if not isinstance(a, Var):
        return np.reshape(a, shape)
    old = a.shape
    return a.tape._push("reshape", np.reshape(a.value, shape), (a.idx,),
                        lambda g: (np.reshape(g, old),))


def concat(parts, axis=-1):
    tape = _find_tape(*parts)
    if tape is None:
        return np.concatenate(parts, axis=axis)
    parts = [_lift(tape, p) for p in parts]
    vals = [p.value for p in parts]
    splits = np.cumsum([np.shape(v)[axis] for v in vals])[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return tape._push("concat", np.concatenate(vals, axis=axis),
                      tuple(p.idx for p in parts), vjp)


def matmul(a, b):
    tape = _find_tape(a, b)
    if tape is None:
        return np.matmul(a, b)
    a, b = _lift(tape, a), _lift(tape, b)
    av, bv = a.value, b.value

    def vjp(g):
        if av.ndim == 2 and bv.ndim == 2:
            return g @ bv.T, av.T @ g
        if av.ndim == 2:
            return np.outer(g, bv), av.T @ g
        if bv.ndim == 2:
            return bv @ g, np.outer(av, g)
        return g * bv, g * av

    return tape._push("matmul", av @ bv, (a.idx, b.idx), vjp)


def stop_gradient(a):
    """Constant copy of ``a``'s value (gradients do not flow through)."""
    if not isinstance(a, Var):
        return np.asarray(a)
    return a.tape.const(a.value)


# --- fused MLP ---------------------------------------------------------------


def mlp_apply(params, sizes, x):
    """Fused tanh-MLP node: ``f(x; params)`` for a batch ``x`` of shape (n, d).

    ``params`` and ``x`` may each be a Var or a plain array; a 1-D ``x`` is
    treated as a single row and a 1-D output is returned.
    """
    tape = _find_tape(params, x)
    pv, xv = np.asarray(_val(params), dtype=np.float64), np.asarray(_val(x), dtype=np.float64)
    single = xv.ndim == 1
    X = xv[None, :] if single else xv
    if X.shape[1] != sizes[0]:
        raise ValueError(f"input dim {X.shape[1]} != network input dim {sizes[0]}")
    out, H = kernels.mlp_forward(pv, sizes, X)
    if single:
        out = out[0]
    if tape is None:
        return out
    params, x = _lift(tape, params), _lift(tape, x)

    def vjp(g):
        G = g[None, :] if single else g
        gp, gx = kernels.mlp_vjp(pv, sizes, X, H, G)
        return gp, (gx[0] if single else gx)

    return tape._push("mlp", out, (params.idx, x.idx), vjp)


class Mlp:
    """Fully connected network, tanh on hidden layers, identity on the output.

    Parameters live in one flat float64 vector (see :mod:`smoothrl.kernels`
    for the layout).
    """

    def __init__(self, sizes, params=None):
        sizes = tuple(int(s) for s in sizes)
        if len(sizes) < 2 or min(sizes) < 1:
            raise ValueError(f"bad layer sizes {sizes}")
        self.sizes = sizes
        self._sizes_arr = np.array(sizes, dtype=np.int64)
        n = param_count(sizes)
        if params is None:
            params = np.zeros(n)
        params = np.array(params, dtype=np.float64)
        if params.shape != (n,):
            raise ValueError(f"expected {n} parameters, got {params.shape}")
        self.params = params

    @classmethod
    def init(cls, sizes, rng):
        """Glorot-uniform weights, zero biases."""
        net = cls(sizes)
        for l in range(len(net.sizes) - 1):
            nin, nout = net.sizes[l], net.sizes[l + 1]
            a = np.sqrt(6.0 / (nin + nout))
            net.weight(l)[...] = rng.uniform(-a, a, size=(nout, nin))
        return net

    @property
    def n_params(self):
        return self.params.size

    @property
    def in_dim(self):
        return self.sizes[0]

    @property
    def out_dim(self):
        return self.sizes[-1]

    def _offset(self, l):
        off = 0
        for i in range(l):
            off += self.sizes[i] * self.sizes[i + 1] + self.sizes[i + 1]
        return off

    def weight(self, l):
        """View of layer ``l`` weights, shape (out, in)."""
        off = self._offset(l)
        nin, nout = self.sizes[l], self.sizes[l + 1]
        return self.params[off:off + nin * nout].reshape(nout, nin)

    def bias(self, l):
        off = self._offset(l) + self.sizes[l] * self.sizes[l + 1]
        return self.params[off:off + self.sizes[l + 1]]

    def copy(self):
        return Mlp(self.sizes, self.params.copy())

    def forward(self, x):
        return mlp_apply(self.params, self._sizes_arr, x)

    def forward_cache(self, X):
        """Batched forward returning ``(out, hidden)`` for use with :meth:`vjp`."""
        return kernels.mlp_forward(self.params, self._sizes_arr, X)

    def vjp(self, X, H, G):
        return kernels.mlp_vjp(self.params, self._sizes_arr, X, H, G)

    def vjp_input(self, X, H, G):
        return kernels.mlp_vjp_input(self.params, self._sizes_arr, X, H, G)

    def jvp(self, X, H, V):
        return kernels.mlp_jvp(self.params, self._sizes_arr, X, H, V)

    def __call__(self, x, params=None):
        """Evaluate on ``x``; records on the tape when ``x`` or ``params`` is a Var."""
        return mlp_apply(self.params if params is None else params, self._sizes_arr, x)

    def to_text(self):
        lines = ["mlp %d %s" % (len(self.sizes) - 1, " ".join(map(str, self.sizes)))]
        for l in range(len(self.sizes) - 1):
            lines.append(_fmt(self.weight(l).ravel()))
        for l in range(len(self.sizes) - 1):
            lines.append(_fmt(self.bias(l)))
        return "\n".join(lines) + "\n"

    @classmethod
    def from_lines(cls, lines):
        """Parse an Mlp from an iterator of lines; returns the net only."""
        head = next(lines).split()
        if not head or head[0] != "mlp":
            raise ValueError("expected 'mlp' header line")
        k = int(head[1])
        sizes = tuple(int(s) for s in head[2:])
        if len(sizes) != k + 1:
            raise ValueError(f"header declares {k} layers but lists {len(sizes)} sizes")
        net = cls(sizes)
        for l in range(k):
            w = _parse(next(lines))
            if w.size != sizes[l] * sizes[l + 1]:
                raise ValueError(f"layer {l}: expected {sizes[l] * sizes[l + 1]} weights, got {w.size}")
            net.weight(l)[...] = w.reshape(sizes[l + 1], sizes[l])
        for l in range(k):
            b = _parse(next(lines))
            if b.size != sizes[l + 1]:
                raise ValueError(f"layer {l}: expected {sizes[l + 1]} biases, got {b.size}")
            net.bias(l)[...] = b
        return net

    @classmethod
    def from_text(cls, text):
        return cls.from_lines(iter(text.splitlines()))


def _fmt(values):
    return " ".join(format(float(v), ".17g") for v in values)


def _parse(line):
    return np.array([float(t) for t in line.split()], dtype=np.float64)


def param_count(sizes):
    return int(np.sum([sizes[i] * sizes[i + 1] + sizes[i + 1] for i in range(len(sizes) - 1)]))


def forward(net, x):
    """Evaluate ``net`` on a single input vector (or a batch of rows)."""
    return net(x)


def finite_diff_check(f, x, step=1e-5):
    """Compare tape gradients of ``f`` against central differences.

    ``f`` maps an input Var to a scalar Var.  Returns the max over
    coordinates of ``|analytic - numeric| / (|analytic| + 1e-8)``.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    x = np.array(x, dtype=np.float64)
    tape = Tape()
    xv = tape.input(x)
    analytic = tape.grad_input(f(xv), xv)

    def value(z):
        t = Tape()
        return float(np.asarray(f(t.input(z)).value))

    numeric = np.empty_like(x)
    flat = numeric.reshape(-1)
    for i in range(x.size):
        e = np.zeros(x.size)
        e[i] = step
        e = e.reshape(x.shape)
        flat[i] = (value(x + e) - value(x - e)) / (2 * step)
    if x.size == 0:
        return 0.0
    return float(np.max(np.abs(analytic - numeric) / (np.abs(analytic) + 1e-8)))
