"""Hot numeric kernels for small tanh MLPs.

Every kernel exists twice: a vectorized numpy implementation (``np_*``) and a
numba ``@njit`` implementation (``nb_*``).  The public dispatchers
(``mlp_forward``, ``mlp_vjp``, ``mlp_vjp_input``, ``mlp_jvp``, ``pgd_sqdiff``)
pick one according to the ``SMOOTHRL_NUMBA`` environment variable, read once at
import:

* ``0`` -- always numpy;
* ``1`` -- always numba;
* ``auto`` (default) -- per kernel.  The backward and forward-mode kernels
  have no ``tanh`` in them and always run under numba.  Without SVML,
  numba's scalar ``tanh`` loses to numpy's vectorized one on wide batches, so
  the forward pass uses numba only up to ``SMALL_BATCH`` rows (where numpy's
  per-call overhead dominates) and the PGD loop up to ``PGD_BATCH`` rows;
  wider PGD batches mix the numpy forward with the numba input VJP.

Parameter layout is a single flat float64 vector: for each layer ``l`` the
weight matrix of shape ``(sizes[l+1], sizes[l])`` in row-major order followed
by the bias of length ``sizes[l+1]``.  Hidden layers use tanh, the output layer
is linear.  Hidden activations of all layers are returned side by side in one
``(n, sum(hidden sizes))`` array so the backward kernels can reuse them.
"""

import os

import numpy as np

try:
    import numba
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None

if numba is not None:
    njit = numba.njit(cache=True, nogil=True)
else:  # pragma: no cover
    def njit(f):
        return f

SMALL_BATCH = 8
PGD_BATCH = 32

_flag = os.environ.get("SMOOTHRL_NUMBA", "auto").strip().lower()
if numba is None or _flag in ("0", "false", "no", "off"):
    MODE = "numpy"
elif _flag in ("1", "true", "yes", "on"):
    MODE = "numba"
else:
    MODE = "auto"


# ---------------------------------------------------------------------------
# numpy path


def _layers(p, sizes):
    off = 0
    out = []
    for l in range(len(sizes) - 1):
        nin, nout = sizes[l], sizes[l + 1]
        W = p[off:off + nin * nout].reshape(nout, nin)
        off += nin * nout
        b = p[off:off + nout]
        off += nout
        out.append((W, b))
    return out


def np_mlp_forward(p, sizes, X):
    layers = _layers(p, sizes)
    hidden = []
    h = X
    for W, b in layers[:-1]:
        h = np.tanh(h @ W.T + b)
        hidden.append(h)
    W, b = layers[-1]
    out = h @ W.T + b
    if hidden:
        H = np.concatenate(hidden, axis=1)
    else:
        H = np.empty((X.shape[0], 0))
    return out, H


def _split_hidden(H, sizes):
    cols = np.cumsum(sizes[1:-1])[:-1]
    return np.split(H, cols, axis=1) if len(sizes) > 2 else []


def np_mlp_vjp(p, sizes, X, H, G):
    layers = _layers(p, sizes)
    hidden = _split_hidden(H, sizes)
    inputs = [X] + hidden
    grads = []
    for l in range(len(layers) - 1, -1, -1):
        W, _ = layers[l]
        h_in = inputs[l]
        grads.append((G.T @ h_in, G.sum(axis=0)))
        G = G @ W
        if l > 0:
            G = G * (1.0 - h_in * h_in)
    gp = np.concatenate([np.concatenate([gW.ravel(), gb]) for gW, gb in reversed(grads)])
    return gp, G


def np_mlp_vjp_input(p, sizes, X, H, G):
    layers = _layers(p, sizes)
    hidden = _split_hidden(H, sizes)
    for l in range(len(layers) - 1, -1, -1):
        G = G @ layers[l][0]
        if l > 0:
            h = hidden[l - 1]
            G = G * (1.0 - h * h)
    return G


def np_mlp_jvp(p, sizes, X, H, V):
    layers = _layers(p, sizes)
    dlayers = _layers(V, sizes)
    hidden = _split_hidden(H, sizes)
    inputs = [X] + hidden
    t = np.zeros_like(X)
    for l, ((W, _), (dW, db)) in enumerate(zip(layers, dlayers)):
        dz = t @ W.T + inputs[l] @ dW.T + db
        if l < len(layers) - 1:
            h = hidden[l]
            t = dz * (1.0 - h * h)
        else:
            t = dz
    return t


def np_pgd_sqdiff(p, sizes, X, d, w, delta0, eps, step, iters, use_sign, scale=None,
                  vjp_input=None):
    """Projected ascent on ``sum_j w_j (g_j(x) - g_j(x + [delta, 0]))**2`` per row.

    ``g = f`` by default; with ``scale`` given, ``g_j = scale_j * tanh(f_j)``.
    Only the first ``d`` input columns are perturbed.  Returns the final
    perturbation and the objective value at it.  ``vjp_input`` swaps in
    another input-VJP kernel (same signature as :func:`np_mlp_vjp_input`).
    """
    vjp_input = vjp_input or np_mlp_vjp_input
    def squash(out):
        return out if scale is None else scale * np.tanh(out)

    raw, _ = np_mlp_forward(p, sizes, X)
    base = squash(raw)
    delta = np.clip(delta0, -eps, eps)
    Xp = X.copy()
    for _ in range(iters):
        Xp[:, :d] = X[:, :d] + delta
        out, H = np_mlp_forward(p, sizes, Xp)
        g_out = squash(out)
        G = -2.0 * w * (base - g_out)
        if scale is not None:
            G = G * (scale - g_out * g_out / scale)
        gX = vjp_input(p, sizes, Xp, H, G)
        g = gX[:, :d]
        delta = delta + step * (np.sign(g) if use_sign else g)
        delta = np.clip(delta, -eps, eps)
    Xp[:, :d] = X[:, :d] + delta
    out, _ = np_mlp_forward(p, sizes, Xp)
    values = ((base - squash(out)) ** 2 * w).sum(axis=1)
    return delta, values


# ---------------------------------------------------------------------------
# numba path


@njit
def nb_mlp_forward(p, sizes, X):
    n = X.shape[0]
    L = sizes.shape[0] - 1
    total = 0
    for l in range(1, L):
        total += sizes[l]
    H = np.empty((n, total))
    h = np.ascontiguousarray(X)
    off = 0
    hoff = 0
    for l in range(L):
        nin = sizes[l]
        nout = sizes[l + 1]
        W = p[off:off + nin * nout].reshape((nout, nin))
        off += nin * nout
        b = p[off:off + nout]
        off += nout
        z = np.dot(h, W.T)
        if l < L - 1:
            for i in range(n):
                for j in range(nout):
                    v = np.tanh(z[i, j] + b[j])
                    z[i, j] = v
                    H[i, hoff + j] = v
            hoff += nout
        else:
            for i in range(n):
                for j in range(nout):
                    z[i, j] += b[j]
        h = z
    return h, H


@njit
def nb_mlp_vjp(p, sizes, X, H, G):
    n = X.shape[0]
    L = sizes.shape[0] - 1
    gp = np.zeros(p.shape[0])
    # offsets of each layer's parameters and hidden block
    poff = np.zeros(L + 1, dtype=np.int64)
    hoff = np.zeros(L, dtype=np.int64)
    for l in range(L):
        poff[l + 1] = poff[l] + sizes[l] * sizes[l + 1] + sizes[l + 1]
        if l > 0:
            hoff[l] = hoff[l - 1] + sizes[l]
    G = np.ascontiguousarray(G)
    for l in range(L - 1, -1, -1):
        nin = sizes[l]
        nout = sizes[l + 1]
        W = p[poff[l]:poff[l] + nin * nout].reshape((nout, nin))
        if l == 0:
            h_in = np.ascontiguousarray(X)
        else:
            h_in = np.ascontiguousarray(H[:, hoff[l - 1]:hoff[l - 1] + nin])
        gW = np.dot(G.T, h_in)
        k = poff[l]
        for a in range(nout):
            for c in range(nin):
                gp[k] = gW[a, c]
                k += 1
        for a in range(nout):
            s = 0.0
            for i in range(n):
                s += G[i, a]
            gp[k + a] = s
        Gin = np.dot(G, W)
        if l > 0:
            for i in range(n):
                for c in range(nin):
                    v = h_in[i, c]
                    Gin[i, c] *= 1.0 - v * v
        G = Gin
    return gp, G


@njit
def nb_mlp_vjp_input(p, sizes, X, H, G):
    n = X.shape[0]
    L = sizes.shape[0] - 1
    poff = np.zeros(L + 1, dtype=np.int64)
    hoff = np.zeros(L, dtype=np.int64)
    for l in range(L):
        poff[l + 1] = poff[l] + sizes[l] * sizes[l + 1] + sizes[l + 1]
        if l > 0:
            hoff[l] = hoff[l - 1] + sizes[l]
    G = np.ascontiguousarray(G)
    for l in range(L - 1, -1, -1):
        nin = sizes[l]
        nout = sizes[l + 1]
        W = p[poff[l]:poff[l] + nin * nout].reshape((nout, nin))
        Gin = np.dot(G, W)
        if l > 0:
            h0 = hoff[l - 1]
            for i in range(n):
                for c in range(nin):
                    v = H[i, h0 + c]
                    Gin[i, c] *= 1.0 - v * v
        G = Gin
    return G


@njit
def nb_mlp_jvp(p, sizes, X, H, V):
    n = X.shape[0]
    L = sizes.shape[0] - 1
    t = np.zeros((n, sizes[0]))
    off = 0
    hoff = 0
    h_in = np.ascontiguousarray(X)
    for l in range(L):
        nin = sizes[l]
        nout = sizes[l + 1]
        W = p[off:off + nin * nout].reshape((nout, nin))
        dW = V[off:off + nin * nout].reshape((nout, nin))
        off += nin * nout
        db = V[off:off + nout]
        off += nout
        dz = np.dot(t, W.T) + np.dot(h_in, dW.T)
        if l < L - 1:
            h_out = np.ascontiguousarray(H[:, hoff:hoff + nout])
            for i in range(n):
                for j in range(nout):
                    v = h_out[i, j]
                    dz[i, j] = (dz[i, j] + db[j]) * (1.0 - v * v)
            hoff += nout
            h_in = h_out
        else:
            for i in range(n):
                for j in range(nout):
                    dz[i, j] += db[j]
        t = dz
    return t


@njit
def nb_pgd_sqdiff(p, sizes, X, d, w, delta0, eps, step, iters, use_sign, squash, scale):
    n = X.shape[0]
    base, _ = nb_mlp_forward(p, sizes, X)
    m = base.shape[1]
    if squash:
        for i in range(n):
            for j in range(m):
                base[i, j] = scale[j] * np.tanh(base[i, j])
    delta = np.empty((n, d))
    for i in range(n):
        for k in range(d):
            delta[i, k] = min(max(delta0[i, k], -eps), eps)
    Xp = np.ascontiguousarray(X).copy()
    G = np.empty((n, m))
    for _ in range(iters):
        for i in range(n):
            for k in range(d):
                Xp[i, k] = X[i, k] + delta[i, k]
        out, H = nb_mlp_forward(p, sizes, Xp)
        for i in range(n):
            for j in range(m):
                if squash:
                    t = np.tanh(out[i, j])
                    G[i, j] = -2.0 * w[j] * (base[i, j] - scale[j] * t) * scale[j] * (1.0 - t * t)
                else:
                    G[i, j] = -2.0 * w[j] * (base[i, j] - out[i, j])
        gX = nb_mlp_vjp_input(p, sizes, Xp, H, G)
        for i in range(n):
            for k in range(d):
                g = gX[i, k]
                if use_sign:
                    g = np.sign(g)
                v = delta[i, k] + step * g
                delta[i, k] = min(max(v, -eps), eps)
    for i in range(n):
        for k in range(d):
            Xp[i, k] = X[i, k] + delta[i, k]
    out, _ = nb_mlp_forward(p, sizes, Xp)
    values = np.zeros(n)
    for i in range(n):
        for j in range(m):
            o = scale[j] * np.tanh(out[i, j]) if squash else out[i, j]
            r = base[i, j] - o
            values[i] += w[j] * r * r
    return delta, values



# ---------------------------------------------------------------------------
# dispatch


def _use_numba(n_rows, limit=None):
    if MODE == "auto":
        return limit is None or n_rows <= limit
    return MODE == "numba"


def _sizes(sizes):
    return np.ascontiguousarray(sizes, dtype=np.int64)


def _f64(a):
    return np.ascontiguousarray(a, dtype=np.float64)


def _tuple(sizes):
    return tuple(int(s) for s in sizes)


def mlp_forward(p, sizes, X):
    """Batched forward pass. Returns ``(outputs, hidden_activations)``."""
    if _use_numba(X.shape[0], SMALL_BATCH):
        return nb_mlp_forward(_f64(p), _sizes(sizes), _f64(X))
    return np_mlp_forward(p, _tuple(sizes), X)


def mlp_vjp(p, sizes, X, H, G):
    """Pull ``G`` (cotangent of outputs) back to ``(d params, d inputs)``."""
    if _use_numba(X.shape[0]):
        return nb_mlp_vjp(_f64(p), _sizes(sizes), _f64(X), _f64(H), _f64(G))
    return np_mlp_vjp(p, _tuple(sizes), X, H, G)


def mlp_vjp_input(p, sizes, X, H, G):
    """Like :func:`mlp_vjp` but only the input cotangent (skips weight grads)."""
    if _use_numba(X.shape[0]):
        return nb_mlp_vjp_input(_f64(p), _sizes(sizes), _f64(X), _f64(H), _f64(G))
    return np_mlp_vjp_input(p, _tuple(sizes), X, H, G)


def mlp_jvp(p, sizes, X, H, V):
    """Directional derivative of the outputs along parameter direction ``V``."""
    if _use_numba(X.shape[0]):
        return nb_mlp_jvp(_f64(p), _sizes(sizes), _f64(X), _f64(H), _f64(V))
    return np_mlp_jvp(p, _tuple(sizes), X, H, V)


def pgd_sqdiff(p, sizes, X, d, w, delta0, eps, step, iters, use_sign=True, scale=None):
    """Batched projected ascent; see :func:`np_pgd_sqdiff`."""
    if _use_numba(X.shape[0], PGD_BATCH):
        sc = np.ones(len(w)) if scale is None else _f64(scale)
        return nb_pgd_sqdiff(_f64(p), _sizes(sizes), _f64(X), int(d), _f64(w),
                             _f64(delta0), float(eps), float(step), int(iters),
                             bool(use_sign), scale is not None, sc)
    vjp = _nb_vjp_input if MODE == "auto" else None
    return np_pgd_sqdiff(p, _tuple(sizes), X, int(d), w, delta0, float(eps),
                         float(step), int(iters), use_sign, scale, vjp)


def _nb_vjp_input(p, sizes, X, H, G):
    return nb_mlp_vjp_input(_f64(p), _sizes(sizes), _f64(X), _f64(H), _f64(G))
