"""Policy and value heads plus closed-form Gaussian divergences.

The divergence helpers accept plain arrays or tape Vars interchangeably, so
the same formula is used for evaluation and for differentiation.
"""

import numpy as np

from . import autodiff as ad
from .autodiff import Mlp

LOG_2PI = float(np.log(2.0 * np.pi))


def _check_std(*stds):
    for s in stds:
        v = s.value if isinstance(s, ad.Var) else s
        if np.any(np.asarray(v) <= 0):
            raise ValueError("standard deviations must be positive")


def gaussian_log_prob(mean, log_std, a):
    """Log-density of a diagonal Gaussian, summed over the last axis."""
    z = (a - mean) * ad.exp(-log_std)
    return ad.sum(-0.5 * LOG_2PI - log_std - 0.5 * ad.square(z), axis=-1)


def kl_gaussian(p, q):
    """KL(p || q) for diagonal Gaussians given as ``(mean, std)`` pairs.

    Sums over the last axis, so batched means give one value per row.
    """
    mu1, s1 = p
    mu2, s2 = q
    _check_std(s1, s2)
    var2 = ad.square(s2)
    terms = ad.log(s2 / s1) + (ad.square(s1) + ad.square(mu1 - mu2)) / (2.0 * var2) - 0.5
    return ad.sum(terms, axis=-1)


def jeffrey(p, q):
    """Symmetrized KL: ``0.5 KL(p||q) + 0.5 KL(q||p)``."""
    return 0.5 * kl_gaussian(p, q) + 0.5 * kl_gaussian(q, p)


class GaussianPolicy:
    """``a ~ N(mean_net(s), diag(exp(log_std)**2))`` with a state-independent std."""

    def __init__(self, mean_net, log_std):
        self.mean_net = mean_net
        self.log_std = np.array(log_std, dtype=np.float64)
        if self.log_std.shape != (mean_net.out_dim,):
            raise ValueError("log_std length must equal the action dimension")

    @classmethod
    def init(cls, obs_dim, act_dim, hidden, rng, init_log_std=0.0):
        net = Mlp.init((obs_dim, *hidden, act_dim), rng)
        return cls(net, np.full(act_dim, float(init_log_std)))

    @property
    def obs_dim(self):
        return self.mean_net.in_dim

    @property
    def act_dim(self):
        return self.mean_net.out_dim

    @property
    def std(self):
        return np.exp(self.log_std)

    @property
    def n_params(self):
        return self.mean_net.n_params + self.log_std.size

    def get_flat(self):
        return np.concatenate([self.mean_net.params, self.log_std])

    def set_flat(self, theta):
        n = self.mean_net.n_params
        self.mean_net.params[...] = theta[:n]
        self.log_std[...] = theta[n:]

    def copy(self):
        return GaussianPolicy(self.mean_net.copy(), self.log_std.copy())

    def mean(self, s):
        return self.mean_net(s)

    def sample(self, s, rng):
        return gauss_sample(self, s, rng)

    def log_prob(self, s, a):
        return gaussian_log_prob(self.mean(s), self.log_std, a)

    def bind(self, tape):
        """Register parameters on ``tape``; returns ``(mean_params, log_std)`` Vars."""
        return tape.param(self.mean_net.params), tape.param(self.log_std)

    def to_text(self):
        return self.mean_net.to_text() + "logstd " + ad._fmt(self.log_std) + "\n"


def gauss_sample(policy, s, rng):
    mu = policy.mean(s)
    return mu + policy.std * rng.standard_normal(np.shape(mu))


def log_prob(policy, s, a):
    return policy.log_prob(s, a)


class DeterministicPolicy:
    """``mu(s) = center + half_width * tanh(net(s))`` inside finite action bounds.

    With infinite bounds the network output is used as is.
    """

    def __init__(self, net, low, high):
        self.net = net
        self.low = np.array(low, dtype=np.float64).reshape(-1)
        self.high = np.array(high, dtype=np.float64).reshape(-1)
        if self.low.shape != (net.out_dim,) or self.high.shape != (net.out_dim,):
            raise ValueError("action bounds must match the action dimension")
        if np.any(self.low >= self.high):
            raise ValueError("action bounds must satisfy low < high")

    @classmethod
    def init(cls, obs_dim, act_dim, hidden, rng, low, high):
        return cls(Mlp.init((obs_dim, *hidden, act_dim), rng), low, high)

    @property
    def obs_dim(self):
        return self.net.in_dim

    @property
    def act_dim(self):
        return self.net.out_dim

    @property
    def squashed(self):
        return bool(np.all(np.isfinite(self.low)) and np.all(np.isfinite(self.high)))

    @property
    def center(self):
        return 0.5 * (self.low + self.high) if self.squashed else np.zeros(self.act_dim)

    @property
    def half_width(self):
        return 0.5 * (self.high - self.low) if self.squashed else None

    def raw(self, s):
        return self.net(s)

    def squash(self, raw):
        """Map network outputs to actions; accepts arrays or tape Vars."""
        if not self.squashed:
            return raw
        return self.center + self.half_width * ad.tanh(raw)

    def act(self, s):
        return self.squash(self.net(s))

    def copy(self):
        return DeterministicPolicy(self.net.copy(), self.low, self.high)

    def to_text(self):
        return self.net.to_text()


class QNet:
    """State-action value network on ``concat(s, a)``."""

    def __init__(self, net, obs_dim):
        if net.out_dim != 1:
            raise ValueError("Q network must have a scalar output")
        self.net = net
        self.obs_dim = int(obs_dim)

    @classmethod
    def init(cls, obs_dim, act_dim, hidden, rng):
        return cls(Mlp.init((obs_dim + act_dim, *hidden, 1), rng), obs_dim)

    @property
    def act_dim(self):
        return self.net.in_dim - self.obs_dim

    def value(self, s, a):
        x = ad.concat([s, a], axis=-1)
        out = self.net(x)
        return out[..., 0]

    def copy(self):
        return QNet(self.net.copy(), self.obs_dim)

    def to_text(self):
        return self.net.to_text()


def load_policy(text, low=None, high=None):
    """Parse a policy file: Gaussian when a ``logstd`` line follows the net."""
    lines = [ln for ln in text.splitlines() if ln.strip()]
    it = iter(lines)
    net = Mlp.from_lines(it)
    rest = list(it)
    if rest:
        head = rest[0].split()
        if head[0] != "logstd" or len(rest) > 1:
            raise ValueError("unexpected trailing content in policy file")
        return GaussianPolicy(net, np.array([float(v) for v in head[1:]]))
    if low is None:
        low, high = -np.inf, np.inf
    low = np.broadcast_to(low, (net.out_dim,))
    high = np.broadcast_to(high, (net.out_dim,))
    return DeterministicPolicy(net, low, high)


class ValueBaseline:
    """Ridge regression of returns on fixed state/time features.

    Features per step: ``s, s**2, t/T, (t/T)**2, (t/T)**3, 1``.
    """

    def __init__(self, obs_dim, horizon, ridge=1e-5):
        self.obs_dim = int(obs_dim)
        self.horizon = int(horizon)
        self.ridge = float(ridge)
        self.coef = np.zeros(2 * self.obs_dim + 4)

    def features(self, states, t):
        states = np.atleast_2d(states)
        u = np.asarray(t, dtype=np.float64).reshape(-1, 1) / self.horizon
        ones = np.ones_like(u)
        return np.hstack([states, states ** 2, u, u ** 2, u ** 3, ones])

    def predict(self, states, t):
        return self.features(states, t) @ self.coef

    def fit(self, states, t, returns):
        return fit_baseline(self, states, t, returns)


def fit_baseline(b, states, t, returns, max_tries=8):
    """Refit ``b.coef`` in place; bumps the ridge tenfold when the solve fails."""
    phi = b.features(states, t)
    y = np.asarray(returns, dtype=np.float64)
    A = phi.T @ phi
    rhs = phi.T @ y
    ridge = b.ridge
    for _ in range(max_tries):
        try:
            c = np.linalg.solve(A + ridge * np.eye(A.shape[0]), rhs)
        except np.linalg.LinAlgError:
            c = None
        if c is not None and np.all(np.isfinite(c)):
            b.coef = c
            return c
        ridge = max(ridge * 10.0, 1e-8)
    raise np.linalg.LinAlgError("baseline normal equations stayed singular")
