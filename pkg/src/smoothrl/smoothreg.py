"""Adversarial smoothness regularizers.

Each regularizer is the mean, over a batch of states, of the largest output
change a network shows inside an l-infinity ball around the state:

* stochastic policy: Jeffrey divergence between ``pi(.|s)`` and ``pi(.|s~)``;
* deterministic policy: ``||mu(s) - mu(s~)||^2``;
* Q-function: ``(Q(s, a) - Q(s~, a))^2`` with the action held fixed.

The worst-case ``s~`` comes from projected gradient ascent.  Gradients with
respect to the network parameters treat ``s~`` as a constant (the envelope
theorem makes this the gradient of the max when the maximizer is unique).
"""

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import kernels
from .policy import jeffrey


@dataclass(frozen=True)
class PerturbationBall:
    epsilon: float
    metric: str = "linf"

    def __post_init__(self):
        if self.epsilon < 0:
            raise ValueError("epsilon must be nonnegative")
        if self.metric != "linf":
            raise ValueError("only the l-infinity ball is supported")

    def contains(self, delta):
        return bool(np.max(np.abs(delta), initial=0.0) <= self.epsilon)

    def project(self, delta):
        return project_linf(delta, self.epsilon)


@dataclass(frozen=True)
class AdversaryConfig:
    """Inner ascent settings.

    ``step_size=None`` means ``0.2 * epsilon``.  ``init="random"`` runs
    ``restarts`` uniform starts; ``init="zero"`` runs a zero start followed by
    ``restarts - 1`` uniform starts.  ``ascent="sign"`` steps along the sign
    of the gradient (steepest ascent in the l-infinity geometry);
    ``"gradient"`` uses the raw gradient.
    """

    steps: int = 10
    step_size: float | None = None
    init: str = "random"
    restarts: int = 1
    ascent: str = "sign"

    def __post_init__(self):
        if self.steps < 0:
            raise ValueError("steps must be nonnegative")
        if self.restarts < 1:
            raise ValueError("restarts must be at least 1")
        if self.init not in ("random", "zero"):
            raise ValueError(f"unknown adversary init {self.init!r}")
        if self.ascent not in ("sign", "gradient"):
            raise ValueError(f"unknown ascent rule {self.ascent!r}")
        if self.step_size is not None and self.step_size <= 0:
            raise ValueError("step_size must be positive")

    def step_for(self, eps):
        return 0.2 * eps if self.step_size is None else self.step_size


def project_linf(delta, eps):
    return np.clip(delta, -eps, eps)


def _attack(net, X, d, w, ball, cfg, rng, scale=None):
    """Best-of-restarts PGD on the squared weighted output difference.

    ``X`` rows are network inputs; only the first ``d`` columns move.
    Returns ``(delta, values)`` per row.
    """
    n = X.shape[0]
    eps = float(ball.epsilon)
    if eps == 0.0 or n == 0:
        return np.zeros((n, d)), np.zeros(n)
    step = cfg.step_for(eps)
    use_sign = cfg.ascent == "sign"
    best_delta = None
    best_val = None
    for r in range(cfg.restarts):
        if r == 0 and cfg.init == "zero":
            delta0 = np.zeros((n, d))
        else:
            delta0 = rng.uniform(-eps, eps, size=(n, d))
        delta, val = kernels.pgd_sqdiff(net.params, net.sizes, X, d, w, delta0,
                                        eps, step, cfg.steps, use_sign, scale)
        if best_val is None:
            best_delta, best_val = delta, val
        else:
            better = val > best_val
            best_delta = np.where(better[:, None], delta, best_delta)
            best_val = np.where(better, val, best_val)
    return best_delta, best_val


def _rows(s):
    s = np.asarray(s, dtype=np.float64)
    return s[None, :] if s.ndim == 1 else s, s.ndim == 1


def inner_max_policy(policy, s, ball, cfg=AdversaryConfig(), rng=None):
    """Perturbed state(s) maximizing the Jeffrey divergence of a Gaussian policy.

    Returns ``(s_tilde, divergence)``; both follow the shape of ``s``.
    """
    S, single = _rows(s)
    w = 1.0 / (2.0 * policy.std ** 2)
    delta, _ = _attack(policy.mean_net, S, S.shape[1], w, ball, cfg, rng)
    S_t = S + delta
    std = policy.std
    div = jeffrey((policy.mean(S), std), (policy.mean(S_t), std))
    if single:
        return S_t[0], float(div[0])
    return S_t, div


def inner_max_deterministic(policy, s, ball, cfg=AdversaryConfig(), rng=None):
    """Perturbed state(s) maximizing ``||mu(s) - mu(s~)||^2`` over actions."""
    S, single = _rows(s)
    w = np.ones(policy.act_dim)
    delta, _ = _attack(policy.net, S, S.shape[1], w, ball, cfg, rng, policy.half_width)
    S_t = S + delta
    val = np.sum((policy.act(S) - policy.act(S_t)) ** 2, axis=-1)
    if single:
        return S_t[0], float(val[0])
    return S_t, val


def inner_max_q(q, s, a, ball, cfg=AdversaryConfig(), rng=None):
    """Perturbed state(s) maximizing ``(Q(s, a) - Q(s~, a))^2`` for fixed ``a``."""
    S, single = _rows(s)
    A, _ = _rows(a)
    X = np.hstack([S, A])
    delta, _ = _attack(q.net, X, S.shape[1], np.ones(1), ball, cfg, rng)
    S_t = S + delta
    val = (q.value(S, A) - q.value(S_t, A)) ** 2
    if single:
        return S_t[0], float(val[0])
    return S_t, val


def _weighted_mean(values, weights):
    if weights is None:
        return ad.mean(values)
    weights = np.asarray(weights, dtype=np.float64)
    return ad.sum(values * weights) * (1.0 / weights.sum())


def _nonempty(states):
    if np.shape(states)[0] == 0:
        raise ValueError("regularizer needs a nonempty batch of states")


def reg_policy(policy, states, ball, cfg=AdversaryConfig(), rng=None, weights=None,
               s_tilde=None):
    """Jeffrey smoothness regularizer of a Gaussian policy and its gradient.

    The gradient is over ``policy.get_flat()`` (mean-net params, then
    log_std).  ``weights`` (e.g. discount powers) give a weighted mean.  When
    ``s_tilde`` is given the adversary is skipped.  Returns
    ``(value, grad, s_tilde)``.
    """
    S, _ = _rows(states)
    _nonempty(S)
    if s_tilde is None:
        s_tilde, _ = inner_max_policy(policy, S, ball, cfg, rng)
    tape = ad.Tape()
    mp, ls = policy.bind(tape)
    std = ad.exp(ls)
    net = policy.mean_net
    d = jeffrey((net(S, params=mp), std), (net(s_tilde, params=mp), std))
    value = _weighted_mean(d, weights)
    return float(value.value), tape.grad_params(value), s_tilde


def reg_policy_value(policy, states, s_tilde, weights=None):
    std = policy.std
    d = jeffrey((policy.mean(states), std), (policy.mean(s_tilde), std))
    return float(_weighted_mean(d, weights))


def reg_deterministic(policy, states, ball, cfg=AdversaryConfig(), rng=None, s_tilde=None):
    """Squared-l2 smoothness regularizer of a deterministic policy.

    Gradient is over ``policy.net.params``.  Returns ``(value, grad, s_tilde)``.
    """
    S, _ = _rows(states)
    _nonempty(S)
    if s_tilde is None:
        s_tilde, _ = inner_max_deterministic(policy, S, ball, cfg, rng)
    tape = ad.Tape()
    p = tape.param(policy.net.params)
    diff = policy.squash(policy.net(S, params=p)) - policy.squash(policy.net(s_tilde, params=p))
    value = ad.mean(ad.sum(ad.square(diff), axis=-1))
    return float(value.value), tape.grad_params(value), s_tilde


def reg_q(q, states, actions, ball, cfg=AdversaryConfig(), rng=None, s_tilde=None):
    """Squared Q-difference smoothness regularizer of a critic.

    Gradient is over ``q.net.params``.  Returns ``(value, grad, s_tilde)``.
    """
    S, _ = _rows(states)
    A, _ = _rows(actions)
    _nonempty(S)
    if s_tilde is None:
        s_tilde, _ = inner_max_q(q, S, A, ball, cfg, rng)
    tape = ad.Tape()
    p = tape.param(q.net.params)
    q0 = q.net(np.hstack([S, A]), params=p)
    q1 = q.net(np.hstack([s_tilde, A]), params=p)
    value = ad.mean(ad.square(q0 - q1))
    return float(value.value), tape.grad_params(value), s_tilde
