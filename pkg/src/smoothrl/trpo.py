"""On-policy training: TRPO and TRPO with the smoothness regularizer.

Two update rules are available:

* ``trust-region``: natural-gradient step on the regularized surrogate,
  scaled to the KL radius and backtracked until the mean KL stays within
  ``max_kl`` and the regularized surrogate improves;
* ``alg1``: a single plain gradient step ``theta += lr * (g_surr - lam * g_reg)``.
"""

import logging
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .policy import GaussianPolicy, ValueBaseline, gaussian_log_prob, kl_gaussian
from .smoothreg import AdversaryConfig, PerturbationBall, reg_policy, reg_policy_value

log = logging.getLogger(__name__)


@dataclass
class Trajectory:
    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    log_probs: np.ndarray
    t: np.ndarray

    def __len__(self):
        return len(self.rewards)


@dataclass
class TrpoConfig:
    max_kl: float = 0.01
    gamma: float = 0.99
    batch_steps: int = 1000
    lambda_s: float = 0.0
    epsilon: float = 0.01
    adversary: AdversaryConfig = field(default_factory=AdversaryConfig)
    mode: str = "trust-region"
    lr_theta: float = 0.01
    cg_iters: int = 10
    cg_damping: float = 0.1
    backtracks: int = 10
    hidden: tuple = (64, 64)
    init_log_std: float = 0.0
    baseline_ridge: float = 1e-5

    def __post_init__(self):
        if self.max_kl <= 0:
            raise ValueError("max_kl must be positive")
        if not 0 < self.gamma < 1:
            raise ValueError("gamma must lie in (0, 1)")
        if self.lambda_s < 0:
            raise ValueError("lambda_s must be nonnegative")
        if self.mode not in ("trust-region", "alg1"):
            raise ValueError(f"unknown TRPO mode {self.mode!r}")


@dataclass
class Batch:
    """Flattened trajectories of one iteration."""

    states: np.ndarray
    actions: np.ndarray
    log_probs: np.ndarray
    t: np.ndarray
    returns: np.ndarray
    episode_returns: np.ndarray


def collect(env, policy, steps, rng):
    """Sample whole episodes with ``policy`` until at least ``steps`` steps.

    Episodes are cut at ``env.horizon`` (or earlier on a terminal state) and
    run side by side in batches of ``ceil(remaining / horizon)``.
    """
    if steps <= 0:
        raise ValueError("steps must be positive")
    trajs = []
    total = 0
    while total < steps:
        n = -(-(steps - total) // env.horizon)
        obs = env.reset(n, rng)
        length = np.full(n, env.horizon)
        alive = np.ones(n, dtype=bool)
        S, A, R, LP = [], [], [], []
        for t in range(env.horizon):
            a = policy.sample(obs, rng)
            S.append(obs)
            A.append(a)
            LP.append(policy.log_prob(obs, a))
            obs, r, done = env.step(a)
            R.append(r)
            ended = alive & done
            length[ended] = t + 1
            alive &= ~done
            if not alive.any():
                break
        S, A, R, LP = (np.stack(x, axis=1) for x in (S, A, R, LP))
        for i in range(n):
            k = length[i]
            trajs.append(Trajectory(S[i, :k], A[i, :k], R[i, :k], LP[i, :k], np.arange(k)))
            total += k
    return trajs


def discounted_returns(rewards, gamma):
    """Reward-to-go ``R_t = r_t + gamma R_{t+1}``."""
    rewards = np.asarray(rewards, dtype=np.float64)
    out = np.empty_like(rewards)
    acc = 0.0
    for t in range(len(rewards) - 1, -1, -1):
        acc = rewards[t] + gamma * acc
        out[t] = acc
    return out


def make_batch(trajs, gamma):
    return Batch(
        states=np.concatenate([tr.states for tr in trajs]),
        actions=np.concatenate([tr.actions for tr in trajs]),
        log_probs=np.concatenate([tr.log_probs for tr in trajs]),
        t=np.concatenate([tr.t for tr in trajs]),
        returns=np.concatenate([discounted_returns(tr.rewards, gamma) for tr in trajs]),
        episode_returns=np.array([tr.rewards.sum() for tr in trajs]),
    )


def advantages(batch, baseline, standardize_adv=True, refit=True):
    """Returns minus the baseline prediction, optionally standardized.

    The prediction uses the baseline's current coefficients; the baseline is
    refit on this batch's returns afterwards (``refit=True``).
    """
    adv = batch.returns - baseline.predict(batch.states, batch.t)
    if refit:
        baseline.fit(batch.states, batch.t, batch.returns)
    if standardize_adv:
        sd = adv.std()
        adv = adv - adv.mean()
        if sd >= 1e-8:
            adv = adv / sd
    return adv


def _surrogate(policy, batch, adv, tape=None):
    if tape is None:
        lp = policy.log_prob(batch.states, batch.actions)
        return float(np.mean(np.exp(lp - batch.log_probs) * adv))
    mp, ls = policy.bind(tape)
    mean = policy.mean_net(batch.states, params=mp)
    lp = gaussian_log_prob(mean, ls, batch.actions)
    return ad.mean(ad.exp(lp - batch.log_probs) * adv)


def surrogate_value(policy, batch, adv):
    """Mean importance-weighted advantage under the current parameters."""
    return _surrogate(policy, batch, adv)


def surrogate_grad(policy, batch, adv):
    """Gradient of :func:`surrogate_value` over ``policy.get_flat()``."""
    if len(adv) == 0:
        raise ValueError("empty batch")
    tape = ad.Tape()
    return tape.grad_params(_surrogate(policy, batch, adv, tape))


def mean_kl(old_mean, old_std, policy, states):
    """Mean over states of KL(old || policy)."""
    return float(np.mean(kl_gaussian((old_mean, old_std), (policy.mean(states), policy.std))))


def fisher_vec(policy, states, v, damping=0.0, cache=None):
    """Hessian of the mean KL(pi_k || pi_theta) at theta = theta_k, times ``v``.

    For a diagonal Gaussian with state-independent std this is
    ``J^T diag(1/std^2) J / N`` on the mean-net block and ``2 I`` on the
    log-std block (the cross block vanishes at theta_k).  ``J v`` comes from
    a forward-mode pass and ``J^T`` from a reverse pass through the network.
    """
    net = policy.mean_net
    n = net.n_params
    if cache is None:
        cache = net.forward_cache(states)
    _, H = cache
    Jv = net.jvp(states, H, v[:n])
    G = Jv / policy.std ** 2 / states.shape[0]
    gp, _ = net.vjp(states, H, G)
    return np.concatenate([gp, 2.0 * v[n:]]) + damping * v


def conjugate_gradient(Avp, b, iters=10, tol=1e-10):
    """Solve ``A x = b`` for symmetric positive definite ``A`` given ``x -> A x``."""
    x = np.zeros_like(b)
    r = b.copy()
    p = r.copy()
    rr = r @ r
    for _ in range(iters):
        if np.sqrt(rr) <= tol:
            break
        Ap = Avp(p)
        pAp = p @ Ap
        if not np.isfinite(pAp) or pAp <= 0:
            break
        alpha = rr / pAp
        x += alpha * p
        r -= alpha * Ap
        rr_new = r @ r
        p = r + (rr_new / rr) * p
        rr = rr_new
    return x


@dataclass
class UpdateInfo:
    accepted: bool
    mean_kl: float
    surrogate: float
    reg_value: float
    adv_div: float


def trpo_sr_update(policy, batch, adv, config, rng=None):
    """One policy update in place; returns :class:`UpdateInfo`.

    With ``lambda_s == 0`` the adversary is never run and no random numbers
    are drawn, so the update coincides with plain TRPO.
    """
    theta_k = policy.get_flat()
    states = batch.states
    mean_k = policy.mean(states)
    std_k = policy.std.copy()
    lam = config.lambda_s
    g = surrogate_grad(policy, batch, adv)
    reg_value = adv_div = 0.0
    s_tilde = weights = None
    if lam > 0:
        weights = config.gamma ** batch.t
        ball = PerturbationBall(config.epsilon)
        reg_value, g_reg, s_tilde = reg_policy(policy, states, ball, config.adversary, rng,
                                               weights=weights)
        adv_div = reg_policy_value(policy, states, s_tilde)
        g = g - lam * g_reg
    surr_k = float(np.mean(adv))
    if not np.all(np.isfinite(g)):
        log.warning("non-finite policy gradient; skipping update")
        return UpdateInfo(False, 0.0, surr_k, reg_value, adv_div)

    def objective():
        val = surrogate_value(policy, batch, adv)
        if lam > 0:
            val -= lam * reg_policy_value(policy, states, s_tilde, weights)
        return val

    if config.mode == "alg1":
        policy.set_flat(theta_k + config.lr_theta * g)
        kl = mean_kl(mean_k, std_k, policy, states)
        return UpdateInfo(True, kl, surrogate_value(policy, batch, adv), reg_value, adv_div)

    cache = policy.mean_net.forward_cache(states)
    Fv = lambda v: fisher_vec(policy, states, v, config.cg_damping, cache)  # noqa: E731
    x = conjugate_gradient(Fv, g, config.cg_iters)
    xFx = x @ Fv(x)
    if not np.all(np.isfinite(x)) or not np.isfinite(xFx) or xFx <= 0:
        log.warning("conjugate gradient produced an unusable direction; skipping update")
        return UpdateInfo(False, 0.0, surr_k, reg_value, adv_div)
    full_step = np.sqrt(2.0 * config.max_kl / xFx) * x
    obj_k = surr_k - (lam * reg_value if lam > 0 else 0.0)
    frac = 1.0
    for _ in range(config.backtracks):
        policy.set_flat(theta_k + frac * full_step)
        kl = mean_kl(mean_k, std_k, policy, states)
        if np.isfinite(kl) and kl <= config.max_kl:
            obj = objective()
            if np.isfinite(obj) and obj > obj_k:
                return UpdateInfo(True, kl, surrogate_value(policy, batch, adv), reg_value, adv_div)
        frac *= 0.5
    policy.set_flat(theta_k)
    return UpdateInfo(False, 0.0, surr_k, reg_value, adv_div)


def evaluate(env, policy, episodes, rng, stochastic=True, wrapper=None):
    """Undiscounted returns of ``episodes`` rollouts run side by side."""
    e = env if wrapper is None else wrapper
    obs = e.reset(episodes, rng)
    total = np.zeros(episodes)
    alive = np.ones(episodes, dtype=bool)
    for _ in range(env.horizon):
        if isinstance(policy, GaussianPolicy):
            a = policy.sample(obs, rng) if stochastic else policy.mean(obs)
        else:
            a = policy.act(obs)
        obs, r, done = e.step(a)
        total += np.where(alive, r, 0.0)
        alive &= ~done
        if not alive.any():
            break
    return total


class TrpoTrainer:
    """Owns a Gaussian policy, its baseline, and the per-run random streams."""

    def __init__(self, env, config, rngs):
        self.env = env
        self.config = config
        self.rngs = rngs
        self.policy = GaussianPolicy.init(env.obs_dim, env.act_dim, config.hidden,
                                          rngs["init"], config.init_log_std)
        self.baseline = ValueBaseline(env.obs_dim, env.horizon, config.baseline_ridge)

    def step(self):
        cfg = self.config
        trajs = collect(self.env, self.policy, cfg.batch_steps, self.rngs["rollout"])
        batch = make_batch(trajs, cfg.gamma)
        adv = advantages(batch, self.baseline)
        info = trpo_sr_update(self.policy, batch, adv, cfg, self.rngs["adversary"])
        return batch, info
