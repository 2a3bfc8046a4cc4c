"""Off-policy training: DDPG and its actor/critic smoothness-regularized variants.

Variants:

* ``none``  -- plain DDPG;
* ``sr-a``  -- actor objective ``mean Q(s, mu(s)) - lam * mean ||mu(s) - mu(s^)||^2``;
* ``sr-c``  -- critic loss ``mean (y - Q(s,a))^2 + lam * mean (Q(s,a) - Q(s^,a))^2``.

``s^`` is the adversarial state from :mod:`smoothrl.smoothreg`, frozen while
differentiating.  Gradients are assembled from the fused MLP forward/VJP
kernels; the tape-based route in the tests checks them.
"""

import logging
from dataclasses import dataclass, field

import numpy as np

from .policy import DeterministicPolicy, QNet
from .smoothreg import AdversaryConfig, PerturbationBall, inner_max_deterministic, inner_max_q

log = logging.getLogger(__name__)


@dataclass
class Transition:
    s: np.ndarray
    a: np.ndarray
    r: float
    s2: np.ndarray
    done: bool = False


@dataclass
class Minibatch:
    s: np.ndarray
    a: np.ndarray
    r: np.ndarray
    s2: np.ndarray
    done: np.ndarray

    def __len__(self):
        return len(self.r)


class ReplayBuffer:
    """Fixed-capacity FIFO ring of transitions."""

    def __init__(self, capacity, obs_dim, act_dim):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = int(capacity)
        self.s = np.zeros((capacity, obs_dim))
        self.a = np.zeros((capacity, act_dim))
        self.r = np.zeros(capacity)
        self.s2 = np.zeros((capacity, obs_dim))
        self.done = np.zeros(capacity)
        self.cursor = 0
        self.size = 0

    def __len__(self):
        return self.size

    def push(self, t):
        if not np.isfinite(t.r):
            raise ValueError("reward must be finite")
        i = self.cursor
        self.s[i] = t.s
        self.a[i] = t.a
        self.r[i] = t.r
        self.s2[i] = t.s2
        self.done[i] = float(t.done)
        self.cursor = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def _ordered(self):
        start = self.cursor if self.size == self.capacity else 0
        return (start + np.arange(self.size)) % self.capacity

    def contents(self):
        """Stored transitions, oldest first."""
        return [Transition(self.s[i].copy(), self.a[i].copy(), float(self.r[i]),
                           self.s2[i].copy(), bool(self.done[i])) for i in self._ordered()]

    def sample(self, n, rng):
        """Uniform sample of ``n`` stored transitions, with replacement."""
        if self.size < n:
            raise ValueError(f"buffer holds {self.size} transitions, {n} requested")
        idx = rng.integers(0, self.size, size=n)
        return Minibatch(self.s[idx], self.a[idx], self.r[idx], self.s2[idx], self.done[idx])


def buffer_push(buf, t):
    buf.push(t)


def buffer_sample(buf, n, rng):
    return buf.sample(n, rng)


@dataclass
class DdpgConfig:
    gamma: float = 0.99
    tau: float = 0.01
    actor_lr: float = 1e-5
    critic_lr: float = 1e-3
    batch_size: int = 64
    buffer_size: int = 100_000
    noise_std: float = 0.3
    noise_final: float = 0.01
    lambda_s: float = 0.0
    epsilon: float = 0.01
    adversary: AdversaryConfig = field(default_factory=AdversaryConfig)
    variant: str = "none"
    warmup: int = 5000
    hidden: tuple = (64, 64)
    optimizer: str = "adam"

    def __post_init__(self):
        if not 0 < self.tau <= 1:
            raise ValueError("tau must lie in (0, 1]")
        if self.lambda_s < 0:
            raise ValueError("lambda_s must be nonnegative")
        if self.variant not in ("none", "sr-a", "sr-c"):
            raise ValueError(f"unknown DDPG variant {self.variant!r}")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")

    @property
    def warmup_steps(self):
        return max(self.warmup, 10 * self.batch_size)


def critic_target(batch, target_q, target_policy, gamma):
    """``y = r + gamma * (1 - done) * Q'(s', mu'(s'))``."""
    a2 = target_policy.act(batch.s2)
    q2 = target_q.value(batch.s2, a2)
    return batch.r + gamma * (1.0 - batch.done) * q2


def critic_loss_grad(q, batch, y, lam=0.0, s_hat=None):
    """Loss ``mean (y - Q)^2 [+ lam * mean (Q(s,a) - Q(s^,a))^2]`` and its gradient."""
    n = len(batch)
    X = np.hstack([batch.s, batch.a])
    if lam > 0:
        X = np.vstack([X, np.hstack([s_hat, batch.a])])
    out, H = q.net.forward_cache(X)
    out = out[:, 0]
    q0 = out[:n]
    err = q0 - y
    loss = np.mean(err ** 2)
    G = np.zeros_like(out)
    G[:n] = 2.0 * err / n
    if lam > 0:
        dq = q0 - out[n:]
        loss += lam * np.mean(dq ** 2)
        G[:n] += 2.0 * lam * dq / n
        G[n:] = -2.0 * lam * dq / n
    grad, _ = q.net.vjp(X, H, G[:, None])
    return float(loss), grad


def actor_objective_grad(policy, q, states, lam=0.0, s_hat=None):
    """Objective ``mean Q(s, mu(s)) [- lam * mean ||mu(s) - mu(s^)||^2]`` and its gradient.

    Critic parameters are held fixed; the gradient flows through the critic's
    action input and the policy's output squashing into the actor network.
    """
    n = states.shape[0]
    X = states if lam <= 0 else np.vstack([states, s_hat])
    raw, Ha = policy.net.forward_cache(X)
    A = policy.squash(raw)
    Qin = np.hstack([states, A[:n]])
    qo, Hq = q.net.forward_cache(Qin)
    obj = float(np.mean(qo))
    gin = q.net.vjp_input(Qin, Hq, np.full((n, 1), 1.0 / n))
    GA = np.zeros_like(A)
    GA[:n] = gin[:, q.obs_dim:]
    if lam > 0:
        diff = A[:n] - A[n:]
        obj -= lam * float(np.mean(np.sum(diff ** 2, axis=1)))
        GA[:n] -= 2.0 * lam * diff / n
        GA[n:] = 2.0 * lam * diff / n
    if policy.squashed:
        GA = GA * (policy.half_width - (A - policy.center) ** 2 / policy.half_width)
    grad, _ = policy.net.vjp(X, Ha, GA)
    return obj, grad


class Adam:
    def __init__(self, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, beta1, beta2, eps
        self.m = self.v = None
        self.k = 0

    def direction(self, g):
        if self.m is None:
            self.m = np.zeros_like(g)
            self.v = np.zeros_like(g)
        self.k += 1
        self.m = self.b1 * self.m + (1 - self.b1) * g
        self.v = self.b2 * self.v + (1 - self.b2) * g * g
        mh = self.m / (1 - self.b1 ** self.k)
        vh = self.v / (1 - self.b2 ** self.k)
        return self.lr * mh / (np.sqrt(vh) + self.eps)


class Sgd:
    def __init__(self, lr):
        self.lr = lr

    def direction(self, g):
        return self.lr * g


def _optimizer(kind, lr):
    return Adam(lr) if kind == "adam" else Sgd(lr)


def critic_update(q, batch, y, config, s_hat=None, opt=None):
    """One descent step on the (regularized) critic loss; returns the pre-step loss."""
    lam = config.lambda_s if config.variant == "sr-c" else 0.0
    loss, grad = critic_loss_grad(q, batch, y, lam, s_hat)
    if not np.isfinite(loss) or not np.all(np.isfinite(grad)):
        log.warning("non-finite critic loss; skipping step")
        return loss
    opt = opt or Sgd(config.critic_lr)
    q.net.params -= opt.direction(grad)
    return loss


def actor_update(policy, q, batch, config, s_hat=None, opt=None):
    """One ascent step on the (regularized) actor objective; returns the pre-step value."""
    lam = config.lambda_s if config.variant == "sr-a" else 0.0
    obj, grad = actor_objective_grad(policy, q, batch.s, lam, s_hat)
    if not np.isfinite(obj) or not np.all(np.isfinite(grad)):
        log.warning("non-finite actor objective; skipping step")
        return obj
    opt = opt or Sgd(config.actor_lr)
    policy.net.params += opt.direction(grad)
    return obj


def polyak(target, source, tau):
    """In-place ``target <- tau * source + (1 - tau) * target`` on parameter arrays."""
    if not 0 < tau <= 1:
        raise ValueError("tau must lie in (0, 1]")
    target *= 1.0 - tau
    target += tau * source
    return target


class DdpgTrainer:
    """Actor, critic, their targets, the buffer, and one run's random streams."""

    def __init__(self, env, config, rngs, total_steps):
        self.env = env
        self.config = config
        self.rngs = rngs
        self.total_steps = int(total_steps)
        low, high = env.action_low, env.action_high
        self.actor = DeterministicPolicy.init(env.obs_dim, env.act_dim, config.hidden,
                                              rngs["init"], low, high)
        self.critic = QNet.init(env.obs_dim, env.act_dim, config.hidden, rngs["init"])
        self.actor_t = self.actor.copy()
        self.critic_t = self.critic.copy()
        self.buffer = ReplayBuffer(config.buffer_size, env.obs_dim, env.act_dim)
        self.actor_opt = _optimizer(config.optimizer, config.actor_lr)
        self.critic_opt = _optimizer(config.optimizer, config.critic_lr)
        self.ball = PerturbationBall(config.epsilon)
        self.steps = 0
        self.obs = None
        self.t_ep = 0
        self.reg_values = []

    def noise_scale(self):
        cfg = self.config
        frac = min(self.steps / max(self.total_steps, 1), 1.0)
        rng_width = self.env.action_high - self.env.action_low
        return (cfg.noise_std + frac * (cfg.noise_final - cfg.noise_std)) * rng_width

    def env_step(self):
        env = self.env
        if self.obs is None or self.t_ep >= env.horizon:
            self.obs = env.reset(1, self.rngs["env"])
            self.t_ep = 0
        s = self.obs[0]
        noise = self.noise_scale() * self.rngs["explore"].standard_normal(env.act_dim)
        a = self.actor.act(s) + noise
        a = np.clip(a, env.action_low, env.action_high)
        obs2, r, done = env.step(a[None, :])
        self.buffer.push(Transition(s, a, float(r[0]), obs2[0], bool(done[0])))
        self.t_ep += 1
        self.obs = None if done[0] else obs2
        self.steps += 1

    def update(self):
        cfg = self.config
        batch = self.buffer.sample(cfg.batch_size, self.rngs["replay"])
        y = critic_target(batch, self.critic_t, self.actor_t, cfg.gamma)
        lam = cfg.lambda_s
        s_hat = None
        if cfg.variant == "sr-c" and lam > 0:
            s_hat, val = inner_max_q(self.critic, batch.s, batch.a, self.ball, cfg.adversary,
                                     self.rngs["adversary"])
            self.reg_values.append(float(np.mean(val)))
        critic_update(self.critic, batch, y, cfg, s_hat, self.critic_opt)
        s_hat = None
        if cfg.variant == "sr-a" and lam > 0:
            s_hat, val = inner_max_deterministic(self.actor, batch.s, self.ball, cfg.adversary,
                                                 self.rngs["adversary"])
            self.reg_values.append(float(np.mean(val)))
        actor_update(self.actor, self.critic, batch, cfg, s_hat, self.actor_opt)
        polyak(self.critic_t.net.params, self.critic.net.params, cfg.tau)
        polyak(self.actor_t.net.params, self.actor.net.params, cfg.tau)

    def train_step(self):
        self.env_step()
        if len(self.buffer) >= self.config.warmup_steps:
            self.update()

    def pop_reg_stats(self):
        vals = self.reg_values
        self.reg_values = []
        return float(np.mean(vals)) if vals else 0.0


def evaluate_deterministic(env, policy, episodes, rng):
    """Undiscounted returns of ``episodes`` greedy rollouts run side by side."""
    obs = env.reset(episodes, rng)
    total = np.zeros(episodes)
    alive = np.ones(episodes, dtype=bool)
    for _ in range(env.horizon):
        obs, r, done = env.step(policy.act(obs))
        total += np.where(alive, r, 0.0)
        alive &= ~done
        if not alive.any():
            break
    return total


def ddpg_train(env, config, rngs, total_steps, eval_every=1000, eval_episodes=10, callback=None):
    """Run ``total_steps`` environment steps; evaluate every ``eval_every`` steps.

    ``callback(trainer, returns)`` receives each evaluation.  Returns the
    trainer (actor, critic, targets) and a list of ``(steps, returns, reg)``.
    """
    tr = DdpgTrainer(env, config, rngs, total_steps)
    history = []
    for _ in range(int(total_steps)):
        tr.train_step()
        if tr.steps % eval_every == 0:
            rets = evaluate_deterministic(env, tr.actor, eval_episodes, rngs["eval"])
            reg = tr.pop_reg_stats()
            history.append((tr.steps, rets, reg))
            if callback is not None:
                callback(tr, rets)
    return tr, history
