"""Small smooth continuous-control environments and observation disturbances.

Environments are batched: ``reset(n, rng)`` starts ``n`` independent copies
and ``step(actions)`` advances all of them.  ``step`` returns a ``done`` mask
for terminal states only; neither task has any, so episodes end by horizon
truncation, which the rollout code applies (``env.horizon``).
"""

import logging

import numpy as np

from .smoothreg import (AdversaryConfig, PerturbationBall, inner_max_deterministic,
                        inner_max_policy)
from .policy import GaussianPolicy

log = logging.getLogger(__name__)


def pointmass_step(state, action, h=0.05, goal=(1.0, 1.0), ctrl_cost=0.01):
    """Semi-implicit Euler step of a 2-D point mass. Works on rows or batches."""
    state = np.asarray(state, dtype=np.float64)
    a = np.asarray(action, dtype=np.float64)
    p, v = state[..., :2], state[..., 2:]
    v2 = v + h * a
    p2 = p + h * v2
    reward = -np.sum((p2 - np.asarray(goal)) ** 2, axis=-1) - ctrl_cost * np.sum(a * a, axis=-1)
    return np.concatenate([p2, v2], axis=-1), reward


def wrap_angle(theta):
    """Map angles into (-pi, pi]."""
    out = np.mod(theta + np.pi, 2 * np.pi) - np.pi
    return np.where(out == -np.pi, np.pi, out)


def _pendulum_dynamics(theta, thetadot, u, g=10.0, m=1.0, l=1.0, dt=0.05, max_speed=8.0):
    acc = 3.0 * g / (2.0 * l) * np.sin(theta) + 3.0 * u / (m * l * l)
    thetadot2 = np.clip(thetadot + acc * dt, -max_speed, max_speed)
    theta2 = theta + thetadot2 * dt
    return theta2, thetadot2


def _pendulum_reward(theta, thetadot, u):
    return -(wrap_angle(theta) ** 2 + 0.1 * thetadot ** 2 + 0.001 * u ** 2)


def pendulum_step(state, action, **consts):
    """One step from an observation-form state ``(cos th, sin th, thdot)``.

    The reward is charged on the state the torque is applied in.
    """
    state = np.asarray(state, dtype=np.float64)
    u = np.asarray(action, dtype=np.float64)[..., 0]
    theta = np.arctan2(state[..., 1], state[..., 0])
    thetadot = state[..., 2]
    reward = _pendulum_reward(theta, thetadot, u)
    th2, thd2 = _pendulum_dynamics(theta, thetadot, u, **consts)
    return np.stack([np.cos(th2), np.sin(th2), thd2], axis=-1), reward


class _Env:
    obs_dim = 0
    act_dim = 0
    horizon = 0

    def __init__(self):
        self.state = None
        self.t = 0
        self._warned = False

    @property
    def action_low(self):
        return np.full(self.act_dim, self.low)

    @property
    def action_high(self):
        return np.full(self.act_dim, self.high)

    def _clamp(self, action):
        action = np.asarray(action, dtype=np.float64)
        clipped = np.clip(action, self.low, self.high)
        if not self._warned and np.any(clipped != action):
            log.info("%s: clamping out-of-bounds actions into [%g, %g]",
                     type(self).__name__, self.low, self.high)
            self._warned = True
        return clipped


class PointMass(_Env):
    """Drive a unit point mass from the origin to ``goal`` (state x, y, vx, vy)."""

    obs_dim = 4
    act_dim = 2
    low, high = -1.0, 1.0

    def __init__(self, h=0.05, goal_x=1.0, goal_y=1.0, ctrl_cost=0.01, horizon=100):
        super().__init__()
        self.h = float(h)
        self.goal = (float(goal_x), float(goal_y))
        self.ctrl_cost = float(ctrl_cost)
        self.horizon = int(horizon)

    def reset(self, n, rng):
        self.state = np.zeros((n, 4))
        self.t = 0
        return self.state.copy()

    def observe(self):
        return self.state.copy()

    def step(self, action):
        a = self._clamp(action)
        self.state, r = pointmass_step(self.state, a, self.h, self.goal, self.ctrl_cost)
        self.t += 1
        return self.state.copy(), r, np.zeros(self.state.shape[0], dtype=bool)


class Pendulum(_Env):
    """Torque-limited swing-up; ``theta = 0`` is upright."""

    obs_dim = 3
    act_dim = 1

    def __init__(self, g=10.0, m=1.0, l=1.0, dt=0.05, max_speed=8.0, max_torque=2.0,
                 horizon=200):
        super().__init__()
        self.consts = dict(g=float(g), m=float(m), l=float(l), dt=float(dt),
                           max_speed=float(max_speed))
        self.low, self.high = -float(max_torque), float(max_torque)
        self.horizon = int(horizon)

    def reset(self, n, rng):
        theta = rng.uniform(-np.pi, np.pi, size=n)
        thetadot = rng.uniform(-1.0, 1.0, size=n)
        self.state = np.stack([theta, thetadot], axis=-1)
        self.t = 0
        return self.observe()

    def observe(self):
        th, thd = self.state[:, 0], self.state[:, 1]
        return np.stack([np.cos(th), np.sin(th), thd], axis=-1)

    def step(self, action):
        u = self._clamp(action)[..., 0]
        th, thd = self.state[:, 0], self.state[:, 1]
        r = _pendulum_reward(th, thd, u)
        th2, thd2 = _pendulum_dynamics(th, thd, u, **self.consts)
        self.state = np.stack([th2, thd2], axis=-1)
        self.t += 1
        return self.observe(), r, np.zeros(self.state.shape[0], dtype=bool)


ENVS = {"pointmass": PointMass, "pendulum": Pendulum}


def make_env(key, **overrides):
    try:
        cls = ENVS[key]
    except KeyError:
        raise ValueError(f"unknown environment {key!r}") from None
    return cls(**overrides)


def disturb_random(s, ball, rng):
    """``s + delta`` with ``delta`` uniform on the l-infinity ball."""
    s = np.asarray(s, dtype=np.float64)
    if ball.epsilon == 0:
        return s.copy()
    return s + rng.uniform(-ball.epsilon, ball.epsilon, size=s.shape)


def disturb_adversarial(s, policy, ball, cfg=AdversaryConfig(), rng=None):
    """Observation that maximizes the policy's output divergence within the ball."""
    s = np.asarray(s, dtype=np.float64)
    if ball.epsilon == 0:
        return s.copy()
    if isinstance(policy, GaussianPolicy):
        s_t, _ = inner_max_policy(policy, s, ball, cfg, rng)
    else:
        s_t, _ = inner_max_deterministic(policy, s, ball, cfg, rng)
    return s_t


class DisturbanceWrapper:
    """Perturbs emitted observations; the wrapped dynamics see the true state."""

    def __init__(self, env, mode, epsilon, rng, policy=None, cfg=AdversaryConfig()):
        if mode not in ("random", "adversarial"):
            raise ValueError(f"unknown disturbance mode {mode!r}")
        if mode == "adversarial" and policy is None:
            raise ValueError("adversarial disturbance needs the policy under attack")
        self.env = env
        self.mode = mode
        self.ball = PerturbationBall(float(epsilon))
        self.rng = rng
        self.policy = policy
        self.cfg = cfg

    def __getattr__(self, name):
        return getattr(self.env, name)

    def _disturb(self, obs):
        if self.mode == "random":
            return disturb_random(obs, self.ball, self.rng)
        return disturb_adversarial(obs, self.policy, self.ball, self.cfg, self.rng)

    def reset(self, n, rng):
        return self._disturb(self.env.reset(n, rng))

    def step(self, action):
        obs, r, done = self.env.step(action)
        return self._disturb(obs), r, done
