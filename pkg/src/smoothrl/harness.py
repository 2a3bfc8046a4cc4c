"""Experiment orchestration: configs, seed fans, CSV records, robustness sweeps.

Config files are ``key = value`` lines; ``#`` starts a comment.  Keys:

==================  =========================================================
algo                trpo | trpo-sr | ddpg | ddpg-sr-a | ddpg-sr-c (required)
env                 pointmass | pendulum (required)
lambda_s            regularizer weight (ignored by the baselines), default 0.1
epsilon             perturbation radius, default 0.01
adv_steps           inner ascent steps, default 10
adv_step_size       inner step size, default 0.2 * epsilon
adv_init            random | zero
adv_restarts        restarts, default 1
adv_ascent          sign | gradient
seeds               explicit comma-separated seed list
n_seeds, base_seed  otherwise seeds are ``base_seed + i`` for i < n_seeds
iterations          TRPO updates / DDPG blocks of steps_per_iter, default 500
steps_per_iter      environment steps per iteration, default 1000
eval_episodes       rollouts per evaluation, default 10
output              run directory, default ``runs``
workers             parallel seed processes, default 1
gamma, hidden       discount; comma-separated hidden widths
max_kl, trpo_mode, lr_theta, cg_iters, cg_damping, backtracks, init_log_std
tau, actor_lr, critic_lr, batch_size, buffer_size, noise_std, noise_final,
warmup, optimizer, eval_every
<env>.<name>        environment constant, e.g. ``pendulum.g = 9.81``
==================  =========================================================
"""

import csv
import inspect
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import envs as envs_mod
from .ddpg import DdpgConfig, ddpg_train
from .policy import GaussianPolicy, load_policy
from .smoothreg import (AdversaryConfig, PerturbationBall, inner_max_deterministic,
                        inner_max_policy)
from .trpo import TrpoConfig, TrpoTrainer, evaluate

log = logging.getLogger(__name__)

ALGOS = ("trpo", "trpo-sr", "ddpg", "ddpg-sr-a", "ddpg-sr-c")
RNG_STREAMS = ("init", "rollout", "adversary", "eval", "env", "explore", "replay")
RUN_HEADER = ["iter", "steps", "seed", "mean_return", "std_return", "mean_kl", "reg_value",
              "adv_div"]
AGG_HEADER = ["iter", "steps", "n_seeds", "mean_return", "std_return", "missing"]


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    algo: str
    env: str
    lambda_s: float = 0.1
    epsilon: float = 0.01
    adversary: AdversaryConfig = field(default_factory=AdversaryConfig)
    seeds: tuple = tuple(range(10))
    iterations: int = 500
    steps_per_iter: int = 1000
    eval_episodes: int = 10
    output: str = "runs"
    workers: int = 1
    gamma: float = 0.99
    hidden: tuple = (64, 64)
    trpo: dict = field(default_factory=dict)
    ddpg: dict = field(default_factory=dict)
    eval_every: int = 1000
    env_params: dict = field(default_factory=dict)

    @property
    def is_trpo(self):
        return self.algo.startswith("trpo")

    @property
    def effective_lambda(self):
        return self.lambda_s if self.algo in ("trpo-sr", "ddpg-sr-a", "ddpg-sr-c") else 0.0

    def make_env(self):
        return envs_mod.make_env(self.env, **self.env_params)

    def trpo_config(self):
        return TrpoConfig(gamma=self.gamma, batch_steps=self.steps_per_iter,
                          lambda_s=self.effective_lambda, epsilon=self.epsilon,
                          adversary=self.adversary, hidden=self.hidden, **self.trpo)

    def ddpg_config(self):
        variant = {"ddpg": "none", "ddpg-sr-a": "sr-a", "ddpg-sr-c": "sr-c"}[self.algo]
        return DdpgConfig(gamma=self.gamma, lambda_s=self.effective_lambda, epsilon=self.epsilon,
                          adversary=self.adversary, variant=variant, hidden=self.hidden,
                          **self.ddpg)


def _float(v):
    return float(v)


def _int(v):
    return int(v)


def _positive_int(v):
    n = int(v)
    if n < 1:
        raise ValueError("must be a positive integer")
    return n


def _int_list(v):
    out = tuple(int(x) for x in v.split(",") if x.strip())
    if not out:
        raise ValueError("empty list")
    return out


def _choice(*opts):
    def conv(v):
        if v not in opts:
            raise ValueError(f"expected one of {', '.join(opts)}")
        return v
    return conv


def _opt_float(v):
    return None if v.lower() == "none" else float(v)


_TOP = {
    "lambda_s": _float, "epsilon": _float, "iterations": _positive_int,
    "steps_per_iter": _positive_int, "eval_episodes": _positive_int, "output": str,
    "workers": _positive_int, "gamma": _float, "hidden": _int_list,
    "eval_every": _positive_int,
}
_ADV = {
    "adv_steps": ("steps", _int), "adv_step_size": ("step_size", _opt_float),
    "adv_init": ("init", _choice("random", "zero")), "adv_restarts": ("restarts", _positive_int),
    "adv_ascent": ("ascent", _choice("sign", "gradient")),
}
_TRPO = {
    "max_kl": _float, "trpo_mode": _choice("trust-region", "alg1"), "lr_theta": _float,
    "cg_iters": _positive_int, "cg_damping": _float, "backtracks": _positive_int,
    "init_log_std": _float,
}
_DDPG = {
    "tau": _float, "actor_lr": _float, "critic_lr": _float, "batch_size": _positive_int,
    "buffer_size": _positive_int, "noise_std": _float, "noise_final": _float, "warmup": _int,
    "optimizer": _choice("sgd", "adam"),
}
KNOWN_KEYS = ({"algo", "env", "seeds", "n_seeds", "base_seed"} | set(_TOP) | set(_ADV)
              | set(_TRPO) | set(_DDPG))


def _env_param_names(key):
    return set(inspect.signature(envs_mod.ENVS[key].__init__).parameters) - {"self"}


def parse_config_text(text, source="<config>"):
    """Parse config text into an :class:`ExperimentConfig` (see module docs)."""
    raw = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: malformed line, expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key or not value:
            raise ConfigError(f"{source}:{lineno}: malformed line, expected 'key = value'")
        if key in raw:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        raw[key] = (value, lineno)

    for key in ("algo", "env"):
        if key not in raw:
            raise ConfigError(f"{source}: missing required key {key!r}")
    algo, _ = raw.pop("algo")
    if algo not in ALGOS:
        raise ConfigError(f"{source}: unknown algorithm {algo!r} (expected one of {', '.join(ALGOS)})")
    env, _ = raw.pop("env")
    if env not in envs_mod.ENVS:
        raise ConfigError(f"{source}: unknown environment {env!r}")

    def convert(key, conv, value, lineno):
        try:
            return conv(value)
        except ValueError as e:
            raise ConfigError(f"{source}:{lineno}: malformed value for {key!r}: {value!r} ({e})") from None

    kw, adv, trpo, ddpg, env_params = {}, {}, {}, {}, {}
    seeds = n_seeds = None
    base_seed = 0
    for key, (value, lineno) in raw.items():
        if key in _TOP:
            kw[key] = convert(key, _TOP[key], value, lineno)
        elif key in _ADV:
            name, conv = _ADV[key]
            adv[name] = convert(key, conv, value, lineno)
        elif key in _TRPO:
            trpo[key if key != "trpo_mode" else "mode"] = convert(key, _TRPO[key], value, lineno)
        elif key in _DDPG:
            ddpg[key] = convert(key, _DDPG[key], value, lineno)
        elif key == "seeds":
            seeds = convert(key, _int_list, value, lineno)
        elif key == "n_seeds":
            n_seeds = convert(key, _positive_int, value, lineno)
        elif key == "base_seed":
            base_seed = convert(key, _int, value, lineno)
        elif "." in key:
            prefix, name = key.split(".", 1)
            if prefix != env or name not in _env_param_names(env):
                raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
            env_params[name] = convert(key, _float if name != "horizon" else _positive_int,
                                       value, lineno)
        else:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
    if seeds is None:
        seeds = tuple(base_seed + i for i in range(n_seeds if n_seeds is not None else 10))
    try:
        cfg = ExperimentConfig(algo=algo, env=env, seeds=seeds, adversary=AdversaryConfig(**adv),
                               trpo=trpo, ddpg=ddpg, env_params=env_params, **kw)
        # surface invalid combinations now rather than mid-run
        cfg.trpo_config() if cfg.is_trpo else cfg.ddpg_config()
        PerturbationBall(cfg.epsilon)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{source}: invalid configuration: {e}") from None
    return cfg


def parse_config(path):
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    return parse_config_text(path.read_text(), str(path))


def make_rngs(seed):
    """Independent named generators spawned from one run seed."""
    children = np.random.SeedSequence(int(seed)).spawn(len(RNG_STREAMS))
    return {name: np.random.default_rng(ss) for name, ss in zip(RNG_STREAMS, children)}


def _fmt(x):
    return format(float(x), ".17g")


def _row(it, steps, seed, rets, kl, reg, adv):
    return [str(it), str(steps), str(seed), _fmt(np.mean(rets)), _fmt(np.std(rets)), _fmt(kl),
            _fmt(reg), _fmt(adv)]


def train_seed(cfg, seed):
    """Train one seed; returns ``(rows, policy_text, critic_text_or_None)``."""
    env = cfg.make_env()
    rngs = make_rngs(seed)
    rows = []
    if cfg.is_trpo:
        tr = TrpoTrainer(env, cfg.trpo_config(), rngs)
        steps = 0
        for it in range(1, cfg.iterations + 1):
            batch, info = tr.step()
            steps += len(batch.states)
            rets = evaluate(env, tr.policy, cfg.eval_episodes, rngs["eval"])
            rows.append(_row(it, steps, seed, rets, info.mean_kl, info.reg_value, info.adv_div))
        return rows, tr.policy.to_text(), None

    total = cfg.iterations * cfg.steps_per_iter
    dcfg = cfg.ddpg_config()

    def record(tr, rets):
        reg = tr.pop_reg_stats()
        rows.append(_row(len(rows) + 1, tr.steps, seed, rets, np.nan, reg, reg))

    tr, _ = ddpg_train(env, dcfg, rngs, total, eval_every=cfg.eval_every,
                       eval_episodes=cfg.eval_episodes, callback=record)
    return rows, tr.actor.to_text(), tr.critic.to_text()


def _run_one(args):
    cfg, seed = args
    try:
        return seed, train_seed(cfg, seed), None
    except Exception as e:  # a failed seed is recorded, the others go on
        log.exception("seed %s failed", seed)
        return seed, None, f"{type(e).__name__}: {e}"


def write_csv(path, header, rows):
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def read_csv(path):
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


def aggregate_rows(per_seed, expected_seeds):
    """Per-iteration mean and std of ``mean_return`` across seeds."""
    by_iter = {}
    for seed, rows in sorted(per_seed.items()):
        for r in rows:
            by_iter.setdefault(int(r["iter"]), []).append((seed, int(r["steps"]),
                                                           float(r["mean_return"])))
    out = []
    for it in sorted(by_iter):
        entries = by_iter[it]
        have = {s for s, _, _ in entries}
        missing = ";".join(str(s) for s in expected_seeds if s not in have)
        vals = np.array([v for _, _, v in entries])
        steps = max(st for _, st, _ in entries)
        out.append([str(it), str(steps), str(len(vals)), _fmt(vals.mean()), _fmt(vals.std()),
                    missing])
    return out


def run_training(cfg, output=None):
    """Train every seed of ``cfg`` and write CSVs and policy files.

    Returns the output directory.  Seeds that raise are logged, listed in
    ``failures.txt``, and reported in the aggregate's ``missing`` column.
    """
    out = Path(output or cfg.output)
    out.mkdir(parents=True, exist_ok=True)
    jobs = [(cfg, s) for s in cfg.seeds]
    if cfg.workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            results = list(pool.map(_run_one, jobs))
    else:
        results = [_run_one(j) for j in jobs]

    per_seed, failures = {}, []
    for seed, res, err in results:
        if res is None:
            failures.append(f"{seed}\t{err}")
            continue
        rows, policy_text, critic_text = res
        write_csv(out / f"seed_{seed}.csv", RUN_HEADER, rows)
        (out / f"policy_seed_{seed}.txt").write_text(policy_text)
        if critic_text is not None:
            (out / f"critic_seed_{seed}.txt").write_text(critic_text)
        per_seed[seed] = [dict(zip(RUN_HEADER, r)) for r in rows]
    write_csv(out / "aggregate.csv", AGG_HEADER, aggregate_rows(per_seed, cfg.seeds))
    fail_path = out / "failures.txt"
    if failures:
        fail_path.write_text("\n".join(failures) + "\n")
    elif fail_path.exists():
        fail_path.unlink()
    return out


def percentile_summary(returns):
    """Returns sorted ascending with percentile ranks ``i / (n - 1)``."""
    vals = np.sort(np.asarray(returns, dtype=np.float64).ravel())
    n = len(vals)
    if n < 2:
        raise ValueError("percentile summary needs at least 2 returns")
    return [(i / (n - 1), float(v)) for i, v in enumerate(vals)]


def _seed_files(run_dir):
    files = {}
    for p in Path(run_dir).glob("seed_*.csv"):
        try:
            files[int(p.stem.split("_", 1)[1])] = p
        except ValueError:
            continue
    return dict(sorted(files.items()))


def final_returns(run_dir):
    """Last-row ``mean_return`` per seed, keyed by seed."""
    out = {}
    for seed, p in _seed_files(run_dir).items():
        rows = read_csv(p)
        if rows:
            out[seed] = float(rows[-1]["mean_return"])
    return out


def summarize(run_dir):
    """Write ``percentiles.csv`` and a fresh ``aggregate.csv``; returns the percentile rows."""
    run_dir = Path(run_dir)
    files = _seed_files(run_dir)
    if not files:
        raise ValueError(f"no seed_*.csv files in {run_dir}")
    per_seed = {s: read_csv(p) for s, p in files.items()}
    fin = [float(rows[-1]["mean_return"]) for rows in per_seed.values() if rows]
    table = percentile_summary(fin)
    write_csv(run_dir / "percentiles.csv", ["percentile", "return"],
              [[_fmt(p), _fmt(r)] for p, r in table])
    expected = sorted(files)
    fail_path = run_dir / "failures.txt"
    if fail_path.exists():
        for line in fail_path.read_text().splitlines():
            if line.strip():
                expected.append(int(line.split("\t", 1)[0]))
    write_csv(run_dir / "aggregate.csv", AGG_HEADER, aggregate_rows(per_seed, sorted(expected)))
    return table


def infer_env(policy):
    dims = {cls.obs_dim: key for key, cls in envs_mod.ENVS.items()}
    obs_dim = policy.mean_net.in_dim if isinstance(policy, GaussianPolicy) else policy.obs_dim
    if obs_dim not in dims:
        raise ValueError(f"no built-in environment has observation dimension {obs_dim}")
    return dims[obs_dim]


def load_policy_for(source, env=None):
    """Policy from a file path or a policy object; returns ``(policy, env)``.

    Deterministic policies read from a file take their action bounds from
    the environment; policy objects are used as given.
    """
    from_file = isinstance(source, (str, os.PathLike))
    policy = load_policy(Path(source).read_text()) if from_file else source
    if env is None:
        env = envs_mod.make_env(infer_env(policy))
    elif isinstance(env, str):
        env = envs_mod.make_env(env)
    obs_dim = policy.mean_net.in_dim if isinstance(policy, GaussianPolicy) else policy.obs_dim
    act_dim = policy.act_dim
    if obs_dim != env.obs_dim or act_dim != env.act_dim:
        raise ValueError(f"policy shape ({obs_dim} -> {act_dim}) does not fit env "
                         f"({env.obs_dim} -> {env.act_dim})")
    if from_file and not isinstance(policy, GaussianPolicy):
        policy.low, policy.high = env.action_low, env.action_high
    return policy, env


def eval_robust(policy, env, mode, eps_grid, rollouts=10, seed=0, cfg=AdversaryConfig()):
    """Mean and std of returns under disturbance, one row per epsilon.

    Every epsilon reuses the same rollout seed, so differences between rows
    come from the disturbance alone.
    """
    policy, env = load_policy_for(policy, env)
    rows = []
    for eps in eps_grid:
        roll_rng, dist_rng = (np.random.default_rng(s)
                              for s in np.random.SeedSequence(seed).spawn(2))
        wrapper = envs_mod.DisturbanceWrapper(env, mode, eps, dist_rng, policy, cfg)
        rets = evaluate(env, policy, rollouts, roll_rng, stochastic=True, wrapper=wrapper)
        rows.append((float(eps), float(np.mean(rets)), float(np.std(rets))))
    return rows


def write_robust(path, rows):
    write_csv(path, ["epsilon", "mean_return", "std_return"],
              [[_fmt(e), _fmt(m), _fmt(s)] for e, m, s in rows])


def on_policy_states(policy, env, n, rng):
    """``n`` states visited by the policy, spread evenly over whole episodes."""
    episodes = max(1, -(-n // env.horizon))
    obs = env.reset(episodes, rng)
    seen = []
    for _ in range(env.horizon):
        seen.append(obs)
        a = policy.sample(obs, rng) if isinstance(policy, GaussianPolicy) else policy.act(obs)
        obs, _, _ = env.step(a)
    S = np.concatenate(seen, axis=0)
    idx = np.linspace(0, len(S) - 1, n).round().astype(int)
    return S[idx]


def lipschitz_probe(policy, env=None, epsilon=0.05, n=100, seed=0,
                    cfg=AdversaryConfig(restarts=3)):
    """Mean adversarially maximized output divergence over ``n`` on-policy states."""
    if n < 1:
        raise ValueError("n must be at least 1")
    policy, env = load_policy_for(policy, env)
    state_rng, adv_rng = (np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(2))
    S = on_policy_states(policy, env, n, state_rng)
    ball = PerturbationBall(float(epsilon))
    if isinstance(policy, GaussianPolicy):
        _, div = inner_max_policy(policy, S, ball, cfg, adv_rng)
    else:
        _, div = inner_max_deterministic(policy, S, ball, cfg, adv_rng)
    return float(np.mean(div))


def log_grid(lo, hi, n):
    return np.logspace(np.log10(lo), np.log10(hi), n)


def grid_search(cfg, epsilons=None, lambdas=None, output=None):
    """Train ``cfg`` for every (epsilon, lambda_s) pair.

    Reports final mean return and area under the mean learning curve for
    each pair and picks the pair with the best final mean return.  Returns
    ``(rows, best)`` where rows are dicts.
    """
    epsilons = log_grid(1e-5, 1e-1, 5) if epsilons is None else epsilons
    lambdas = log_grid(1e-2, 1e2, 5) if lambdas is None else lambdas
    base = Path(output or cfg.output)
    rows = []
    for eps in epsilons:
        for lam in lambdas:
            sub = replace(cfg, epsilon=float(eps), lambda_s=float(lam))
            d = run_training(sub, base / f"eps_{_fmt(eps)}_lam_{_fmt(lam)}")
            agg = read_csv(d / "aggregate.csv")
            curve = np.array([float(r["mean_return"]) for r in agg])
            rows.append({"epsilon": float(eps), "lambda_s": float(lam),
                         "final_return": float(curve[-1]), "auc": float(curve.mean())})
    write_csv(base / "grid.csv", ["epsilon", "lambda_s", "final_return", "auc"],
              [[_fmt(r[k]) for k in ("epsilon", "lambda_s", "final_return", "auc")] for r in rows])
    best = max(rows, key=lambda r: r["final_return"])
    return rows, best
