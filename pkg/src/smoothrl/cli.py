"""Command-line entry point: ``smoothrl {train,eval-robust,summarize,probe-smoothness}``."""

import argparse
import logging
import sys

from . import harness
from .envs import ENVS
from .smoothreg import AdversaryConfig


def _floats(text):
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _adversary(args):
    return AdversaryConfig(steps=args.adv_steps, restarts=args.adv_restarts)


def cmd_train(args):
    cfg = harness.parse_config(args.config)
    out = harness.run_training(cfg, args.output)
    print(f"wrote {out}")


def cmd_eval_robust(args):
    rows = harness.eval_robust(args.policy, args.env, args.mode, args.eps, args.rollouts,
                               args.seed, _adversary(args))
    if args.out:
        harness.write_robust(args.out, rows)
    print("epsilon,mean_return,std_return")
    for e, m, s in rows:
        print(f"{e:.17g},{m:.17g},{s:.17g}")


def cmd_summarize(args):
    table = harness.summarize(args.run_dir)
    print("percentile,return")
    for p, r in table:
        print(f"{p:.17g},{r:.17g}")


def cmd_probe(args):
    score = harness.lipschitz_probe(args.policy, args.env, args.eps, args.n, args.seed,
                                    _adversary(args))
    print(f"{score:.17g}")


def build_parser():
    p = argparse.ArgumentParser(prog="smoothrl", description="Smoothness-regularized RL experiments")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train every seed of a config file")
    t.add_argument("config")
    t.add_argument("--output", help="override the config's output directory")
    t.set_defaults(func=cmd_train)

    def adversary_args(sp, restarts):
        sp.add_argument("--adv-steps", type=int, default=10)
        sp.add_argument("--adv-restarts", type=int, default=restarts)
        sp.add_argument("--seed", type=int, default=0)

    e = sub.add_parser("eval-robust", help="returns under observation disturbance")
    e.add_argument("policy")
    e.add_argument("--env", required=True, choices=sorted(ENVS))
    e.add_argument("--mode", required=True, choices=["random", "adversarial"])
    e.add_argument("--eps", type=_floats, default=[0.0, 0.02, 0.05, 0.1])
    e.add_argument("--rollouts", type=int, default=10)
    e.add_argument("--out", help="also write the table to this CSV file")
    adversary_args(e, 1)
    e.set_defaults(func=cmd_eval_robust)

    s = sub.add_parser("summarize", help="percentile and aggregate tables of a run directory")
    s.add_argument("run_dir")
    s.set_defaults(func=cmd_summarize)

    pr = sub.add_parser("probe-smoothness", help="mean worst-case divergence on on-policy states")
    pr.add_argument("policy")
    pr.add_argument("--eps", type=float, required=True)
    pr.add_argument("-n", type=int, default=100)
    pr.add_argument("--env", choices=sorted(ENVS), help="default: inferred from the policy")
    adversary_args(pr, 3)
    pr.set_defaults(func=cmd_probe)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except (ValueError, OSError) as e:
        print(f"smoothrl: error: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
