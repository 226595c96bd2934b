"""Command-line entry point: ``retouch <subcommand> ...``.

Exit codes: 0 success, 1 domain error (bad program, unreadable image, training
failure, ...), 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import __version__, bench, dsl, grm, pgrt, policy
from .constants import constants_hash
from .engine import execute
from .goal import GoalDescriptor
from .image import ImageError, load_image, save_image
from .metrics import all_metrics
from .modelfile import ModelFileError
from .parallel import THREADS_ENV
from .perturb import DEFAULT_TAU, StrategyMix, build_pairs, load_pairs, save_pairs

log = logging.getLogger("retouch")

DOMAIN_ERRORS = (
    dsl.DslError,
    dsl.InvalidProgramError,
    ImageError,
    ModelFileError,
    grm.TrainingError,
    pgrt.PgrtError,
    policy.SingularSystemError,
    ValueError,
    OSError,
)


def _formatter(prog):
    # fixed width keeps help text independent of the terminal
    return argparse.HelpFormatter(prog, width=88)


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--seed", type=int, default=0, help="master seed (default 0)")
    p.add_argument(
        "--threads", type=int, default=None, help=f"worker threads (default: ${THREADS_ENV} or 1)"
    )
    p.add_argument("--log-level", default="WARNING", help="logging level (default WARNING)")
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    parser = argparse.ArgumentParser(
        prog="retouch", description="Parametric retouching engine with reward-model and policy training.",
        formatter_class=_formatter,
    )
    parser.add_argument("--version", action="store_true", help="print version and constants hash, then exit")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")

    def add(name, help_text):
        return sub.add_parser(name, help=help_text, description=help_text, parents=[common], formatter_class=_formatter)

    p = add("apply", "execute an edit program on an image")
    p.add_argument("--in", dest="src", required=True, help="input image (PNG or PPM)")
    p.add_argument("--program", required=True, help="DSL text or a file containing it")
    p.add_argument("--out", required=True, help="output image; format from the suffix")

    p = add("parse", "parse a program and print its canonical form")
    p.add_argument("program", help="DSL text or a file containing it")

    p = add("metrics", "compare two images")
    p.add_argument("--a", required=True, help="first image")
    p.add_argument("--b", required=True, help="second image")
    p.add_argument("--json", action="store_true", help="print a JSON object")

    p = add("pairs", "strong/weak pair datasets")
    pairs_sub = p.add_subparsers(dest="pairs_command", metavar="ACTION")
    pb = pairs_sub.add_parser("build", help="perturb strong programs into weak ones", parents=[common], formatter_class=_formatter)
    pb.add_argument("--dataset", required=True, help="task directory (manifest.jsonl + images)")
    pb.add_argument("--strategy", default="single_param_bias", help="strategy name or 'name:w,name:w' mix")
    pb.add_argument("--tau", type=float, default=DEFAULT_TAU, help=f"minimum oracle distance to the strong edit (default {DEFAULT_TAU})")
    pb.add_argument("--pairs-per-item", type=int, default=1, help="pairs attempted per task (default 1)")
    pb.add_argument("--max-tries", type=int, default=8, help="perturbation attempts per pair (default 8)")
    pb.add_argument("--out", required=True, help="output pair directory")

    p = add("train-reward", "train the reward model on a pair directory")
    p.add_argument("--pairs", required=True, help="pair directory")
    p.add_argument("--stage", choices=("supervised", "pairwise"), required=True, help="training objective")
    p.add_argument("--init", help="start from this model (default: fresh model)")
    p.add_argument("--epochs", type=int, default=grm.GrmTrainConfig.epochs, help="optimiser steps")
    p.add_argument("--lr", type=float, default=grm.GrmTrainConfig.lr, help="Adam learning rate")
    p.add_argument("--out", required=True, help="output model file")

    p = add("eval-reward", "pairwise accuracy of a reward model")
    p.add_argument("--model", required=True, help="reward model file")
    p.add_argument("--pairs", required=True, help="pair directory")
    p.add_argument("--json", action="store_true", help="print a JSON object")

    p = add("train-policy", "fit the editing policy")
    p.add_argument("--stage", choices=("sft", "rl"), required=True, help="supervised fit or GRPO")
    p.add_argument("--tasks", required=True, help="task directory")
    p.add_argument("--reward", help="reward model file (rl stage)")
    p.add_argument("--init", help="starting policy file (rl stage; default: SFT on the tasks)")
    p.add_argument("--ridge", type=float, default=1e-2, help="ridge strength for sft (default 0.01)")
    p.add_argument("--steps", type=int, default=policy.GrpoConfig.steps, help="GRPO steps")
    p.add_argument("--lr", type=float, default=policy.GrpoConfig.lr, help="GRPO learning rate")
    p.add_argument("--group-size", type=int, default=policy.GrpoConfig.group_size, help="samples per task and step")
    p.add_argument("--explore-log-std", type=float, default=-3.5, help="exploration log-std at the start of RL (default -3.5)")
    p.add_argument("--out", required=True, help="output policy file")

    p = add("infer", "emit the policy's program for one image and goal")
    p.add_argument("--model", required=True, help="policy file")
    p.add_argument("--in", dest="src", required=True, help="input image")
    p.add_argument("--goal", required=True, help="goal JSON file")
    p.add_argument("--out", help="program file (default: stdout)")

    p = add("pgrt", "alternate reward and policy training")
    p.add_argument("--config", help="JSON config; flags override its values")
    p.add_argument("--corpus", help="task directory (default: generated corpus)")
    p.add_argument("--corpus-n", type=int, default=250, help="tasks per split for the generated corpus (default 250)")
    p.add_argument("--rounds", type=int, help="alternation rounds")
    p.add_argument("--rho", type=float, help="policy-pair share in reward batches")
    p.add_argument("--delta", type=float, help="oracle distance that certifies a policy output as weak")
    p.add_argument("--out", required=True, help="report directory")

    p = add("bench", "generate benchmark tasks and score a policy")
    p.add_argument("--split", default="all", choices=bench.SPLITS + ("all",), help="task split (default all)")
    p.add_argument("--n", type=int, default=50, help="tasks per split (default 50)")
    p.add_argument("--size", type=int, default=bench.DEFAULT_SIZE, help=f"image side (default {bench.DEFAULT_SIZE})")
    p.add_argument("--policy", default="identity", help="policy file, 'identity' or 'oracle' (default identity)")
    p.add_argument("--images", help="use images from this directory instead of procedural ones")
    p.add_argument("--tasks", help="load tasks from a task directory instead of generating them")
    p.add_argument("--export-tasks", help="also write the tasks to this directory")
    p.add_argument("--out", help="CSV report path (default: stdout)")
    return parser


# --- helpers --------------------------------------------------------------------------


def _program_arg(text: str) -> dsl.EditProgram:
    path = Path(text)
    if not text.lstrip().startswith("{") and path.is_file():
        text = path.read_text()
    return dsl.parse_program(text.strip())


def _number(v: float):
    return int(v) if float(v).is_integer() else v


def _write_text(text: str, path) -> None:
    if path is None:
        sys.stdout.write(text)
    else:
        Path(path).write_bytes(text.encode())


# --- commands -------------------------------------------------------------------------


def cmd_apply(args) -> int:
    img = load_image(args.src)
    out = execute(img, _program_arg(args.program), threads=args.threads or 1)
    save_image(out, args.out)
    return 0


def cmd_parse(args) -> int:
    print(dsl.serialize_program(_program_arg(args.program)))
    return 0


def cmd_metrics(args) -> int:
    m = all_metrics(load_image(args.a), load_image(args.b))
    if args.json:
        print(json.dumps({k: _number(v) for k, v in m.items()}, separators=(",", ":")))
    else:
        for k, v in m.items():
            print(f"{k} {v:.6f}")
    return 0


def cmd_pairs(args) -> int:
    if args.pairs_command != "build":
        raise _Usage("pairs: expected the 'build' action")
    tasks = bench.load_tasks(args.dataset)
    pairs, rejected = build_pairs(
        tasks,
        StrategyMix.parse(args.strategy),
        args.seed,
        tau=args.tau,
        pairs_per_item=args.pairs_per_item,
        max_tries=args.max_tries,
        threads=args.threads,
    )
    save_pairs(pairs, args.out)
    print(f"{len(pairs)} pairs written, {rejected} rejected")
    return 0


def cmd_train_reward(args) -> int:
    pairs = load_pairs(args.pairs)
    cfg = grm.GrmTrainConfig(lr=args.lr, epochs=args.epochs, seed=args.seed)
    model = grm.load_model(args.init) if args.init else None
    if args.stage == "supervised":
        result = grm.train_supervised(pairs, cfg, model=model)
    else:
        result = grm.train_pairwise(model or grm.GrmModel.initial(cfg.init_scale), pairs, cfg)
    grm.save_model(result.model, args.out)
    print(f"final loss {result.final_loss:.6f}")
    return 0


def cmd_eval_reward(args) -> int:
    acc = grm.eval_pairwise_accuracy(grm.load_model(args.model), load_pairs(args.pairs))
    print(json.dumps({"accuracy": acc}) if args.json else f"accuracy {acc:.6f}")
    return 0


def cmd_train_policy(args) -> int:
    tasks = bench.load_tasks(args.tasks)
    if args.stage == "sft":
        model = policy.fit_sft([(t.before, t.goal, t.gt_program) for t in tasks], ridge=args.ridge, seed=args.seed)
    else:
        if not args.reward:
            raise _Usage("train-policy --stage rl requires --reward")
        start = policy.load_model(args.init) if args.init else policy.fit_sft(
            [(t.before, t.goal, t.gt_program) for t in tasks], ridge=args.ridge
        )
        cfg = policy.GrpoConfig(
            group_size=args.group_size,
            steps=args.steps,
            lr=args.lr,
            seed=args.seed,
            explore_log_std=args.explore_log_std,
        )
        result = policy.train_grpo(start, grm.load_model(args.reward), tasks, cfg, threads=args.threads)
        model = result.model
        if result.reward_trace:
            print(f"mean reward {result.reward_trace[0]:.4f} -> {result.reward_trace[-1]:.4f}")
    policy.save_model(model, args.out)
    return 0


def cmd_infer(args) -> int:
    model = policy.load_model(args.model)
    goal = GoalDescriptor.from_dict(json.loads(Path(args.goal).read_text()))
    program = policy.mean_program(model, load_image(args.src), goal)
    _write_text(dsl.serialize_program(program) + "\n", args.out)
    return 0


def cmd_pgrt(args) -> int:
    cfg = pgrt.PgrtConfig.from_dict(json.loads(Path(args.config).read_text())) if args.config else pgrt.PgrtConfig()
    overrides = {"seed": args.seed, "threads": args.threads}
    for name in ("rounds", "rho", "delta"):
        if getattr(args, name) is not None:
            overrides[name] = getattr(args, name)
    cfg = replace(cfg, **overrides)
    corpus = args.corpus if args.corpus else bench.generate_tasks("all", args.corpus_n, args.seed)
    report = pgrt.run_alternation(cfg, corpus, out_dir=args.out)
    out = Path(args.out)
    grm.save_model(report.final_reward, out / "reward.grm")
    policy.save_model(report.final_policy, out / "policy.pol")
    sys.stdout.write(pgrt.report_csv(report))
    return 0


def _bench_policy(name: str):
    if name == "identity":
        return bench.identity_policy
    if name == "oracle":
        return bench.oracle_policy
    return policy.load_model(name)


def cmd_bench(args) -> int:
    if args.tasks:
        tasks = bench.load_tasks(args.tasks)
        if args.split != "all":
            tasks = [t for t in tasks if t.split == args.split]
    else:
        images = bench.load_image_dir(args.images) if args.images else None
        tasks = bench.generate_tasks(args.split, args.n, args.seed, args.size, images=images)
    if args.export_tasks:
        bench.export_tasks(tasks, args.export_tasks)
    report = bench.evaluate(_bench_policy(args.policy), tasks, seed=args.seed, threads=args.threads)
    _write_text(bench.report_csv(report), args.out)
    return 0


COMMANDS = {
    "apply": cmd_apply,
    "parse": cmd_parse,
    "metrics": cmd_metrics,
    "pairs": cmd_pairs,
    "train-reward": cmd_train_reward,
    "eval-reward": cmd_eval_reward,
    "train-policy": cmd_train_policy,
    "infer": cmd_infer,
    "pgrt": cmd_pgrt,
    "bench": cmd_bench,
}


class _Usage(Exception):
    pass


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse reports usage errors with code 2
        return int(exc.code or 0)
    if args.version:
        print(f"retouch {__version__} constants {constants_hash()}")
        return 0
    if args.command is None:
        parser.print_usage(sys.stderr)
        return 2
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.WARNING), stream=sys.stderr)
    try:
        return COMMANDS[args.command](args)
    except _Usage as exc:
        print(f"retouch: error: {exc}", file=sys.stderr)
        return 2
    except DOMAIN_ERRORS as exc:
        print(f"retouch: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
