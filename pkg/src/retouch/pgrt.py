"""Policy-guided reward training: alternate GRM and policy training, tracking both pair populations."""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import bench, grm, policy
from .engine import execute
from .metrics import oracle_distance
from .parallel import pmap
from .perturb import DEFAULT_TAU, PairSample, StrategyMix, build_pairs
from .seeding import derive_seed

log = logging.getLogger(__name__)

CSV_COLUMNS = (
    "round",
    "acc_perturbed",
    "acc_policy",
    "n_pairs_perturbed",
    "n_pairs_policy",
    "l1",
    "l2",
    "psnr",
    "ssim",
)


class PgrtError(RuntimeError):
    """A stage failed; carries the stage name and round index."""

    def __init__(self, stage: str, round_index: int, cause: BaseException):
        super().__init__(f"stage {stage!r} failed in round {round_index}: {cause}")
        self.stage = stage
        self.round_index = round_index


@dataclass(frozen=True)
class PgrtConfig:
    rounds: int = 2
    delta: float = 4.0  # oracle distance at which a policy output counts as weak
    rho: float = 0.5  # fraction of policy pairs in PGRT reward-training batches
    seed: int = 0
    eval_fraction: float = 0.2
    strategy: str = "single_param_bias"
    tau: float = DEFAULT_TAU
    pairs_per_item: int = 3
    grm_supervised: grm.GrmTrainConfig = grm.GrmTrainConfig()
    grm_pairwise: grm.GrmTrainConfig = grm.GrmTrainConfig()
    sft_ridge: float = 1e-2
    grpo: policy.GrpoConfig = policy.GrpoConfig(explore_log_std=-3.5)
    bench_splits: tuple = ("quality", "style")
    bench_n: int = 50
    bench_seed: int = 7
    bench_size: int = bench.DEFAULT_SIZE
    threads: int | None = None

    def __post_init__(self):
        if self.rounds < 1:
            raise ValueError("rounds must be >= 1")
        if not self.delta > 0:
            raise ValueError("delta must be > 0")
        if not 0.0 <= self.rho <= 1.0:
            raise ValueError("rho must lie in [0, 1]")
        if not 0.0 < self.eval_fraction < 1.0:
            raise ValueError("eval_fraction must lie in (0, 1)")
        StrategyMix.parse(self.strategy)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["bench_splits"] = list(self.bench_splits)
        d.pop("threads")
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PgrtConfig":
        """Build from a JSON-shaped mapping; nested stage configs may be partial."""
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        kw = dict(d)
        for name, typ in (("grm_supervised", grm.GrmTrainConfig), ("grm_pairwise", grm.GrmTrainConfig)):
            if name in kw:
                kw[name] = replace(typ(), **kw[name])
        if "grpo" in kw:
            kw["grpo"] = replace(cls.grpo, **kw["grpo"])
        if "bench_splits" in kw:
            kw["bench_splits"] = tuple(kw["bench_splits"])
        return cls(**kw)


@dataclass(frozen=True)
class RoundRecord:
    round: int
    acc_perturbed: float
    acc_policy: float
    n_pairs_perturbed: int  # pairs consumed by this round's reward training
    n_pairs_policy: int
    bench: bench.SplitScores  # overall benchmark scores of this round's policy
    reward_trace: tuple = ()  # GRPO mean reward per step


@dataclass
class PgrtReport:
    config: dict
    rounds: list = field(default_factory=list)
    sft_bench: bench.SplitScores | None = None
    n_eval_perturbed: int = 0
    n_eval_policy: int = 0
    n_train_items: int = 0
    n_eval_items: int = 0
    final_policy: policy.PolicyModel | None = field(default=None, repr=False)
    final_reward: object = field(default=None, repr=False)


# --- data ---------------------------------------------------------------------------


def is_eval_item(image_id: str, fraction: float = 0.2) -> bool:
    """Held-out membership from a hash of the image id alone."""
    h = int.from_bytes(hashlib.sha256(image_id.encode()).digest()[:8], "big")
    return h < fraction * 2**64


def split_corpus(items: Sequence, fraction: float = 0.2) -> tuple[list, list]:
    train, held = [], []
    for item in items:
        (held if is_eval_item(item.image_id, fraction) else train).append(item)
    return train, held


def collect_policy_pairs(
    model: policy.PolicyModel, dataset: Sequence, delta: float, seed: int, threads: int | None = None
) -> list[PairSample]:
    """One sampled policy edit per datum, kept as the weak side when it is ``delta`` away from the strong edit.

    ``dataset`` holds objects with image_id, before, program, goal and strong_img
    (e.g. BenchTask).
    """
    if not dataset:
        raise ValueError("empty dataset")
    if delta < 0:
        raise ValueError("delta must be non-negative")

    def one(item):
        x = policy.policy_features(item.before, item.goal)
        _, program = policy.sample_action(model, x, derive_seed(seed, item.image_id), item.goal.region_hint)
        weak_img = execute(item.before, program)
        if oracle_distance(weak_img, item.strong_img) < delta:
            return None
        return PairSample(
            item.before,
            item.program,
            program,
            item.strong_img,
            weak_img,
            item.goal,
            "policy",
            tau=delta,
            image_id=item.image_id,
        )

    return [p for p in pmap(one, list(dataset), threads) if p is not None]


def mix_pairs(policy_pairs: list, perturbed_pairs: list, rho: float, seed: int) -> tuple[list, list]:
    """Subsets of both populations such that policy pairs make up a ``rho`` share."""
    rng = np.random.default_rng(seed)
    n_pol, n_per = len(policy_pairs), len(perturbed_pairs)
    if rho == 0.0:
        n_pol = 0
    elif rho == 1.0:
        n_per = 0
    else:
        want = int(round(n_pol * (1.0 - rho) / rho))
        if want <= n_per:
            n_per = want
        else:
            n_pol = int(round(n_per * rho / (1.0 - rho)))
    pol = [policy_pairs[i] for i in np.sort(rng.permutation(len(policy_pairs))[:n_pol])]
    per = [perturbed_pairs[i] for i in np.sort(rng.permutation(len(perturbed_pairs))[:n_per])]
    return pol, per


# --- orchestration ---------------------------------------------------------------------


class _Stage:
    def __init__(self, name: str, round_index: int):
        self.name, self.round_index = name, round_index

    def __enter__(self):
        log.info("round %d: %s", self.round_index, self.name)
        return self

    def __exit__(self, exc_type, exc, tb):
        if exc is not None and not isinstance(exc, PgrtError):
            raise PgrtError(self.name, self.round_index, exc) from exc
        return False


def _accuracy(model, pairs) -> float:
    return grm.eval_pairwise_accuracy(model, pairs) if pairs else float("nan")


def run_alternation(
    cfg: PgrtConfig,
    corpus,
    *,
    out_dir=None,
    reward_override=None,
) -> PgrtReport:
    """Round 0 trains on perturbed pairs only; later rounds add pairs sampled from the previous policy.

    ``corpus`` is a task directory (see :func:`bench.export_tasks`) or a sequence
    of BenchTask. ``reward_override`` replaces the GRM by a frozen
    ``(before, after, goal) -> float`` callable whose value is the whole reward
    (no GRM training, no format bonus). With ``out_dir`` the report is written
    after every round and also when a stage fails.
    """
    if isinstance(corpus, (str, Path)):
        corpus = bench.load_tasks(corpus)
    items = list(corpus)
    report = PgrtReport(config=cfg.to_dict())

    def persist():
        if out_dir is not None:
            write_report(report, out_dir)

    try:
        _run(cfg, items, report, persist, reward_override)
    except PgrtError:
        persist()
        raise
    persist()
    return report


def _run(cfg, items, report, persist, reward_override):
    seed, threads = cfg.seed, cfg.threads
    with _Stage("split", 0):
        train, held = split_corpus(items, cfg.eval_fraction)
        if not train or not held:
            raise ValueError("corpus too small for a train/eval split")
        report.n_train_items, report.n_eval_items = len(train), len(held)
    with _Stage("benchmark tasks", 0):
        bench_tasks = []
        for split in cfg.bench_splits:
            bench_tasks += bench.generate_tasks(split, cfg.bench_n, cfg.bench_seed, cfg.bench_size)

    def bench_scores(model):
        return bench.evaluate(model, bench_tasks, threads=threads).overall

    with _Stage("perturbed pairs", 0):
        mix = StrategyMix.parse(cfg.strategy)
        perturbed, _ = build_pairs(
            train, mix, derive_seed(seed, "pairs", "train"), tau=cfg.tau, pairs_per_item=cfg.pairs_per_item, threads=threads
        )
        perturbed_eval, _ = build_pairs(
            held, mix, derive_seed(seed, "pairs", "eval"), tau=cfg.tau, pairs_per_item=cfg.pairs_per_item, threads=threads
        )
        report.n_eval_perturbed = len(perturbed_eval)

    with _Stage("policy sft", 0):
        sft = policy.fit_sft([(t.before, t.goal, t.gt_program) for t in train], ridge=cfg.sft_ridge)
        report.sft_bench = bench_scores(sft)

    if reward_override is None:
        with _Stage("reward supervised", 0):
            model = grm.train_supervised(perturbed, replace(cfg.grm_supervised, seed=derive_seed(seed, "grm", 0))).model
        with _Stage("reward pairwise", 0):
            model = grm.train_pairwise(model, perturbed, replace(cfg.grm_pairwise, seed=derive_seed(seed, "grm", 0, "pw"))).model
        reward_fn = None
    else:
        model = reward_override

        def reward_fn(before, after, goal, raw):
            return reward_override(before, after, goal)

    current = sft
    policy_eval: list = []
    for r in range(cfg.rounds):
        n_per, n_pol = (len(perturbed), 0) if r == 0 and reward_override is None else (0, 0)
        if r > 0 and reward_override is None:
            with _Stage("policy pairs", r):
                collected = collect_policy_pairs(current, train, cfg.delta, derive_seed(seed, "policy-pairs", r), threads)
            with _Stage("reward pgrt", r):
                pol, per = mix_pairs(collected, perturbed, cfg.rho, derive_seed(seed, "mix", r))
                if len(pol) + len(per) >= 10:
                    model = grm.train_pairwise(
                        model, pol + per, replace(cfg.grm_pairwise, seed=derive_seed(seed, "grm", r))
                    ).model
                    n_per, n_pol = len(per), len(pol)
                else:
                    log.warning("round %d: only %d pairs, reward model left unchanged", r, len(pol) + len(per))
        with _Stage("policy grpo", r):
            grpo_cfg = replace(cfg.grpo, seed=derive_seed(seed, "grpo", r))
            if r > 0:
                # later rounds continue from the previous policy's exploration scale
                grpo_cfg = replace(grpo_cfg, explore_log_std=None)
            result = policy.train_grpo(current, model, train, grpo_cfg, reward_fn=reward_fn, threads=threads)
            current = result.model
        if r == 0:
            with _Stage("held-out policy pairs", r):
                policy_eval = collect_policy_pairs(current, held, cfg.delta, derive_seed(seed, "policy-pairs", "eval"), threads)
                report.n_eval_policy = len(policy_eval)
        with _Stage("evaluation", r):
            report.rounds.append(
                RoundRecord(
                    r,
                    _accuracy(model, perturbed_eval),
                    _accuracy(model, policy_eval),
                    n_per,
                    n_pol,
                    bench_scores(current),
                    tuple(result.reward_trace),
                )
            )
        persist()
    report.final_policy = current
    report.final_reward = model


# --- reports -------------------------------------------------------------------------


def _fmt(v) -> str:
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return "nan" if v != v else f"{v:.6f}"


def report_csv(report: PgrtReport) -> str:
    lines = [",".join(CSV_COLUMNS)]
    if report.sft_bench is not None:
        b = report.sft_bench
        lines.append(",".join(["sft", "", "", "", ""] + [_fmt(getattr(b, m)) for m in bench.METRIC_NAMES]))
    for rec in report.rounds:
        row = [str(rec.round), _fmt(rec.acc_perturbed), _fmt(rec.acc_policy), _fmt(rec.n_pairs_perturbed), _fmt(rec.n_pairs_policy)]
        row += [_fmt(getattr(rec.bench, m)) for m in bench.METRIC_NAMES]
        lines.append(",".join(row))
    return "\n".join(lines) + "\n"


def report_markdown(report: PgrtReport) -> str:
    out = ["# Policy-guided reward training report", ""]
    out.append(
        f"{report.n_train_items} training items, {report.n_eval_items} held-out items; "
        f"{report.n_eval_perturbed} held-out perturbed pairs, {report.n_eval_policy} held-out policy pairs."
    )
    out += ["", "| round | acc perturbed | acc policy | perturbed pairs | policy pairs | L1 | L2 | PSNR | SSIM |"]
    out.append("|---|---|---|---|---|---|---|---|---|")
    if report.sft_bench is not None:
        b = report.sft_bench
        out.append(f"| sft | | | | | {b.l1:.3f} | {b.l2:.3f} | {b.psnr:.3f} | {b.ssim:.4f} |")
    for rec in report.rounds:
        b = rec.bench
        out.append(
            f"| {rec.round} | {rec.acc_perturbed:.3f} | {rec.acc_policy:.3f} | {rec.n_pairs_perturbed} | "
            f"{rec.n_pairs_policy} | {b.l1:.3f} | {b.l2:.3f} | {b.psnr:.3f} | {b.ssim:.4f} |"
        )
    out += ["", "Accuracies are on held-out pairs; the policy pairs come from the round-0 policy.", ""]
    out += ["## Config", "", "```json", json.dumps(report.config, indent=2, sort_keys=True), "```", ""]
    return "\n".join(out)


def write_report(report: PgrtReport, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.csv").write_bytes(report_csv(report).encode())
    (out / "report.md").write_bytes(report_markdown(report).encode())
