"""Gaussian linear editing policy: ridge-regression SFT and group-relative policy-gradient RL."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .dsl import EditProgram, LocalOp, MaskSpec, ScalarOp
from .engine import execute
from .goal import GOAL_DIM, GoalDescriptor
from .grm import GrmModel, score
from .image import ImageBuffer, image_stats
from .modelfile import read_blocks, write_blocks
from .parallel import pmap

log = logging.getLogger(__name__)

GLOBAL_ACTIONS = (
    "exposure",
    "contrast",
    "temperature",
    "tint",
    "highlights",
    "shadows",
    "whites",
    "blacks",
    "vibrance",
    "saturation",
)
LOCAL_ACTIONS = ("exposure", "saturation", "temperature")
ACTION_DIM = len(GLOBAL_ACTIONS) + len(LOCAL_ACTIONS)
ACTION_SCALE = np.array([5.0 if k == "exposure" else 100.0 for k in GLOBAL_ACTIONS + LOCAL_ACTIONS])
FEATURE_DIM = 6 + 8 + GOAL_DIM
SPARSITY = 0.5  # native units below which an op is dropped
LOG_STD_BOUNDS = (-6.0, 1.0)
GLOBAL_MASK = np.r_[np.ones(len(GLOBAL_ACTIONS), bool), np.zeros(len(LOCAL_ACTIONS), bool)]


# --- model and features ----------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class PolicyModel:
    mean_map: np.ndarray  # (ACTION_DIM, FEATURE_DIM)
    log_std: np.ndarray  # (ACTION_DIM,)

    def __post_init__(self):
        mm = np.array(self.mean_map, dtype=float).reshape(ACTION_DIM, FEATURE_DIM)
        ls = np.clip(np.array(self.log_std, dtype=float).reshape(ACTION_DIM), *LOG_STD_BOUNDS)
        if not (np.all(np.isfinite(mm)) and np.all(np.isfinite(ls))):
            raise ValueError("policy parameters must be finite")
        object.__setattr__(self, "mean_map", mm)
        object.__setattr__(self, "log_std", ls)

    @classmethod
    def initial(cls, log_std: float = -1.0) -> "PolicyModel":
        return cls(np.zeros((ACTION_DIM, FEATURE_DIM)), np.full(ACTION_DIM, log_std))

    def same_as(self, other: "PolicyModel") -> bool:
        return np.array_equal(self.mean_map, other.mean_map) and np.array_equal(self.log_std, other.log_std)


def policy_features(img: ImageBuffer, goal: GoalDescriptor) -> np.ndarray:
    st = image_stats(img)
    return np.concatenate([st.summary(), st.luma_hist, goal.encode()])


def active_dims(goal: GoalDescriptor) -> np.ndarray:
    """Which action components the policy emits for this goal."""
    return np.ones(ACTION_DIM, bool) if goal.region_hint is not None else GLOBAL_MASK


# --- actions <-> programs --------------------------------------------------------------


def decode_action(action: np.ndarray, region_hint: MaskSpec | None = None) -> EditProgram:
    """Program for a normalised action; components are clamped to [-1, 1] first."""
    native = np.clip(np.asarray(action, dtype=float), -1.0, 1.0) * ACTION_SCALE
    ops = []
    for name, value in zip(GLOBAL_ACTIONS, native[: len(GLOBAL_ACTIONS)]):
        if abs(value) >= SPARSITY:
            ops.append(ScalarOp(name, float(value)))
    if region_hint is not None:
        adj = {
            name: float(value)
            for name, value in zip(LOCAL_ACTIONS, native[len(GLOBAL_ACTIONS) :])
            if abs(value) >= SPARSITY
        }
        if adj:
            ops.append(LocalOp(1, region_hint, **adj))
    return EditProgram(tuple(ops))


def encode_program(p: EditProgram) -> np.ndarray:
    """Normalised action vector of a program (ops outside the action space are ignored)."""
    action = np.zeros(ACTION_DIM)
    for i, name in enumerate(GLOBAL_ACTIONS):
        action[i] = p.scalar(name)
    locals_ = p.local_ops()
    if locals_:
        adj = locals_[0].adjustments()
        for j, name in enumerate(LOCAL_ACTIONS):
            action[len(GLOBAL_ACTIONS) + j] = adj.get(name, 0.0)
    return np.clip(action / ACTION_SCALE, -1.0, 1.0)


def format_reward(raw: np.ndarray) -> float:
    """1 when every raw component is already inside [-1, 1], else 0."""
    raw = np.asarray(raw, dtype=float)
    return 1.0 if bool(np.all(np.abs(raw) <= 1.0)) else 0.0


def mean_action(model: PolicyModel, x: np.ndarray) -> np.ndarray:
    return model.mean_map @ x


def sample_action(model: PolicyModel, x: np.ndarray, seed, region_hint: MaskSpec | None = None):
    """Draw ``raw = mean + std * eps`` and decode it; returns ``(raw, program)``."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    eps = rng.standard_normal(ACTION_DIM)
    raw = mean_action(model, x) + np.exp(model.log_std) * eps
    return raw, decode_action(raw, region_hint)


def mean_program(model: PolicyModel, img: ImageBuffer, goal: GoalDescriptor) -> EditProgram:
    return decode_action(mean_action(model, policy_features(img, goal)), goal.region_hint)


# --- supervised fitting ----------------------------------------------------------------


class SingularSystemError(np.linalg.LinAlgError):
    pass


def fit_sft(demos: Sequence, ridge: float = 1e-2, seed: int = 0, log_std: float = -1.0) -> PolicyModel:
    """Ridge regression of demonstration actions on policy features.

    ``demos`` holds ``(img, goal, program)`` triples. The objective is the
    per-demo mean squared error plus ``ridge * |W|^2``, so repeating the whole
    demo set leaves the solution unchanged. ``seed`` is accepted for interface
    symmetry; the closed-form solve is deterministic.
    """
    if not demos:
        raise ValueError("need at least one demonstration")
    X = np.array([policy_features(img, goal) for img, goal, _ in demos])
    Y = np.array([encode_program(p) for _, _, p in demos])
    n = len(demos)
    gram = X.T @ X / n + ridge * np.eye(FEATURE_DIM)
    rhs = X.T @ Y / n
    if ridge <= 0.0 and np.linalg.matrix_rank(gram) < FEATURE_DIM:
        raise SingularSystemError("normal equations are singular; use ridge > 0")
    W = np.linalg.solve(gram, rhs).T
    return PolicyModel(W, np.full(ACTION_DIM, log_std))


# --- GRPO --------------------------------------------------------------------------------


@dataclass(frozen=True)
class GrpoConfig:
    group_size: int = 8
    steps: int = 200
    lr: float = 0.003
    seed: int = 0
    tasks_per_step: int = 32  # 0 = every task every step
    adam: bool = True
    # if set, exploration restarts from this log-std; the SFT default of -1 explores
    # too widely for the reward's sharp optimum
    explore_log_std: float | None = None


@dataclass
class GrpoResult:
    model: PolicyModel
    reward_trace: list = field(default_factory=list)  # mean total reward per step
    degenerate_groups: int = 0


RewardFn = Callable[[ImageBuffer, ImageBuffer, GoalDescriptor, np.ndarray], float]


def group_advantages(rewards: np.ndarray) -> np.ndarray:
    """(r - mean) / (std + 1e-8); all zeros when the group has no spread."""
    rewards = np.asarray(rewards, dtype=float)
    std = rewards.std()
    if std == 0.0:
        return np.zeros_like(rewards)
    return (rewards - rewards.mean()) / (std + 1e-8)


def log_prob_grad(model: PolicyModel, x: np.ndarray, raws: np.ndarray, weights: np.ndarray, active: np.ndarray):
    """Gradient of sum_i weights[i] * log N(raw_i; W x, exp(log_std)) over the active dims."""
    mu = model.mean_map @ x
    inv_var = np.exp(-2.0 * model.log_std)
    diff = raws - mu
    g_mu = (weights[:, None] * diff * inv_var).sum(axis=0) * active
    g_ls = (weights[:, None] * (diff**2 * inv_var - 1.0)).sum(axis=0) * active
    return np.outer(g_mu, x), g_ls


def surrogate_objective(model: PolicyModel, x: np.ndarray, raws: np.ndarray, weights: np.ndarray, active: np.ndarray) -> float:
    """sum_i weights[i] * log N(raw_i; W x, exp(log_std)) on the active dims (frozen samples)."""
    mu = model.mean_map @ x
    std = np.exp(model.log_std)
    z = (raws - mu) / std
    lp = -0.5 * z**2 - model.log_std - 0.5 * np.log(2 * np.pi)
    return float((weights[:, None] * lp * active).sum())


def grm_reward(grm) -> RewardFn:
    """Total reward ``score + format`` for a GrmModel or any ``(before, after, goal) -> float`` callable."""
    if isinstance(grm, GrmModel):
        def base(before, after, goal):
            return score(grm, before, after, goal)
    else:
        base = grm

    def reward(before, after, goal, raw):
        return base(before, after, goal) + format_reward(raw)

    return reward


class _AdamAscent:
    def __init__(self, shapes, lr):
        self.lr = lr
        self.m = [np.zeros(s) for s in shapes]
        self.v = [np.zeros(s) for s in shapes]
        self.t = 0

    def steps(self, grads):
        self.t += 1
        out = []
        for i, g in enumerate(grads):
            self.m[i] = 0.9 * self.m[i] + 0.1 * g
            self.v[i] = 0.999 * self.v[i] + 0.001 * g * g
            mhat = self.m[i] / (1 - 0.9**self.t)
            vhat = self.v[i] / (1 - 0.999**self.t)
            out.append(self.lr * mhat / (np.sqrt(vhat) + 1e-8))
        return out


def train_grpo(
    model: PolicyModel,
    grm,
    tasks: Sequence,
    cfg: GrpoConfig = GrpoConfig(),
    *,
    reward_fn: RewardFn | None = None,
    threads: int | None = None,
) -> GrpoResult:
    """Group-relative policy gradient against a reward model.

    ``tasks`` are objects with ``before`` and ``goal``. Each step draws
    ``cfg.tasks_per_step`` tasks, samples ``group_size`` actions per task,
    executes them, normalises rewards within each group and ascends the
    advantage-weighted log-likelihood.
    """
    if cfg.group_size < 2:
        raise ValueError("group size must be >= 2")
    if not tasks:
        raise ValueError("no tasks")
    reward = reward_fn or grm_reward(grm)
    feats = [policy_features(t.before, t.goal) for t in tasks]
    rng = np.random.default_rng(cfg.seed)
    opt = _AdamAscent([model.mean_map.shape, model.log_std.shape], cfg.lr) if cfg.adam else None
    trace = []
    degenerate = 0
    W, ls = model.mean_map.copy(), model.log_std.copy()
    if cfg.explore_log_std is not None:
        ls = np.clip(np.full(ACTION_DIM, float(cfg.explore_log_std)), *LOG_STD_BOUNDS)
    K = cfg.group_size
    for step in range(cfg.steps):
        current = PolicyModel(W, ls)
        if cfg.tasks_per_step and cfg.tasks_per_step < len(tasks):
            chosen = np.sort(rng.choice(len(tasks), size=cfg.tasks_per_step, replace=False))
        else:
            chosen = np.arange(len(tasks))
        eps = rng.standard_normal((len(chosen), K, ACTION_DIM))
        std = np.exp(current.log_std)
        jobs = []
        for j, ti in enumerate(chosen):
            mu = current.mean_map @ feats[ti]
            for i in range(K):
                jobs.append((ti, mu + std * eps[j, i]))

        def rollout(job):
            ti, raw = job
            task = tasks[ti]
            prog = decode_action(raw, task.goal.region_hint)
            return reward(task.before, execute(task.before, prog, check=False), task.goal, raw[active_dims(task.goal)])

        rewards = np.array(pmap(rollout, jobs, threads)).reshape(len(chosen), K)
        trace.append(float(rewards.mean()))
        gW = np.zeros_like(W)
        gls = np.zeros_like(ls)
        for j, ti in enumerate(chosen):
            adv = group_advantages(rewards[j])
            if not adv.any():
                degenerate += 1
                continue
            raws = np.array([jobs[j * K + i][1] for i in range(K)])
            a, b = log_prob_grad(current, feats[ti], raws, adv / K, active_dims(tasks[ti].goal))
            gW += a
            gls += b
        gW /= len(chosen)
        gls /= len(chosen)
        if not (gW.any() or gls.any()):
            continue
        if opt is not None:
            dW, dls = opt.steps([gW, gls])
        else:
            dW, dls = cfg.lr * gW, cfg.lr * gls
        W = W + dW
        ls = np.clip(ls + dls, *LOG_STD_BOUNDS)
    if degenerate:
        log.info("GRPO: %d groups had zero reward spread and were skipped", degenerate)
    return GrpoResult(PolicyModel(W, ls), trace, degenerate)


# --- persistence -------------------------------------------------------------------------

MODEL_HEADER = "retouch-policy 1"


def model_to_text(model: PolicyModel) -> str:
    return write_blocks(MODEL_HEADER, {"mean_map": model.mean_map, "log_std": model.log_std})


def model_from_text(text: str) -> PolicyModel:
    b = read_blocks(text, MODEL_HEADER)
    return PolicyModel(b["mean_map"], b["log_std"])


def save_model(model: PolicyModel, path) -> None:
    with open(path, "w") as fh:
        fh.write(model_to_text(model))


def load_model(path) -> PolicyModel:
    with open(path) as fh:
        return model_from_text(fh.read())
