"""Gated linear reward model: goal -> metric gate, then gate-weighted agreement score.

The model never sees the strong (reference) image when scoring. The reference
is used only to build supervised targets during training.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .goal import DELTA_KEYS, GOAL_DIM, STYLE_TAGS, GoalDescriptor
from .image import FeatureStats, ImageBuffer, image_stats
from .metrics import DimensionMismatch, oracle_distance
from .modelfile import read_blocks, write_blocks

FEATURE_NAMES = (
    "d_mean_luma",
    "d_std_luma",
    "d_mean_saturation",
    "d_warmth",
    "d_clipped_high",
    "d_clipped_low",
    "mean_luma",
    "std_luma",
    "mean_saturation",
    "warmth",
    "clipped_high",
    "clipped_low",
)
K = len(FEATURE_NAMES)
N_DELTAS = 6
TARGET_FEATURE = {key: i for i, key in enumerate(DELTA_KEYS)}
# (feature index, direction) rewarded by each style tag
STYLE_DIRECTIONS = {
    "warm": ((9, 1.0),),
    "cool": ((9, -1.0),),
    "bw": ((8, -1.0),),
    "vivid": ((2, 1.0),),
    "matte": ((1, -1.0),),
    "dramatic": ((1, 1.0),),
}
SCORE_CEILING = 10.0
DISTANCE_PER_POINT = 12.8


class TrainingError(RuntimeError):
    pass


# --- features ------------------------------------------------------------------------


def features_from_stats(before: FeatureStats, after: FeatureStats) -> np.ndarray:
    b, a = before.summary(), after.summary()
    return np.concatenate([a - b, a])


def extract_features(before: ImageBuffer, after: ImageBuffer) -> np.ndarray:
    if before.shape != after.shape:
        raise DimensionMismatch(f"image sizes differ: {before.shape} vs {after.shape}")
    return features_from_stats(image_stats(before), image_stats(after))


def agreement(goal: GoalDescriptor, f: np.ndarray) -> np.ndarray:
    """Per-feature agreement terms; features the goal says nothing about get 0."""
    f = np.asarray(f, dtype=float)
    a = np.zeros(K)
    claimed = np.zeros(K, dtype=bool)
    for key, target in goal.target_deltas.items():
        k = TARGET_FEATURE[key]
        a[k] = -((f[k] - target) ** 2)
        claimed[k] = True
    if goal.style_tag == "neutral":
        for k in range(N_DELTAS):
            if not claimed[k]:
                a[k] = -abs(f[k])
    else:
        for k, direction in STYLE_DIRECTIONS[goal.style_tag]:
            if not claimed[k]:
                a[k] = direction * f[k]
    return a


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


# --- model ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class GrmModel:
    gate_map: np.ndarray  # (K, GOAL_DIM) gate logits per goal-encoding entry
    log_scales: np.ndarray  # (K,) metric scales = exp(log_scales) > 0
    score_bias: float = 5.0

    def __post_init__(self):
        gm = np.array(self.gate_map, dtype=float).reshape(K, GOAL_DIM)
        ls = np.array(self.log_scales, dtype=float).reshape(K)
        if not (np.all(np.isfinite(gm)) and np.all(np.isfinite(ls)) and np.isfinite(self.score_bias)):
            raise ValueError("reward model parameters must be finite")
        object.__setattr__(self, "gate_map", gm)
        object.__setattr__(self, "log_scales", ls)
        object.__setattr__(self, "score_bias", float(self.score_bias))

    @classmethod
    def initial(cls, init_scale: float = 100.0, bias: float = 5.0) -> "GrmModel":
        return cls(np.zeros((K, GOAL_DIM)), np.full(K, np.log(init_scale)), bias)

    @property
    def scales(self) -> np.ndarray:
        return np.exp(self.log_scales)

    def flat(self) -> np.ndarray:
        return np.concatenate([self.gate_map.ravel(), self.log_scales, [self.score_bias]])

    @classmethod
    def from_flat(cls, theta: np.ndarray) -> "GrmModel":
        n = K * GOAL_DIM
        return cls(theta[:n].reshape(K, GOAL_DIM), theta[n : n + K], float(theta[n + K]))

    def same_as(self, other: "GrmModel") -> bool:
        return np.array_equal(self.flat(), other.flat())


def propose_metrics(model: GrmModel, goal: GoalDescriptor) -> np.ndarray:
    """Metric gate in [0, 1]^K for this goal."""
    return _sigmoid(model.gate_map @ goal.encode())


def score_features(model: GrmModel, goal: GoalDescriptor, f: np.ndarray) -> float:
    gate = propose_metrics(model, goal)
    return float(np.sum(gate * model.scales * agreement(goal, f)) + model.score_bias)


def score(model: GrmModel, before: ImageBuffer, after: ImageBuffer, goal: GoalDescriptor) -> float:
    return score_features(model, goal, extract_features(before, after))


# --- batched training math -----------------------------------------------------------


@dataclass
class ScoreBatch:
    """Goal encodings ``E`` (N, GOAL_DIM) and agreement vectors ``A`` (N, K)."""

    E: np.ndarray
    A: np.ndarray


def batch_scores(theta: np.ndarray, batch: ScoreBatch) -> np.ndarray:
    m = GrmModel.from_flat(theta)
    gate = _sigmoid(batch.E @ m.gate_map.T)
    return (gate * m.scales * batch.A).sum(axis=1) + m.score_bias


def _score_grad(theta: np.ndarray, batch: ScoreBatch, weights: np.ndarray) -> np.ndarray:
    """Sum over rows of weights[i] * d score_i / d theta."""
    m = GrmModel.from_flat(theta)
    gate = _sigmoid(batch.E @ m.gate_map.T)
    sa = m.scales * batch.A
    d_logits = (weights[:, None] * gate * (1.0 - gate) * sa)  # (N, K)
    g_map = d_logits.T @ batch.E
    g_ls = (weights[:, None] * gate * sa).sum(axis=0)
    g_b = weights.sum()
    return np.concatenate([g_map.ravel(), g_ls, [g_b]])


def supervised_loss(theta: np.ndarray, batch: ScoreBatch, targets: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean squared error of scores against targets, with gradient."""
    r = batch_scores(theta, batch)
    resid = r - targets
    n = len(targets)
    return float(np.mean(resid**2)), _score_grad(theta, batch, 2.0 * resid / n)


def pairwise_loss(theta: np.ndarray, strong: ScoreBatch, weak: ScoreBatch) -> tuple[float, np.ndarray]:
    """Mean logistic loss -log sigmoid(r_strong - r_weak), with gradient."""
    d = batch_scores(theta, strong) - batch_scores(theta, weak)
    n = len(d)
    loss = float(np.mean(np.logaddexp(0.0, -d)))
    w = -_sigmoid(-d) / n
    return loss, _score_grad(theta, strong, w) - _score_grad(theta, weak, w)


# --- training ------------------------------------------------------------------------


@dataclass(frozen=True)
class GrmTrainConfig:
    lr: float = 0.05
    epochs: int = 300
    seed: int = 0
    batch_size: int = 0  # 0 = full batch
    init_scale: float = 100.0


@dataclass
class TrainResult:
    model: GrmModel
    final_loss: float
    losses: list = field(default_factory=list)


def annotation_target(after: ImageBuffer, strong_img: ImageBuffer) -> float:
    """Privileged 0-10 score: 10 minus the oracle distance to the strong edit, in 12.8-unit steps."""
    return SCORE_CEILING - min(SCORE_CEILING, oracle_distance(after, strong_img) / DISTANCE_PER_POINT)


def _pair_features(pair) -> tuple[np.ndarray, np.ndarray]:
    cache = pair.__dict__.setdefault("_grm_features", {})
    if "f" not in cache:
        sb = image_stats(pair.before)
        cache["f"] = (
            features_from_stats(sb, image_stats(pair.strong_img)),
            features_from_stats(sb, image_stats(pair.weak_img)),
        )
    return cache["f"]


def pair_batches(pairs: Sequence, swap: bool = False) -> tuple[ScoreBatch, ScoreBatch]:
    E = np.array([p.goal.encode() for p in pairs]).reshape(-1, GOAL_DIM)
    fs, fw = [], []
    for p in pairs:
        a, b = _pair_features(p)
        fs.append(agreement(p.goal, a))
        fw.append(agreement(p.goal, b))
    As = np.array(fs).reshape(-1, K)
    Aw = np.array(fw).reshape(-1, K)
    if swap:
        As, Aw = Aw, As
    return ScoreBatch(E, As), ScoreBatch(E, Aw)


class _Adam:
    def __init__(self, n: int, lr: float, b1: float = 0.9, b2: float = 0.999, eps: float = 1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        self.m = np.zeros(n)
        self.v = np.zeros(n)
        self.t = 0

    def step(self, grad: np.ndarray) -> np.ndarray:
        """Return the descent step for ``grad``."""
        self.t += 1
        self.m = self.b1 * self.m + (1 - self.b1) * grad
        self.v = self.b2 * self.v + (1 - self.b2) * grad * grad
        mhat = self.m / (1 - self.b1**self.t)
        vhat = self.v / (1 - self.b2**self.t)
        return self.lr * mhat / (np.sqrt(vhat) + self.eps)


def _optimize(theta0: np.ndarray, n_rows: int, loss_fn, cfg: GrmTrainConfig) -> tuple[np.ndarray, float, list]:
    if cfg.lr == 0.0 or cfg.epochs == 0:
        return theta0.copy(), float(loss_fn(theta0, np.arange(n_rows))[0]), []
    theta = theta0.copy()
    opt = _Adam(theta.size, cfg.lr)
    rng = np.random.default_rng(cfg.seed)
    losses = []
    bs = cfg.batch_size if 0 < cfg.batch_size < n_rows else n_rows
    for epoch in range(cfg.epochs):
        order = rng.permutation(n_rows) if bs < n_rows else np.arange(n_rows)
        for start in range(0, n_rows, bs):
            idx = order[start : start + bs]
            loss, grad = loss_fn(theta, idx)
            if not (np.isfinite(loss) and np.all(np.isfinite(grad))):
                raise TrainingError(f"non-finite loss at epoch {epoch}, batch offset {start}")
            theta = theta - opt.step(grad)
        losses.append(loss)
    final = float(loss_fn(theta, np.arange(n_rows))[0])
    if not np.isfinite(final):
        raise TrainingError("non-finite final loss")
    return theta, final, losses


def _subset(batch: ScoreBatch, idx) -> ScoreBatch:
    return ScoreBatch(batch.E[idx], batch.A[idx])


def supervised_targets(pairs: Sequence) -> np.ndarray:
    out = []
    for p in pairs:
        out.append(annotation_target(p.strong_img, p.strong_img))
        out.append(annotation_target(p.weak_img, p.strong_img))
    return np.array(out)


def train_supervised(
    pairs: Sequence, cfg: GrmTrainConfig = GrmTrainConfig(), model: GrmModel | None = None, min_pairs: int = 10
) -> TrainResult:
    """Least-squares fit of scores to the privileged annotation targets of strong and weak edits."""
    if not pairs:
        raise TrainingError("empty pair set")
    if len(pairs) < min_pairs:
        raise TrainingError(f"need at least {min_pairs} pairs, got {len(pairs)}")
    strong, weak = pair_batches(pairs)
    # interleave strong/weak rows to match supervised_targets
    E = np.repeat(strong.E, 2, axis=0)
    A = np.empty((2 * len(pairs), K))
    A[0::2], A[1::2] = strong.A, weak.A
    batch = ScoreBatch(E, A)
    targets = supervised_targets(pairs)
    model = model or GrmModel.initial(cfg.init_scale)

    def loss_fn(theta, idx):
        return supervised_loss(theta, _subset(batch, idx), targets[idx])

    theta, final, losses = _optimize(model.flat(), len(targets), loss_fn, cfg)
    return TrainResult(GrmModel.from_flat(theta), final, losses)


def train_pairwise_batches(model: GrmModel, strong: ScoreBatch, weak: ScoreBatch, cfg: GrmTrainConfig) -> TrainResult:
    def loss_fn(theta, idx):
        return pairwise_loss(theta, _subset(strong, idx), _subset(weak, idx))

    theta, final, losses = _optimize(model.flat(), len(strong.E), loss_fn, cfg)
    return TrainResult(GrmModel.from_flat(theta), final, losses)


def train_pairwise(
    model: GrmModel, pairs: Sequence, cfg: GrmTrainConfig = GrmTrainConfig(), *, swap: bool = False, min_pairs: int = 10
) -> TrainResult:
    """Minimise the logistic surrogate of the strong-beats-weak indicator.

    ``swap`` exchanges strong and weak (label-flip control).
    """
    if not pairs:
        raise TrainingError("empty pair set")
    if len(pairs) < min_pairs:
        raise TrainingError(f"need at least {min_pairs} pairs, got {len(pairs)}")
    strong, weak = pair_batches(pairs, swap=swap)
    return train_pairwise_batches(model, strong, weak, cfg)


def pair_scores(model: GrmModel, pairs: Sequence) -> tuple[np.ndarray, np.ndarray]:
    strong, weak = pair_batches(pairs)
    theta = model.flat()
    return batch_scores(theta, strong), batch_scores(theta, weak)


def accuracy_from_scores(strong_scores, weak_scores) -> float:
    s = np.asarray(strong_scores)
    w = np.asarray(weak_scores)
    if s.size == 0:
        raise ValueError("accuracy of an empty pair set is undefined")
    return float(np.mean(s > w))


def eval_pairwise_accuracy(model, pairs: Sequence) -> float:
    """Fraction of pairs where the strong edit scores strictly higher (ties are errors).

    ``model`` is a GrmModel or any ``(before, after, goal) -> float`` callable.
    """
    if not pairs:
        raise ValueError("accuracy of an empty pair set is undefined")
    if isinstance(model, GrmModel):
        return accuracy_from_scores(*pair_scores(model, pairs))
    strong = [model(p.before, p.strong_img, p.goal) for p in pairs]
    weak = [model(p.before, p.weak_img, p.goal) for p in pairs]
    return accuracy_from_scores(strong, weak)


# --- persistence ---------------------------------------------------------------------

MODEL_HEADER = "retouch-grm 1"


def model_to_text(model: GrmModel) -> str:
    return write_blocks(
        MODEL_HEADER,
        {"gate_map": model.gate_map, "log_scales": model.log_scales, "score_bias": np.array([model.score_bias])},
    )


def model_from_text(text: str) -> GrmModel:
    b = read_blocks(text, MODEL_HEADER)
    return GrmModel(b["gate_map"], b["log_scales"], float(b["score_bias"][0]))


def save_model(model: GrmModel, path) -> None:
    with open(path, "w") as fh:
        fh.write(model_to_text(model))


def load_model(path) -> GrmModel:
    with open(path) as fh:
        return model_from_text(fh.read())


class ConstantReward:
    """Zero-capacity reward: scores every edit the same."""

    def __init__(self, value: float = 5.0):
        self.value = float(value)

    def __call__(self, before: ImageBuffer, after: ImageBuffer, goal: GoalDescriptor) -> float:
        return self.value
