"""Weak-edit manufacture: rule-based perturbation of strong programs and filtered pair building."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import dsl
from .dsl import EditProgram, HslOp, LocalOp, ScalarOp
from .engine import execute
from .goal import GoalDescriptor
from .image import ImageBuffer, load_image, save_image
from .metrics import oracle_distance
from .parallel import pmap
from .seeding import derive_seed

DEFAULT_TAU = 2.0
PLAUSIBILITY_BOUND = 120.0
BIAS_PARAMS = ("exposure", "temperature")
DEFAULT_BIAS_TABLE = (("exposure", 0.4), ("temperature", 0.4)) + tuple(
    (k, 0.2 / 8) for k in dsl.SCALAR_RANGES if k not in BIAS_PARAMS
)
# single_param_bias values are drawn uniformly from this fraction of each parameter's range
BIAS_VALUE_FRACTION = 0.5


class PerturbError(ValueError):
    pass


class PairRejected(Exception):
    """No perturbation within ``max_tries`` produced a detectably weaker edit."""


@dataclass(frozen=True)
class PerturbStrategy:
    kind: str  # omit | misadjust | single_param_bias
    omit_count: int = 1
    sigma: float = 0.35
    bias_table: tuple = DEFAULT_BIAS_TABLE
    # forces which canonical op indices `omit` drops (tests and reproductions)
    omit_indices: tuple | None = None

    def __post_init__(self):
        if self.kind not in ("omit", "misadjust", "single_param_bias"):
            raise ValueError(f"unknown perturbation kind {self.kind!r}")
        if self.omit_count < 1:
            raise ValueError("omit count must be >= 1")
        if self.sigma < 0:
            raise ValueError("sigma must be non-negative")
        probs = np.array([p for _, p in self.bias_table], dtype=float)
        if np.any(probs < 0) or abs(probs.sum() - 1.0) > 1e-9:
            raise ValueError("bias table probabilities must be non-negative and sum to 1")
        for name, _ in self.bias_table:
            if name not in dsl.SCALAR_RANGES:
                raise ValueError(f"bias table names unknown parameter {name!r}")

    @classmethod
    def named(cls, name: str) -> "PerturbStrategy":
        return cls(kind=name)


def _half_range(bounds: tuple[float, float]) -> float:
    return (bounds[1] - bounds[0]) / 2.0


def _jitter(value: float, bounds, sigma: float, rng: np.random.Generator) -> float:
    offset = rng.normal(0.0, 1.0) * sigma * _half_range(bounds)
    return float(np.clip(value + offset, *bounds))


def perturb(p: EditProgram, strategy: PerturbStrategy, seed: int) -> EditProgram:
    """Derive a (usually weaker) program from ``p``; deterministic in (p, strategy, seed)."""
    rng = np.random.default_rng(seed)
    ops = p.canonical().ops

    if strategy.kind == "omit":
        if not ops:
            raise PerturbError("cannot omit ops from an empty program")
        if strategy.omit_indices is not None:
            drop = set(strategy.omit_indices)
        else:
            count = min(strategy.omit_count, len(ops))
            drop = set(rng.choice(len(ops), size=count, replace=False).tolist())
        return EditProgram(tuple(op for i, op in enumerate(ops) if i not in drop))

    if strategy.kind == "misadjust":
        if strategy.sigma == 0.0:
            return EditProgram(ops)
        out = []
        for op in ops:
            if isinstance(op, ScalarOp):
                op = ScalarOp(op.key, _jitter(op.value, dsl.SCALAR_RANGES[op.key], strategy.sigma, rng))
            elif isinstance(op, HslOp):
                op = HslOp(op.band, op.field, _jitter(op.value, dsl.HSL_RANGE, strategy.sigma, rng))
            elif isinstance(op, LocalOp):
                adj = {
                    k: _jitter(v, dsl.SCALAR_RANGES[k], strategy.sigma, rng) for k, v in op.adjustments().items()
                }
                op = replace(op, **adj)
            out.append(op)
        return EditProgram(tuple(out))

    names = [name for name, _ in strategy.bias_table]
    probs = np.array([prob for _, prob in strategy.bias_table], dtype=float)
    name = names[rng.choice(len(names), p=probs / probs.sum())]
    lim = BIAS_VALUE_FRACTION * _half_range(dsl.SCALAR_RANGES[name])
    value = float(rng.uniform(-lim, lim))
    return EditProgram((ScalarOp(name, value),))


@dataclass(frozen=True, eq=False)
class PairSample:
    """(before, strong, weak, goal) training unit; invariants are checked on construction."""

    before: ImageBuffer
    strong_program: EditProgram
    weak_program: EditProgram
    strong_img: ImageBuffer
    weak_img: ImageBuffer
    goal: GoalDescriptor
    provenance: str = "perturbed"
    tau: float = DEFAULT_TAU
    image_id: str = ""
    distance: float = field(default=float("nan"))

    def __post_init__(self):
        if self.provenance not in ("perturbed", "policy"):
            raise ValueError(f"unknown provenance {self.provenance!r}")
        for name in ("strong_program", "weak_program"):
            report = dsl.validate_program(getattr(self, name))
            if not report.ok:
                raise dsl.InvalidProgramError(report)
        dist = oracle_distance(self.weak_img, self.strong_img)
        if dist < self.tau:
            raise ValueError(f"weak edit within {dist:.3f} < tau={self.tau} of the strong edit")
        object.__setattr__(self, "distance", dist)


def _attempt_seed(seed: int, attempt: int) -> int:
    return derive_seed(seed, "attempt", attempt)


def build_pair(
    before: ImageBuffer,
    strong: EditProgram,
    goal: GoalDescriptor,
    strategy: PerturbStrategy,
    seed: int,
    tau: float = DEFAULT_TAU,
    max_tries: int = 8,
    *,
    plausibility: float = PLAUSIBILITY_BOUND,
    strong_img: ImageBuffer | None = None,
    image_id: str = "",
) -> PairSample:
    """Perturb ``strong`` until the weak result is at least ``tau`` away from it.

    Raises :class:`PairRejected` after ``max_tries`` failed attempts, and
    immediately for an empty strong program.
    """
    if tau < 0:
        raise ValueError("tau must be non-negative")
    if not strong.ops:
        raise PairRejected("empty strong program cannot be weakened")
    if strong_img is None:
        strong_img = execute(before, strong)
    for attempt in range(max_tries):
        try:
            weak = perturb(strong, strategy, _attempt_seed(seed, attempt))
        except PerturbError as exc:
            raise PairRejected(str(exc)) from None
        weak_img = execute(before, weak)
        if oracle_distance(weak_img, strong_img) < tau:
            continue
        if oracle_distance(weak_img, before) > plausibility:
            continue
        return PairSample(
            before, strong, weak, strong_img, weak_img, goal, "perturbed", tau=tau, image_id=image_id
        )
    raise PairRejected(f"no perturbation reached tau={tau} within {max_tries} tries")


@dataclass(frozen=True)
class StrategyMix:
    """Weighted choice of perturbation strategy per pair."""

    weights: tuple = (("single_param_bias", 1.0),)

    def choose(self, seed: int) -> PerturbStrategy:
        names = [n for n, _ in self.weights]
        w = np.array([x for _, x in self.weights], dtype=float)
        rng = np.random.default_rng(derive_seed(seed, "strategy"))
        return PerturbStrategy(kind=names[rng.choice(len(names), p=w / w.sum())])

    @classmethod
    def parse(cls, spec) -> "StrategyMix":
        """Accepts a strategy name, a ``{name: weight}`` mapping, or ``"a:0.5,b:0.5"``."""
        if isinstance(spec, StrategyMix):
            return spec
        if isinstance(spec, dict):
            return cls(tuple((k, float(v)) for k, v in spec.items()))
        parts = []
        for chunk in str(spec).split(","):
            name, _, weight = chunk.partition(":")
            parts.append((name.strip(), float(weight) if weight else 1.0))
        mix = cls(tuple(parts))
        for name, _ in mix.weights:
            PerturbStrategy(kind=name)
        return mix


def build_pairs(
    items,
    mix: StrategyMix,
    seed: int,
    *,
    tau: float = DEFAULT_TAU,
    pairs_per_item: int = 1,
    max_tries: int = 8,
    threads: int | None = None,
) -> tuple[list[PairSample], int]:
    """Build pairs for ``items`` (objects with image_id/before/program/goal).

    Returns the accepted pairs in input order and the number of rejections.
    """
    jobs = [(item, k) for item in items for k in range(pairs_per_item)]

    def one(job):
        item, k = job
        s = derive_seed(seed, item.image_id, k)
        try:
            return build_pair(
                item.before,
                item.program,
                item.goal,
                mix.choose(s),
                s,
                tau,
                max_tries,
                strong_img=item.strong_img,
                image_id=item.image_id,
            )
        except PairRejected:
            return None

    results = pmap(one, jobs, threads)
    accepted = [r for r in results if r is not None]
    return accepted, len(results) - len(accepted)


# --- pair directories ----------------------------------------------------------------

PAIR_MANIFEST = "manifest.jsonl"


def save_pairs(pairs: Sequence[PairSample], directory) -> None:
    """Write each pair's three images as PPM plus one JSON manifest record per pair."""
    root = Path(directory)
    (root / "images").mkdir(parents=True, exist_ok=True)
    lines = []
    for i, p in enumerate(pairs):
        stem = f"images/{i:05d}"
        files = {}
        for role, img in (("before", p.before), ("strong", p.strong_img), ("weak", p.weak_img)):
            files[role] = f"{stem}_{role}.ppm"
            save_image(img, root / files[role], "ppm")
        record = {
            "id": p.image_id,
            **files,
            "strong_program": dsl.serialize_program(p.strong_program),
            "weak_program": dsl.serialize_program(p.weak_program),
            "goal": p.goal.to_dict(),
            "provenance": p.provenance,
            "tau": p.tau,
        }
        lines.append(json.dumps(record, sort_keys=True))
    (root / PAIR_MANIFEST).write_text("".join(line + "\n" for line in lines))


def load_pairs(directory) -> list[PairSample]:
    root = Path(directory)
    manifest = root / PAIR_MANIFEST
    if not manifest.is_file():
        raise FileNotFoundError(f"no {PAIR_MANIFEST} in {root}")
    pairs = []
    for line in manifest.read_text().splitlines():
        if not line.strip():
            continue
        rec = json.loads(line)
        pairs.append(
            PairSample(
                load_image(root / rec["before"]),
                dsl.parse_program(rec["strong_program"]),
                dsl.parse_program(rec["weak_program"]),
                load_image(root / rec["strong"]),
                load_image(root / rec["weak"]),
                GoalDescriptor.from_dict(rec["goal"]),
                rec.get("provenance", "perturbed"),
                tau=float(rec.get("tau", DEFAULT_TAU)),
                image_id=rec.get("id", ""),
            )
        )
    return pairs
