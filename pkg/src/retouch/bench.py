"""Synthetic retouching benchmark: procedural tasks, policy evaluation, CSV reports."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import dsl
from .dsl import EditProgram, LocalOp, MaskSpec, ScalarOp
from .engine import execute
from .goal import DELTA_KEYS, GoalDescriptor
from .image import ImageBuffer, image_stats, load_image, save_image
from .metrics import l1, l2, psnr, ssim
from .parallel import pmap
from .seeding import rng_for

SPLITS = ("quality", "style", "local")
DEFAULT_SIZE = 32
QUALITY_KEYS = tuple(dsl.SCALAR_RANGES)
QUALITY_MAX = 25.0
QUALITY_MAX_EV = 1.0
STYLE_MIN = 40.0
STYLE_TAG_OPS = {
    "warm": ("temperature", 1.0),
    "cool": ("temperature", -1.0),
    "bw": ("saturation", -1.0),
    "vivid": ("saturation", 1.0),
    "matte": ("contrast", -1.0),
    "dramatic": ("contrast", 1.0),
}
STYLE_EXTRA_KEYS = ("contrast", "highlights", "shadows", "whites", "blacks", "vibrance", "saturation", "temperature", "tint")
# extras that would fight the tag's look
STYLE_CONFLICTS = {
    "warm": ("temperature",),
    "cool": ("temperature",),
    "bw": ("saturation", "vibrance"),
    "vivid": ("saturation", "vibrance"),
    "matte": ("contrast",),
    "dramatic": ("contrast",),
}


# --- procedural images ---------------------------------------------------------------


def procedural_image(rng: np.random.Generator, size: int = DEFAULT_SIZE) -> ImageBuffer:
    """Smooth two-colour gradient, a few soft coloured blobs and mild noise, quantised to 8 bits."""
    h = w = size
    yy, xx = np.mgrid[0:h, 0:w] / max(size - 1, 1)
    angle = rng.uniform(0, 2 * np.pi)
    ramp = (np.cos(angle) * (xx - 0.5) + np.sin(angle) * (yy - 0.5)) + 0.5
    c0 = rng.uniform(0.05, 0.6, 3)
    c1 = rng.uniform(0.3, 0.95, 3)
    img = c0 + (c1 - c0) * np.clip(ramp, 0, 1)[..., None]
    for _ in range(rng.integers(2, 5)):
        cx, cy = rng.uniform(0, 1, 2)
        rad = rng.uniform(0.1, 0.35)
        colour = rng.uniform(0.0, 1.0, 3)
        alpha = rng.uniform(0.4, 0.9) * np.exp(-((xx - cx) ** 2 + (yy - cy) ** 2) / (2 * rad**2))
        img = img * (1 - alpha[..., None]) + colour * alpha[..., None]
    img = img + rng.normal(0.0, 0.02, img.shape)
    tone8 = np.floor(np.clip(img, 0, 1) * 255.0 + 0.5).astype(np.uint8)
    return ImageBuffer.from_srgb8(tone8)


# --- tasks -----------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class BenchTask:
    image_id: str
    split: str
    before: ImageBuffer
    gt_program: EditProgram
    goal: GoalDescriptor

    @property
    def program(self) -> EditProgram:
        return self.gt_program

    @cached_property
    def strong_img(self) -> ImageBuffer:
        return execute(self.before, self.gt_program)

    def same_as(self, other: "BenchTask") -> bool:
        return (
            self.image_id == other.image_id
            and self.split == other.split
            and self.before == other.before
            and self.gt_program == other.gt_program
            and self.goal == other.goal
        )


def measured_deltas(before: ImageBuffer, after: ImageBuffer) -> dict[str, float]:
    sb, sa = image_stats(before), image_stats(after)
    return {k: getattr(sa, k) - getattr(sb, k) for k in DELTA_KEYS}


# a style tag stands in for the numeric target of the feature it names: the goal says
# "make it vivid", not by how much, so several strengths are acceptable
TAG_REPLACES = {
    "warm": "warmth",
    "cool": "warmth",
    "bw": "mean_saturation",
    "vivid": "mean_saturation",
    "matte": "std_luma",
    "dramatic": "std_luma",
}


def goal_deltas(measured: dict[str, float], style_tag: str) -> dict[str, float]:
    """Target deltas a goal carries: every measured delta except the one its tag names."""
    drop = TAG_REPLACES.get(style_tag)
    return {k: v for k, v in measured.items() if k != drop}


def _signed(rng, lo, hi) -> float:
    return float(rng.uniform(lo, hi) * rng.choice([-1.0, 1.0]))


def _quality_program(rng) -> EditProgram:
    keys = rng.choice(len(QUALITY_KEYS), size=rng.integers(2, 5), replace=False)
    ops = []
    for i in sorted(keys):
        key = QUALITY_KEYS[i]
        if key == "exposure":
            ops.append(ScalarOp(key, _signed(rng, 0.2, QUALITY_MAX_EV)))
        else:
            ops.append(ScalarOp(key, _signed(rng, 5.0, QUALITY_MAX)))
    return EditProgram(tuple(ops))


def _style_program(rng) -> tuple[EditProgram, str]:
    tag = list(STYLE_TAG_OPS)[rng.integers(len(STYLE_TAG_OPS))]
    key, sign = STYLE_TAG_OPS[tag]
    if tag == "bw":
        ops = [ScalarOp(key, -float(rng.uniform(80, 100)))]
    else:
        ops = [ScalarOp(key, sign * float(rng.uniform(STYLE_MIN, 80)))]
    pool = [k for k in STYLE_EXTRA_KEYS if k != key and k not in STYLE_CONFLICTS[tag]]
    extra = rng.choice(len(pool), size=rng.integers(2, 6), replace=False)
    for i in sorted(extra):
        ops.append(ScalarOp(pool[i], _signed(rng, STYLE_MIN, 70.0)))
    return EditProgram(tuple(ops)), tag


def _local_program(rng) -> tuple[EditProgram, MaskSpec]:
    mask = MaskSpec.radial(
        round(float(rng.uniform(0.25, 0.75)), 3),
        round(float(rng.uniform(0.25, 0.75)), 3),
        round(float(rng.uniform(0.25, 0.5)), 3),
        round(float(rng.uniform(0.3, 0.7)), 3),
    )
    names = ("temperature", "exposure", "saturation")
    chosen = rng.choice(3, size=rng.integers(1, 4), replace=False)
    adj = {}
    for i in sorted(chosen):
        name = names[i]
        adj[name] = _signed(rng, 0.5, 1.5) if name == "exposure" else _signed(rng, 20.0, 60.0)
    return EditProgram((LocalOp(1, mask, **adj),)), mask


def make_task(split: str, index: int, seed: int, size: int = DEFAULT_SIZE, before: ImageBuffer | None = None) -> BenchTask:
    rng = rng_for(seed, "task", split, index)
    img = procedural_image(rng, size) if before is None else before
    tag, hint = "neutral", None
    if split == "quality":
        program = _quality_program(rng)
    elif split == "style":
        program, tag = _style_program(rng)
    elif split == "local":
        program, hint = _local_program(rng)
    else:
        raise ValueError(f"unknown split {split!r}")
    deltas = goal_deltas(measured_deltas(img, execute(img, program)), tag)
    goal = GoalDescriptor(style_tag=tag, target_deltas=deltas, region_hint=hint)
    return BenchTask(f"{split}-{seed}-{index}", split, img, program, goal)


def generate_tasks(
    split: str, n: int, seed: int, size: int = DEFAULT_SIZE, images: Sequence[ImageBuffer] | None = None
) -> list[BenchTask]:
    """``n`` seeded tasks of one split (or ``"all"``: ``n`` of each).

    ``images`` replaces the procedural before-images (cycled).
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if split == "all":
        return [t for s in SPLITS for t in generate_tasks(s, n, seed, size, images)]
    out = []
    for i in range(n):
        before = images[i % len(images)] if images else None
        out.append(make_task(split, i, seed, size, before))
    return out


# --- evaluation ------------------------------------------------------------------------

METRIC_NAMES = ("l1", "l2", "psnr", "ssim")


@dataclass(frozen=True)
class SplitScores:
    n: int
    l1: float
    l2: float
    psnr: float
    ssim: float

    def as_row(self, split: str) -> list[str]:
        return [split, str(self.n)] + [f"{getattr(self, m):.6f}" for m in METRIC_NAMES]


@dataclass
class BenchReport:
    splits: dict = field(default_factory=dict)  # split -> SplitScores (non-empty splits only)
    overall: SplitScores | None = None
    per_task: list = field(default_factory=list)  # (image_id, split, {metric: value})
    config: dict = field(default_factory=dict)

    @property
    def task_count(self) -> int:
        return len(self.per_task)


def _aggregate(rows: list[dict]) -> SplitScores:
    n = len(rows)
    means = {m: math.fsum(r[m] for r in rows) / n for m in METRIC_NAMES}
    return SplitScores(n, **means)


def policy_program(policy, task: BenchTask) -> EditProgram:
    """Deterministic program of ``policy`` for ``task``: a PolicyModel's mean action, or a callable."""
    from .policy import PolicyModel, mean_program

    if isinstance(policy, PolicyModel):
        return mean_program(policy, task.before, task.goal)
    return policy(task)


def evaluate(policy, tasks: Sequence[BenchTask], seed: int = 0, threads: int | None = None) -> BenchReport:
    """Score ``policy`` against each task's ground-truth result.

    ``policy`` is a PolicyModel (evaluated at its mean action, so ``seed`` has
    no effect) or a callable ``task -> EditProgram``.
    """
    if not tasks:
        raise ValueError("no tasks to evaluate")

    def one(task):
        out = execute(task.before, policy_program(policy, task))
        gt = task.strong_img
        return {"l1": l1(out, gt), "l2": l2(out, gt), "psnr": psnr(out, gt), "ssim": ssim(out, gt)}

    rows = pmap(one, tasks, threads)
    report = BenchReport(config={"seed": seed, "tasks": len(tasks)})
    for task, row in zip(tasks, rows):
        report.per_task.append((task.image_id, task.split, row))
    for split in SPLITS:
        sel = [r for t, r in zip(tasks, rows) if t.split == split]
        if sel:
            report.splits[split] = _aggregate(sel)
    report.overall = _aggregate(rows)
    return report


def report_csv(report: BenchReport) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["split", "n", *METRIC_NAMES])
    for split in SPLITS:
        if split in report.splits:
            writer.writerow(report.splits[split].as_row(split))
    writer.writerow(report.overall.as_row("overall"))
    return buf.getvalue()


def emit_report(report: BenchReport, path) -> None:
    try:
        Path(path).write_text(report_csv(report))
    except OSError as exc:
        raise OSError(f"cannot write report to {path}: {exc}") from None


# --- task directories ------------------------------------------------------------------

MANIFEST = "manifest.jsonl"


def export_tasks(tasks: Sequence[BenchTask], directory) -> None:
    """Write ``images/<id>.ppm`` plus a JSON-lines manifest."""
    root = Path(directory)
    (root / "images").mkdir(parents=True, exist_ok=True)
    lines = []
    for t in tasks:
        rel = f"images/{t.image_id}.ppm"
        save_image(t.before, root / rel, "ppm")
        record = {
            "id": t.image_id,
            "split": t.split,
            "image": rel,
            "program": dsl.serialize_program(t.gt_program),
            "goal": t.goal.to_dict(),
        }
        lines.append(json.dumps(record, sort_keys=True))
    (root / MANIFEST).write_text("\n".join(lines) + "\n")


def load_tasks(directory) -> list[BenchTask]:
    root = Path(directory)
    manifest = root / MANIFEST
    if not manifest.is_file():
        raise FileNotFoundError(f"no {MANIFEST} in {root}")
    tasks = []
    for line in manifest.read_text().splitlines():
        if not line.strip():
            continue
        rec = json.loads(line)
        tasks.append(
            BenchTask(
                rec["id"],
                rec.get("split", "quality"),
                load_image(root / rec["image"]),
                dsl.parse_program(rec["program"]),
                GoalDescriptor.from_dict(rec["goal"]),
            )
        )
    return tasks


def load_image_dir(directory) -> list[ImageBuffer]:
    paths = sorted(p for p in Path(directory).iterdir() if p.suffix.lower() in (".png", ".ppm"))
    if not paths:
        raise FileNotFoundError(f"no PNG/PPM images in {directory}")
    return [load_image(p) for p in paths]


def identity_policy(task: BenchTask) -> EditProgram:
    return EditProgram()


def oracle_policy(task: BenchTask) -> EditProgram:
    return task.gt_program


PolicyFn = Callable[[BenchTask], EditProgram]
