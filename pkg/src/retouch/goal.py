"""Structured editing goals (style tag + optional target statistic deltas)."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .dsl import MaskSpec

STYLE_TAGS = ("neutral", "warm", "cool", "bw", "vivid", "matte", "dramatic")
DELTA_KEYS = ("mean_luma", "std_luma", "mean_saturation", "warmth")
GOAL_DIM = len(STYLE_TAGS) + 2 * len(DELTA_KEYS)


@dataclass(frozen=True)
class GoalDescriptor:
    style_tag: str = "neutral"
    target_deltas: dict = field(default_factory=dict)
    region_hint: MaskSpec | None = None
    note: str = ""

    def __post_init__(self):
        if self.style_tag not in STYLE_TAGS:
            raise ValueError(f"unknown style tag {self.style_tag!r}")
        deltas = {}
        for key, value in dict(self.target_deltas).items():
            if key not in DELTA_KEYS:
                raise ValueError(f"unknown target delta {key!r}")
            value = float(value)
            if not -1.0 <= value <= 1.0:
                raise ValueError(f"target delta {key}={value} outside [-1, 1]")
            deltas[key] = value
        object.__setattr__(self, "target_deltas", {k: deltas[k] for k in DELTA_KEYS if k in deltas})
        if self.style_tag == "neutral" and not deltas:
            raise ValueError("a goal needs a non-neutral style tag or at least one target delta")
        if self.region_hint is not None and self.region_hint.problems():
            raise ValueError(f"invalid region hint: {self.region_hint.problems()[0]}")

    def encode(self) -> np.ndarray:
        """One-hot style tag, then the four target deltas, then their presence flags."""
        vec = np.zeros(GOAL_DIM)
        vec[STYLE_TAGS.index(self.style_tag)] = 1.0
        base = len(STYLE_TAGS)
        for i, key in enumerate(DELTA_KEYS):
            if key in self.target_deltas:
                vec[base + i] = self.target_deltas[key]
                vec[base + len(DELTA_KEYS) + i] = 1.0
        return vec

    def to_dict(self) -> dict:
        out = {"style_tag": self.style_tag, "target_deltas": dict(self.target_deltas)}
        if self.region_hint is not None:
            out["region_hint"] = self.region_hint.to_dict()
        if self.note:
            out["note"] = self.note
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "GoalDescriptor":
        hint = d.get("region_hint")
        return cls(
            style_tag=d.get("style_tag", "neutral"),
            target_deltas=d.get("target_deltas", {}),
            region_hint=MaskSpec.from_dict(hint) if hint else None,
            note=d.get("note", ""),
        )
