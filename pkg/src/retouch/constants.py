"""Numeric constants of the edit pipeline.

The same table ships as ``pipeline_constants.json``; ``constants_hash`` is
printed by ``retouch --version`` so golden files can be tied to a table.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass
from importlib import resources


@dataclass(frozen=True)
class PipelineConstants:
    highlight_shadow_strength: float = 0.5
    whites_gain: float = 0.25
    blacks_offset: float = 0.15
    temperature_half_stops: float = 0.5
    tint_half_stops: float = 0.5
    hue_band_half_width: float = 45.0
    max_hue_shift: float = 30.0
    hsl_lum_gain: float = 0.25

    def __post_init__(self):
        for name, value in asdict(self).items():
            if not value > 0:
                raise ValueError(f"pipeline constant {name} must be positive")

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, indent=2) + "\n"


CONSTANTS = PipelineConstants()

# hue centres (degrees) of the eight HSL bands
BAND_CENTERS = {
    "red": 0.0,
    "orange": 30.0,
    "yellow": 60.0,
    "green": 120.0,
    "aqua": 180.0,
    "blue": 240.0,
    "purple": 270.0,
    "magenta": 300.0,
}


def shipped_table() -> dict:
    text = resources.files("retouch").joinpath("pipeline_constants.json").read_text()
    return json.loads(text)


def constants_hash(constants: PipelineConstants = CONSTANTS) -> str:
    return hashlib.sha256(constants.to_json().encode()).hexdigest()[:16]
