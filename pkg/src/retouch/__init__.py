"""Parametric photo retouching with a goal-conditioned reward model and a trainable editing policy."""

__version__ = "0.1.0"

from .dsl import EditProgram, parse_program, serialize_program
from .engine import execute
from .goal import GoalDescriptor
from .image import ImageBuffer, load_image, save_image

__all__ = [
    "EditProgram",
    "GoalDescriptor",
    "ImageBuffer",
    "execute",
    "load_image",
    "parse_program",
    "save_image",
    "serialize_program",
]
