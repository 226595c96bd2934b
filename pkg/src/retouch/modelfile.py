"""Versioned flat text format for model parameters.

::

    retouch-grm 1
    [gate_map] 12 15
    <12 lines of 15 floats>
    [log_scales] 12
    <12 lines of 1 float>

Floats are written with ``repr`` so a save/load cycle is exact.
"""

from __future__ import annotations

import numpy as np


class ModelFileError(ValueError):
    pass


def write_blocks(header: str, blocks: dict[str, np.ndarray]) -> str:
    lines = [header]
    for name, arr in blocks.items():
        arr = np.atleast_1d(np.asarray(arr, dtype=float))
        lines.append(f"[{name}] " + " ".join(str(d) for d in arr.shape))
        for row in arr.reshape(arr.shape[0], -1):
            lines.append(" ".join(repr(float(v)) for v in row))
    return "\n".join(lines) + "\n"


def read_blocks(text: str, header: str) -> dict[str, np.ndarray]:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines or lines[0].strip() != header:
        raise ModelFileError(f"not a {header!r} file")
    blocks: dict[str, np.ndarray] = {}
    i = 1
    try:
        while i < len(lines):
            head = lines[i].split()
            if not (head[0].startswith("[") and head[0].endswith("]")):
                raise ModelFileError(f"expected a block header, got {lines[i]!r}")
            name = head[0][1:-1]
            shape = tuple(int(s) for s in head[1:])
            rows = [[float(v) for v in lines[i + 1 + r].split()] for r in range(shape[0])]
            blocks[name] = np.array(rows, dtype=float).reshape(shape)
            i += 1 + shape[0]
    except (IndexError, ValueError) as exc:
        if isinstance(exc, ModelFileError):
            raise
        raise ModelFileError(f"malformed model file: {exc}") from None
    return blocks
