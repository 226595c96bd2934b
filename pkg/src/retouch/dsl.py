"""Edit programs: data model, parser, canonical serializer and validator.

Text form::

    {exposure=+0.9; contrast=-30; tone_curve=[(0.25,0.2),(0.75,0.8)];
     hsl.red.sat=-20; local1.mask.radial=(0.5,0.5,0.4,0.5); local1.exposure=+1}

Whitespace between tokens is ignored. Keys are dotted lowercase identifiers.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Iterable, Union

import numpy as np

SCALAR_RANGES = {
    "exposure": (-5.0, 5.0),
    "contrast": (-100.0, 100.0),
    "highlights": (-100.0, 100.0),
    "shadows": (-100.0, 100.0),
    "whites": (-100.0, 100.0),
    "blacks": (-100.0, 100.0),
    "vibrance": (-100.0, 100.0),
    "saturation": (-100.0, 100.0),
    "temperature": (-100.0, 100.0),
    "tint": (-100.0, 100.0),
}
# pipeline order; serialisation follows it
TONE_KEYS = ("temperature", "tint", "exposure", "contrast", "highlights", "shadows", "whites", "blacks")
COLOR_KEYS = ("vibrance", "saturation")
BANDS = ("red", "orange", "yellow", "green", "aqua", "blue", "purple", "magenta")
HSL_FIELDS = ("hue", "sat", "lum")
HSL_RANGE = (-100.0, 100.0)
LOCAL_KEYS = ("temperature", "exposure", "saturation")
MAX_LOCAL_OPS = 4
CURVE_POINTS = (2, 16)


# --- errors ------------------------------------------------------------------------


class DslError(ValueError):
    """Base class of every parse failure; ``position`` is a character offset."""

    def __init__(self, message: str, position: int | None = None):
        self.position = position
        where = f" at position {position}" if position is not None else ""
        super().__init__(f"{message}{where}")


class DslSyntaxError(DslError):
    pass


class UnknownKeyError(DslError):
    pass


class OutOfRangeError(DslError):
    pass


class DuplicateKeyError(DslError):
    pass


class MalformedCurveError(DslError):
    pass


class MalformedMaskError(DslError):
    pass


class LocalOpError(DslError):
    pass


class InvalidProgramError(ValueError):
    def __init__(self, report: "ValidationReport"):
        self.report = report
        super().__init__("invalid edit program: " + "; ".join(v.message for v in report.violations))


# --- data model --------------------------------------------------------------------


@dataclass(frozen=True)
class MaskSpec:
    """Radial mask (center, radius, feather) or linear gradient (start -> end).

    Coordinates are normalised to the image extent.
    """

    kind: str
    center: tuple[float, float] = (0.5, 0.5)
    radius: float = 0.5
    feather: float = 0.5
    start: tuple[float, float] = (0.0, 0.0)
    end: tuple[float, float] = (1.0, 0.0)

    @classmethod
    def radial(cls, cx: float, cy: float, radius: float, feather: float) -> "MaskSpec":
        return cls("radial", center=(float(cx), float(cy)), radius=float(radius), feather=float(feather))

    @classmethod
    def linear(cls, ax: float, ay: float, bx: float, by: float) -> "MaskSpec":
        return cls("linear", start=(float(ax), float(ay)), end=(float(bx), float(by)))

    def values(self) -> tuple[float, ...]:
        if self.kind == "radial":
            return (*self.center, self.radius, self.feather)
        return (*self.start, *self.end)

    def problems(self) -> list[str]:
        out = []
        if self.kind not in ("radial", "linear"):
            return [f"unknown mask kind {self.kind!r}"]
        if not all(np.isfinite(v) for v in self.values()):
            return ["mask values must be finite"]
        if self.kind == "radial":
            if not all(0.0 <= c <= 1.0 for c in self.center):
                out.append("radial center must lie in [0,1]^2")
            if not 0.0 < self.radius <= 1.0:
                out.append("radial radius must lie in (0,1]")
            if not 0.0 <= self.feather <= 1.0:
                out.append("radial feather must lie in [0,1]")
        else:
            if not all(0.0 <= c <= 1.0 for c in (*self.start, *self.end)):
                out.append("linear mask endpoints must lie in [0,1]^2")
            if self.start == self.end:
                out.append("linear mask start and end must differ")
        return out

    def to_dict(self) -> dict:
        if self.kind == "radial":
            return {"kind": "radial", "center": list(self.center), "radius": self.radius, "feather": self.feather}
        return {"kind": "linear", "start": list(self.start), "end": list(self.end)}

    @classmethod
    def from_dict(cls, d: dict) -> "MaskSpec":
        if d["kind"] == "radial":
            return cls.radial(*d["center"], d["radius"], d["feather"])
        if d["kind"] == "linear":
            return cls.linear(*d["start"], *d["end"])
        raise ValueError(f"unknown mask kind {d['kind']!r}")


@dataclass(frozen=True)
class ScalarOp:
    key: str
    value: float


@dataclass(frozen=True)
class ToneCurveOp:
    points: tuple[tuple[float, float], ...]

    key = "tone_curve"


@dataclass(frozen=True)
class HslOp:
    band: str
    field: str
    value: float

    @property
    def key(self) -> str:
        return f"hsl.{self.band}.{self.field}"


@dataclass(frozen=True)
class LocalOp:
    """A masked group of local adjustments; unset adjustments are ``None``."""

    index: int
    mask: MaskSpec
    temperature: float | None = None
    exposure: float | None = None
    saturation: float | None = None

    @property
    def key(self) -> str:
        return f"local{self.index}"

    def adjustments(self) -> dict[str, float]:
        return {k: getattr(self, k) for k in LOCAL_KEYS if getattr(self, k) is not None}


EditOp = Union[ScalarOp, ToneCurveOp, HslOp, LocalOp]


def _order_key(op: EditOp) -> tuple:
    if isinstance(op, ScalarOp):
        if op.key in TONE_KEYS:
            return (0, TONE_KEYS.index(op.key), 0)
        if op.key in COLOR_KEYS:
            return (3, COLOR_KEYS.index(op.key), 0)
        return (5, 0, op.key)
    if isinstance(op, ToneCurveOp):
        return (1, 0, 0)
    if isinstance(op, HslOp):
        band = BANDS.index(op.band) if op.band in BANDS else len(BANDS)
        fld = HSL_FIELDS.index(op.field) if op.field in HSL_FIELDS else len(HSL_FIELDS)
        return (2, band, fld)
    return (4, op.index, 0)


@dataclass(frozen=True, eq=False)
class EditProgram:
    """Sequence of edit ops.

    Execution order is fixed by the engine, so two programs compare equal when
    their canonical (pipeline-ordered) op sequences match.
    """

    ops: tuple = field(default_factory=tuple)

    def __post_init__(self):
        object.__setattr__(self, "ops", tuple(self.ops))

    def canonical(self) -> "EditProgram":
        return EditProgram(tuple(sorted(self.ops, key=_order_key)))

    def __eq__(self, other):
        if not isinstance(other, EditProgram):
            return NotImplemented
        return self.canonical().ops == other.canonical().ops

    def __hash__(self):
        return hash(self.canonical().ops)

    def __len__(self):
        return len(self.ops)

    def __iter__(self):
        return iter(self.ops)

    def __str__(self):
        return serialize_program(self)

    def scalar(self, key: str, default: float = 0.0) -> float:
        for op in self.ops:
            if isinstance(op, ScalarOp) and op.key == key:
                return op.value
        return default

    def tone_curve(self) -> ToneCurveOp | None:
        for op in self.ops:
            if isinstance(op, ToneCurveOp):
                return op
        return None

    def hsl_ops(self) -> list[HslOp]:
        return [op for op in self.ops if isinstance(op, HslOp)]

    def local_ops(self) -> list[LocalOp]:
        return sorted((op for op in self.ops if isinstance(op, LocalOp)), key=lambda op: op.index)

    def without(self, index: int) -> "EditProgram":
        return EditProgram(self.ops[:index] + self.ops[index + 1 :])

    @classmethod
    def of(cls, **scalars: float) -> "EditProgram":
        """Shorthand for a program of global scalar ops."""
        return cls(tuple(ScalarOp(k, float(v)) for k, v in scalars.items()))


# --- validation --------------------------------------------------------------------


@dataclass(frozen=True)
class Violation:
    kind: str  # range | duplicate | curve | mask | local | unknown
    key: str
    message: str


@dataclass(frozen=True)
class ValidationReport:
    violations: tuple[Violation, ...] = ()

    @property
    def ok(self) -> bool:
        return not self.violations

    def __bool__(self):
        return self.ok

    def kinds(self) -> set[str]:
        return {v.kind for v in self.violations}


def _in_range(value: float, bounds: tuple[float, float]) -> bool:
    return bool(np.isfinite(value)) and bounds[0] <= value <= bounds[1]


def _curve_problems(points) -> list[str]:
    pts = list(points)
    lo, hi = CURVE_POINTS
    if not lo <= len(pts) <= hi:
        return [f"tone curve needs {lo}-{hi} control points, got {len(pts)}"]
    out = []
    for x, y in pts:
        if not (_in_range(x, (0.0, 1.0)) and _in_range(y, (0.0, 1.0))):
            out.append(f"tone curve point ({x}, {y}) outside [0,1]^2")
            break
    xs = [p[0] for p in pts]
    if any(b <= a for a, b in zip(xs, xs[1:])):
        out.append("tone curve x coordinates must be strictly increasing")
    return out


def validate_program(p: EditProgram) -> ValidationReport:
    found: list[Violation] = []
    seen: set[str] = set()
    n_local = 0
    for op in p.ops:
        key = op.key
        if key in seen:
            found.append(Violation("duplicate", key, f"duplicate key {key}"))
        seen.add(key)
        if isinstance(op, ScalarOp):
            if op.key not in SCALAR_RANGES:
                found.append(Violation("unknown", key, f"unknown key {key}"))
            elif not _in_range(op.value, SCALAR_RANGES[op.key]):
                found.append(Violation("range", key, f"{key}={op.value} outside {SCALAR_RANGES[op.key]}"))
        elif isinstance(op, ToneCurveOp):
            for msg in _curve_problems(op.points):
                found.append(Violation("curve", key, msg))
        elif isinstance(op, HslOp):
            if op.band not in BANDS or op.field not in HSL_FIELDS:
                found.append(Violation("unknown", key, f"unknown key {key}"))
            elif not _in_range(op.value, HSL_RANGE):
                found.append(Violation("range", key, f"{key}={op.value} outside {HSL_RANGE}"))
        elif isinstance(op, LocalOp):
            n_local += 1
            if op.index < 1:
                found.append(Violation("local", key, "local op index must be >= 1"))
            for msg in op.mask.problems():
                found.append(Violation("mask", key, msg))
            for name, value in op.adjustments().items():
                if not _in_range(value, SCALAR_RANGES[name]):
                    found.append(Violation("range", f"{key}.{name}", f"{key}.{name}={value} outside range"))
        else:
            found.append(Violation("unknown", str(op), f"not an edit op: {op!r}"))
    if n_local > MAX_LOCAL_OPS:
        found.append(Violation("local", "local", f"at most {MAX_LOCAL_OPS} local ops allowed, got {n_local}"))
    return ValidationReport(tuple(found))


# --- serialisation -----------------------------------------------------------------


def format_number(value: float, signed: bool = True) -> str:
    """Shortest round-tripping positional decimal, '+' prefixed when positive."""
    value = float(value)
    if value == 0.0:
        return "0"
    text = np.format_float_positional(value, unique=True, trim="-")
    if signed and value > 0:
        text = "+" + text
    return text


def _fmt_tuple(values: Iterable[float]) -> str:
    return "(" + ",".join(format_number(v, signed=False) for v in values) + ")"


def _op_entries(op: EditOp) -> list[str]:
    if isinstance(op, ScalarOp):
        return [f"{op.key}={format_number(op.value)}"]
    if isinstance(op, ToneCurveOp):
        return ["tone_curve=[" + ",".join(_fmt_tuple(pt) for pt in op.points) + "]"]
    if isinstance(op, HslOp):
        return [f"{op.key}={format_number(op.value)}"]
    out = [f"local{op.index}.mask.{op.mask.kind}={_fmt_tuple(op.mask.values())}"]
    for name, value in op.adjustments().items():
        out.append(f"local{op.index}.{name}={format_number(value)}")
    return out


def serialize_program(p: EditProgram) -> str:
    entries = []
    for op in p.canonical().ops:
        entries.extend(_op_entries(op))
    return "{" + "; ".join(entries) + "}"


# --- parsing -----------------------------------------------------------------------

_TOKEN_RE = re.compile(
    r"""
    (?P<ws>\s+)
  | (?P<number>[+-]?(?:\d+\.?\d*|\.\d+))
  | (?P<key>[a-z][a-z0-9_]*(?:\.[a-z][a-z0-9_]*)*)
  | (?P<punct>[{}=;\[\](),])
    """,
    re.VERBOSE,
)
_LOCAL_RE = re.compile(r"local([1-9][0-9]*)\.(.+)")


@dataclass
class _Tok:
    kind: str
    text: str
    pos: int


def _tokenize(text: str) -> list[_Tok]:
    toks = []
    pos = 0
    while pos < len(text):
        m = _TOKEN_RE.match(text, pos)
        if m is None:
            raise DslSyntaxError(f"unexpected character {text[pos]!r}", pos)
        kind = m.lastgroup
        if kind != "ws":
            toks.append(_Tok(kind, m.group(), pos))
        pos = m.end()
    toks.append(_Tok("eof", "", len(text)))
    return toks


class _Parser:
    def __init__(self, text: str):
        self.toks = _tokenize(text)
        self.i = 0

    def peek(self) -> _Tok:
        return self.toks[self.i]

    def take(self, text: str | None = None, kind: str | None = None) -> _Tok:
        tok = self.peek()
        if (text is not None and tok.text != text) or (kind is not None and tok.kind != kind):
            want = repr(text) if text is not None else kind
            got = repr(tok.text) if tok.kind != "eof" else "end of input"
            raise DslSyntaxError(f"expected {want}, got {got}", tok.pos)
        self.i += 1
        return tok

    def number(self) -> float:
        return float(self.take(kind="number").text)

    def tuple_(self) -> tuple[float, ...]:
        self.take("(")
        vals = [self.number()]
        while self.peek().text == ",":
            self.take(",")
            vals.append(self.number())
        self.take(")")
        return tuple(vals)

    def value(self):
        tok = self.peek()
        if tok.text == "[":
            self.take("[")
            pts = [self.tuple_()]
            while self.peek().text == ",":
                self.take(",")
                pts.append(self.tuple_())
            self.take("]")
            return pts
        if tok.text == "(":
            return self.tuple_()
        return self.number()

    def program(self) -> list[tuple[str, object, int]]:
        self.take("{")
        entries = []
        if self.peek().text != "}":
            while True:
                key = self.take(kind="key")
                self.take("=")
                entries.append((key.text, self.value(), key.pos))
                if self.peek().text != ";":
                    break
                self.take(";")
        self.take("}")
        end = self.peek()
        if end.kind != "eof":
            raise DslSyntaxError(f"trailing input {end.text!r}", end.pos)
        return entries


def _expect_scalar(key: str, value, pos: int) -> float:
    if not isinstance(value, float):
        raise DslSyntaxError(f"{key} expects a number", pos)
    return value


def _check_range(key: str, value: float, bounds, pos: int) -> float:
    if not _in_range(value, bounds):
        raise OutOfRangeError(f"{key}={format_number(value)} outside [{bounds[0]:g}, {bounds[1]:g}]", pos)
    return value


def parse_program(text: str) -> EditProgram:
    """Parse DSL text; raises a :class:`DslError` subclass on any problem."""
    entries = _Parser(text).program()

    seen: dict[str, int] = {}
    for key, _, pos in entries:
        if key in seen:
            raise DuplicateKeyError(f"duplicate key {key}", pos)
        seen[key] = pos

    ops: list[EditOp] = []
    locals_: dict[int, dict] = {}
    for key, value, pos in entries:
        if key in SCALAR_RANGES:
            v = _expect_scalar(key, value, pos)
            ops.append(ScalarOp(key, _check_range(key, v, SCALAR_RANGES[key], pos)))
        elif key == "tone_curve":
            if not isinstance(value, list) or any(len(pt) != 2 for pt in value):
                raise MalformedCurveError("tone_curve expects [(x,y),...]", pos)
            pts = tuple((float(x), float(y)) for x, y in value)
            problems = _curve_problems(pts)
            if problems:
                raise MalformedCurveError(problems[0], pos)
            ops.append(ToneCurveOp(pts))
        elif key.startswith("hsl."):
            parts = key.split(".")
            if len(parts) != 3 or parts[1] not in BANDS or parts[2] not in HSL_FIELDS:
                raise UnknownKeyError(f"unknown key {key}", pos)
            v = _expect_scalar(key, value, pos)
            ops.append(HslOp(parts[1], parts[2], _check_range(key, v, HSL_RANGE, pos)))
        elif (m := _LOCAL_RE.fullmatch(key)) is not None:
            idx, rest = int(m.group(1)), m.group(2)
            group = locals_.setdefault(idx, {"pos": pos, "mask": None})
            if rest in ("mask.radial", "mask.linear"):
                kind = rest.split(".")[1]
                if not isinstance(value, tuple) or len(value) != 4:
                    raise MalformedMaskError(f"{key} expects a 4-tuple", pos)
                if group["mask"] is not None:
                    raise DuplicateKeyError(f"local{idx} has more than one mask", pos)
                mask = MaskSpec.radial(*value) if kind == "radial" else MaskSpec.linear(*value)
                problems = mask.problems()
                if problems:
                    raise MalformedMaskError(problems[0], pos)
                group["mask"] = mask
            elif rest in LOCAL_KEYS:
                v = _expect_scalar(key, value, pos)
                group[rest] = _check_range(key, v, SCALAR_RANGES[rest], pos)
            else:
                raise UnknownKeyError(f"unknown key {key}", pos)
        else:
            raise UnknownKeyError(f"unknown key {key}", pos)

    if len(locals_) > MAX_LOCAL_OPS:
        raise LocalOpError(f"at most {MAX_LOCAL_OPS} local ops allowed", None)
    for idx, group in locals_.items():
        if group["mask"] is None:
            raise LocalOpError(f"local{idx} has adjustments but no mask", group["pos"])
        ops.append(
            LocalOp(
                idx,
                group["mask"],
                temperature=group.get("temperature"),
                exposure=group.get("exposure"),
                saturation=group.get("saturation"),
            )
        )
    return EditProgram(tuple(ops))
