"""The intervention-command language: grammar, parser, validator, serializer.

Line-oriented keyword grammar (documented in docs/grammar.md):

    plan   := [format] header {line}
    format := "FORMAT" "1"
    header := "PLAN" label
    label  := "normal" | "congestion" | "ghost_jam" | "deadlock" | "accident"
    line   := action | fault
    action := "ACTION" vid verb {arg}
    verb   := "move_forward" | "move_backward" | "change_lane_left"
            | "change_lane_right" | "stop" | "relocate"
    arg    := "distance_m=" number | "speed=" ("increase"|"maintain"|"decrease")
    fault  := "FAULT" vid ("primary" | "secondary" | "none")
    vid    := "v-" digits

Keywords are case-insensitive and tokens are separated by arbitrary
whitespace.  ``parse`` never raises anything but :class:`PlanParseError` on
arbitrary input; semantic checks against a scene live in :func:`validate`.
"""

from __future__ import annotations

import enum
import re
from dataclasses import dataclass


class AnomalyLabel(enum.Enum):
    NORMAL = "normal"
    CONGESTION = "congestion"
    GHOST_JAM = "ghost_jam"
    DEADLOCK = "deadlock"
    ACCIDENT = "accident"


class Verb(enum.Enum):
    MOVE_FORWARD = "move_forward"
    MOVE_BACKWARD = "move_backward"
    CHANGE_LANE_LEFT = "change_lane_left"
    CHANGE_LANE_RIGHT = "change_lane_right"
    STOP = "stop"
    RELOCATE = "relocate"


class SpeedChange(enum.Enum):
    INCREASE = "increase"
    MAINTAIN = "maintain"
    DECREASE = "decrease"


class FaultDegree(enum.Enum):
    PRIMARY = "primary"
    SECONDARY = "secondary"
    NONE = "none"


# Argument admissibility per verb.
_DISTANCE_VERBS = {Verb.MOVE_BACKWARD, Verb.RELOCATE}
_SPEED_VERBS = {Verb.MOVE_FORWARD, Verb.MOVE_BACKWARD}

DISTANCE_MAX_M = 20.0


@dataclass(frozen=True)
class InterventionCommand:
    vehicle: str
    verb: Verb
    distance_m: float | None = None
    speed: SpeedChange | None = None


@dataclass(frozen=True)
class FaultAssignment:
    vehicle: str
    degree: FaultDegree


@dataclass(frozen=True)
class ResolutionPlan:
    label: AnomalyLabel
    commands: tuple[InterventionCommand, ...] = ()
    faults: tuple[FaultAssignment, ...] = ()


@dataclass(frozen=True)
class ValidatedPlan:
    plan: ResolutionPlan
    tick: int
    obs_digest: str


class PlanParseError(Exception):
    def __init__(self, message: str, *, line: int, column: int, expected: str, found: str):
        self.line = line
        self.column = column
        self.expected = expected
        self.found = found
        super().__init__(f"line {line}, column {column}: {message} (expected {expected}, found {found!r})")


class ValidationKind(enum.Enum):
    UNKNOWN_VEHICLE = "UnknownVehicle"
    OUT_OF_RANGE = "OutOfRange"
    ILLEGAL_VERB_FOR_STATE = "IllegalVerbForState"
    DUPLICATE_TARGET = "DuplicateTarget"


class PlanValidationError(Exception):
    def __init__(self, kind: ValidationKind, message: str):
        self.kind = kind
        super().__init__(f"{kind.value}: {message}")


_VID_RE = re.compile(r"^v-\d+$")
_NUM_RE = re.compile(r"^\d+(\.\d+)?$")


def _tokenize(line: str) -> list[tuple[str, int]]:
    """(token, 1-based column) pairs; any whitespace separates tokens."""
    out = []
    col = 0
    i = 0
    while i < len(line):
        if line[i].isspace():
            i += 1
            continue
        start = i
        while i < len(line) and not line[i].isspace():
            i += 1
        out.append((line[start:i], start + 1))
    return out


def parse(text: str | bytes) -> ResolutionPlan:
    """Parse plan text.  Raises :class:`PlanParseError` on any malformed input."""
    if isinstance(text, bytes):
        text = text.decode("latin-1")
    lines = text.splitlines()
    rows: list[tuple[int, list[tuple[str, int]]]] = []
    for n, raw in enumerate(lines, start=1):
        toks = _tokenize(raw)
        if toks:
            rows.append((n, toks))
    if not rows:
        raise PlanParseError("empty plan", line=1, column=1, expected="PLAN", found="")

    idx = 0
    lineno, toks = rows[idx]
    if toks[0][0].upper() == "FORMAT":
        if len(toks) != 2 or toks[1][0] != "1":
            found = toks[1][0] if len(toks) > 1 else ""
            col = toks[1][1] if len(toks) > 1 else toks[0][1]
            raise PlanParseError("unsupported format version", line=lineno, column=col, expected="1", found=found)
        idx += 1
        if idx >= len(rows):
            raise PlanParseError("missing plan header", line=lineno, column=1, expected="PLAN", found="")
        lineno, toks = rows[idx]

    if toks[0][0].upper() != "PLAN":
        raise PlanParseError("expected plan header", line=lineno, column=toks[0][1], expected="PLAN", found=toks[0][0])
    if len(toks) < 2:
        raise PlanParseError("missing label", line=lineno, column=toks[0][1] + len(toks[0][0]), expected="label", found="")
    label_tok, label_col = toks[1]
    try:
        label = AnomalyLabel(label_tok.lower())
    except ValueError:
        raise PlanParseError("unknown label", line=lineno, column=label_col, expected="label", found=label_tok) from None
    if len(toks) > 2:
        raise PlanParseError("trailing tokens after header", line=lineno, column=toks[2][1], expected="end of line", found=toks[2][0])

    commands: list[InterventionCommand] = []
    faults: list[FaultAssignment] = []
    for lineno, toks in rows[idx + 1 :]:
        head, head_col = toks[0]
        kind = head.upper()
        if kind == "ACTION":
            commands.append(_parse_action(toks, lineno))
        elif kind == "FAULT":
            if label is not AnomalyLabel.ACCIDENT:
                raise PlanParseError(
                    "fault assignment outside an accident plan",
                    line=lineno, column=head_col, expected="ACTION", found=head,
                )
            faults.append(_parse_fault(toks, lineno, faults))
        else:
            raise PlanParseError("unknown line keyword", line=lineno, column=head_col, expected="ACTION or FAULT", found=head)

    if label is AnomalyLabel.ACCIDENT and not faults:
        raise PlanParseError(
            "accident plan requires at least one fault assignment",
            line=rows[-1][0], column=1, expected="FAULT", found="",
        )
    return ResolutionPlan(label=label, commands=tuple(commands), faults=tuple(faults))


def _parse_vid(tok: str, lineno: int, col: int) -> str:
    if not _VID_RE.match(tok.lower()):
        raise PlanParseError("bad vehicle id", line=lineno, column=col, expected="v-<digits>", found=tok)
    return tok.lower()


def _parse_action(toks: list[tuple[str, int]], lineno: int) -> InterventionCommand:
    if len(toks) < 2:
        raise PlanParseError("missing vehicle id", line=lineno, column=toks[0][1] + len(toks[0][0]), expected="v-<digits>", found="")
    vid = _parse_vid(toks[1][0], lineno, toks[1][1])
    if len(toks) < 3:
        raise PlanParseError("missing verb", line=lineno, column=toks[1][1] + len(toks[1][0]), expected="verb", found="")
    verb_tok, verb_col = toks[2]
    try:
        verb = Verb(verb_tok.lower())
    except ValueError:
        raise PlanParseError("unknown verb", line=lineno, column=verb_col, expected="verb", found=verb_tok) from None

    distance = None
    speed = None
    for tok, col in toks[3:]:
        key, eq, value = tok.partition("=")
        key = key.lower()
        if not eq:
            raise PlanParseError("expected key=value argument", line=lineno, column=col, expected="distance_m= or speed=", found=tok)
        if key == "distance_m":
            if verb not in _DISTANCE_VERBS:
                raise PlanParseError(
                    f"distance_m not allowed with {verb.value}",
                    line=lineno, column=col, expected="speed=", found=tok,
                )
            if distance is not None:
                raise PlanParseError("duplicate distance_m", line=lineno, column=col, expected="end of line", found=tok)
            if not _NUM_RE.match(value):
                raise PlanParseError("bad number", line=lineno, column=col + len("distance_m="), expected="decimal number", found=value)
            distance = float(value)
        elif key == "speed":
            if verb not in _SPEED_VERBS:
                raise PlanParseError(
                    f"speed not allowed with {verb.value}",
                    line=lineno, column=col, expected="distance_m=", found=tok,
                )
            if speed is not None:
                raise PlanParseError("duplicate speed", line=lineno, column=col, expected="end of line", found=tok)
            try:
                speed = SpeedChange(value.lower())
            except ValueError:
                raise PlanParseError("bad speed value", line=lineno, column=col + len("speed="), expected="increase|maintain|decrease", found=value) from None
        else:
            raise PlanParseError("unknown argument", line=lineno, column=col, expected="distance_m= or speed=", found=tok)

    if verb in _DISTANCE_VERBS and distance is None:
        raise PlanParseError(
            f"{verb.value} requires distance_m",
            line=lineno, column=toks[2][1], expected="distance_m=", found=verb_tok,
        )
    return InterventionCommand(vehicle=vid, verb=verb, distance_m=distance, speed=speed)


def _parse_fault(toks: list[tuple[str, int]], lineno: int, seen: list[FaultAssignment]) -> FaultAssignment:
    if len(toks) < 2:
        raise PlanParseError("missing vehicle id", line=lineno, column=toks[0][1] + len(toks[0][0]), expected="v-<digits>", found="")
    vid = _parse_vid(toks[1][0], lineno, toks[1][1])
    if len(toks) < 3:
        raise PlanParseError("missing fault degree", line=lineno, column=toks[1][1] + len(toks[1][0]), expected="primary|secondary|none", found="")
    deg_tok, deg_col = toks[2]
    try:
        degree = FaultDegree(deg_tok.lower())
    except ValueError:
        raise PlanParseError("bad fault degree", line=lineno, column=deg_col, expected="primary|secondary|none", found=deg_tok) from None
    if len(toks) > 3:
        raise PlanParseError("trailing tokens", line=lineno, column=toks[3][1], expected="end of line", found=toks[3][0])
    if any(f.vehicle == vid for f in seen):
        raise PlanParseError("duplicate fault for vehicle", line=lineno, column=toks[1][1], expected="distinct vehicle", found=vid)
    if degree is FaultDegree.PRIMARY and any(f.degree is FaultDegree.PRIMARY for f in seen):
        raise PlanParseError("second primary fault", line=lineno, column=deg_col, expected="secondary|none", found=deg_tok)
    return FaultAssignment(vehicle=vid, degree=degree)


def _fmt_number(x: float) -> str:
    s = repr(float(x))
    if s.endswith(".0"):
        return s[:-2]
    if "e" in s or "E" in s:
        s = f"{x:.10f}".rstrip("0").rstrip(".")
    return s


def serialize(plan: ResolutionPlan) -> str:
    """Canonical form: marker keywords upper-case, values lower-case, one
    space between tokens, commands in given order."""
    lines = [f"PLAN {plan.label.value}"]
    for f in plan.faults:
        lines.append(f"FAULT {f.vehicle} {f.degree.value}")
    for c in plan.commands:
        parts = [f"ACTION {c.vehicle} {c.verb.value}"]
        if c.distance_m is not None:
            parts.append(f"distance_m={_fmt_number(c.distance_m)}")
        if c.speed is not None:
            parts.append(f"speed={c.speed.value}")
        lines.append(" ".join(parts))
    return "\n".join(lines)


def validate(plan: ResolutionPlan, obs) -> ValidatedPlan:
    """Check a parsed plan against a scene observation and stamp it.

    ``obs`` is a :class:`~anomaloop.observation.SceneObservation`.
    """
    known = {r.id: r for r in obs.rows}
    seen: set[str] = set()
    for cmd in plan.commands:
        row = known.get(cmd.vehicle)
        if row is None:
            raise PlanValidationError(ValidationKind.UNKNOWN_VEHICLE, f"{cmd.vehicle} not in scene")
        if cmd.vehicle in seen:
            raise PlanValidationError(ValidationKind.DUPLICATE_TARGET, f"{cmd.vehicle} commanded twice")
        seen.add(cmd.vehicle)
        if cmd.distance_m is not None and not (0.0 < cmd.distance_m <= DISTANCE_MAX_M):
            raise PlanValidationError(
                ValidationKind.OUT_OF_RANGE,
                f"distance_m={cmd.distance_m:g} outside (0, {DISTANCE_MAX_M:g}]",
            )
        if cmd.verb is Verb.RELOCATE and not row.wrecked:
            raise PlanValidationError(
                ValidationKind.ILLEGAL_VERB_FOR_STATE,
                f"relocate targets wrecked vehicles only, {cmd.vehicle} is not wrecked",
            )
        if cmd.verb is not Verb.RELOCATE and row.wrecked:
            raise PlanValidationError(
                ValidationKind.ILLEGAL_VERB_FOR_STATE,
                f"{cmd.vehicle} is wrecked and can only be relocated",
            )
    for f in plan.faults:
        if f.vehicle not in known:
            raise PlanValidationError(ValidationKind.UNKNOWN_VEHICLE, f"{f.vehicle} not in scene")
    return ValidatedPlan(plan=plan, tick=obs.tick, obs_digest=obs.digest())
