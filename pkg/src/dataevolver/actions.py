"""Parser, canonical printer, validator, and state sampler for action programs.

An action program is a call expression over five primitives::

    rotate(object, yaw=90)
    translate(object, dx=0.1, dy=0, dz=0)
    scale(object, factor=1.2)
    move_camera(path=orbit01)
    compose([rotate(object, yaw=90), translate(object, dx=0.1, dy=0, dz=0)])

Parsing is whitespace-insensitive, primitive names are case-insensitive,
keyword arguments may appear in any order, and bare primitive names inside
``compose`` take default arguments. ``print_program`` emits the unique
canonical form, so print/parse round-trips to a structurally equal program.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Union


class ActionSyntaxError(ValueError):
    """Parse failure with 1-based line/column position."""

    def __init__(self, message: str, line: int, column: int):
        super().__init__(f"{line}:{column}: {message}")
        self.line = line
        self.column = column


class ActionValidationError(ValueError):
    pass


MAX_COMPOSE_DEPTH = 4


# -- AST --------------------------------------------------------------------

@dataclass(frozen=True)
class Rotation:
    object: str = "object"
    yaw_deg: float = 90.0


@dataclass(frozen=True)
class Translation:
    object: str = "object"
    dx: float = 0.0
    dy: float = 0.0
    dz: float = 0.0


@dataclass(frozen=True)
class Scaling:
    object: str = "object"
    factor: float = 1.0

    def __post_init__(self):
        if self.factor <= 0:
            raise ActionValidationError("factor must be positive")


@dataclass(frozen=True)
class CameraMotion:
    # Either a named path identifier or a flat waypoint number list.
    path: Union[str, tuple[float, ...]] = "default"


@dataclass(frozen=True)
class Composition:
    children: tuple["ActionPrimitive", ...]

    def __post_init__(self):
        if not self.children:
            raise ActionValidationError("compose requires at least one child")
        if _compose_depth(self) > MAX_COMPOSE_DEPTH:
            raise ActionValidationError(
                f"compose nesting exceeds depth {MAX_COMPOSE_DEPTH}")


ActionPrimitive = Union[Rotation, Translation, Scaling, CameraMotion, Composition]


def _compose_depth(node: ActionPrimitive) -> int:
    if isinstance(node, Composition):
        return 1 + max(_compose_depth(c) for c in node.children)
    return 0


@dataclass(frozen=True)
class ActionProgram:
    root: ActionPrimitive
    source_text: str = ""
    version: str = "1"


@dataclass(frozen=True)
class ImageEndpoints:
    pass


@dataclass(frozen=True)
class VideoDense:
    step_deg: float

    def __post_init__(self):
        if self.step_deg <= 0:
            raise ActionValidationError("step must be positive")


SamplingMode = Union[ImageEndpoints, VideoDense]


@dataclass(frozen=True)
class StateDelta:
    """Parameter changes at one sampled point of the program sweep.

    ``changes`` maps (object_id, parameter) to the value at this point;
    yaw in absolute degrees swept so far, translations in meters, scale
    as a multiplicative factor.
    """

    index: int
    fraction: float
    changes: dict[tuple[str, str], float] = field(default_factory=dict, hash=False)
    clamped: bool = False

    def yaw_of(self, object_id: str) -> float:
        return self.changes.get((object_id, "yaw_deg"), 0.0)


# -- tokenizer ---------------------------------------------------------------

_PUNCT = "()[],="


@dataclass(frozen=True)
class _Token:
    type: str  # "name" | "number" | one of _PUNCT | "eof"
    value: object
    line: int
    column: int


def _tokenize(text: str) -> list[_Token]:
    tokens: list[_Token] = []
    line, col = 1, 1
    i, n = 0, len(text)
    while i < n:
        c = text[i]
        if c == "\n":
            line += 1
            col = 1
            i += 1
            continue
        if c in " \t\r":
            i += 1
            col += 1
            continue
        if c in _PUNCT:
            tokens.append(_Token(c, c, line, col))
            i += 1
            col += 1
            continue
        if c.isalpha() or c == "_":
            start = i
            start_col = col
            while i < n and (text[i].isalnum() or text[i] == "_"):
                i += 1
                col += 1
            tokens.append(_Token("name", text[start:i], line, start_col))
            continue
        if c.isdigit() or c == "." or (c in "+-" and i + 1 < n and (text[i + 1].isdigit() or text[i + 1] == ".")):
            start = i
            start_col = col
            if c in "+-":
                i += 1
                col += 1
            while i < n and (text[i].isdigit() or text[i] in ".eE" or
                             (text[i] in "+-" and text[i - 1] in "eE")):
                i += 1
                col += 1
            raw = text[start:i]
            try:
                value = float(raw)
            except ValueError:
                raise ActionSyntaxError(f"malformed number {raw!r}", line, start_col)
            tokens.append(_Token("number", value, line, start_col))
            continue
        raise ActionSyntaxError(f"unexpected character {c!r}", line, col)
    tokens.append(_Token("eof", None, line, col))
    return tokens


# -- parser ------------------------------------------------------------------

# name -> (ordered argument names, per-argument numeric flag)
_SIGNATURES = {
    "rotate": (("object", "yaw"), (False, True)),
    "translate": (("object", "dx", "dy", "dz"), (False, True, True, True)),
    "scale": (("object", "factor"), (False, True)),
    "move_camera": (("path",), (False,)),
    "compose": ((), ()),
}

_KWARG_ALIASES = {"yaw_deg": "yaw"}


class _Parser:
    def __init__(self, tokens: list[_Token]):
        self.tokens = tokens
        self.pos = 0

    def peek(self) -> _Token:
        return self.tokens[self.pos]

    def next(self) -> _Token:
        tok = self.tokens[self.pos]
        self.pos += 1
        return tok

    def expect(self, type_: str) -> _Token:
        tok = self.next()
        if tok.type != type_:
            raise ActionSyntaxError(
                f"expected {type_!r}, got {tok.value!r}", tok.line, tok.column)
        return tok

    def parse_program(self) -> ActionPrimitive:
        node = self.parse_primitive()
        tok = self.peek()
        if tok.type != "eof":
            raise ActionSyntaxError(
                f"unexpected trailing input {tok.value!r}", tok.line, tok.column)
        return node

    def parse_primitive(self) -> ActionPrimitive:
        tok = self.expect("name")
        name = str(tok.value).lower()
        if name not in _SIGNATURES:
            raise ActionSyntaxError(f"unknown primitive {tok.value!r}", tok.line, tok.column)
        if self.peek().type != "(":
            # bare name: all-defaults form, only meaningful inside compose
            return self._build(name, {}, tok)
        self.expect("(")
        if name == "compose":
            children = self._parse_compose_children()
            self.expect(")")
            try:
                return Composition(children=tuple(children))
            except ActionValidationError as exc:
                raise ActionSyntaxError(str(exc), tok.line, tok.column) from exc
        kwargs = self._parse_args(name)
        self.expect(")")
        return self._build(name, kwargs, tok)

    def _parse_compose_children(self) -> list[ActionPrimitive]:
        self.expect("[")
        children = [self.parse_primitive()]
        while self.peek().type == ",":
            self.next()
            children.append(self.parse_primitive())
        self.expect("]")
        return children

    def _parse_args(self, name: str) -> dict[str, object]:
        arg_names, _ = _SIGNATURES[name]
        kwargs: dict[str, object] = {}
        positional = 0
        seen_named = False
        if self.peek().type == ")":
            return kwargs
        while True:
            tok = self.peek()
            if tok.type == "name" and self.tokens[self.pos + 1].type == "=":
                key_tok = self.next()
                self.next()  # '='
                key = _KWARG_ALIASES.get(str(key_tok.value).lower(),
                                         str(key_tok.value).lower())
                if key not in arg_names:
                    raise ActionSyntaxError(
                        f"unknown argument {key_tok.value!r} for {name}",
                        key_tok.line, key_tok.column)
                if key in kwargs:
                    raise ActionSyntaxError(
                        f"duplicate argument {key!r}", key_tok.line, key_tok.column)
                kwargs[key] = self._parse_value()
                seen_named = True
            else:
                if seen_named:
                    raise ActionSyntaxError(
                        "positional argument after named argument",
                        tok.line, tok.column)
                if positional >= len(arg_names):
                    raise ActionSyntaxError(
                        f"too many arguments for {name}", tok.line, tok.column)
                key = arg_names[positional]
                if key in kwargs:
                    raise ActionSyntaxError(
                        f"duplicate argument {key!r}", tok.line, tok.column)
                kwargs[key] = self._parse_value()
                positional += 1
            if self.peek().type == ",":
                self.next()
                continue
            return kwargs

    def _parse_value(self) -> object:
        tok = self.peek()
        if tok.type == "number":
            return self.next().value
        if tok.type == "name":
            return str(self.next().value)
        if tok.type == "[":
            self.next()
            items: list[float] = []
            if self.peek().type != "]":
                while True:
                    item = self.next()
                    if item.type != "number":
                        raise ActionSyntaxError(
                            "waypoint lists may contain only numbers",
                            item.line, item.column)
                    items.append(float(item.value))
                    if self.peek().type == ",":
                        self.next()
                        continue
                    break
            self.expect("]")
            return tuple(items)
        raise ActionSyntaxError(f"expected a value, got {tok.value!r}",
                                tok.line, tok.column)

    def _build(self, name: str, kwargs: dict[str, object], tok: _Token) -> ActionPrimitive:
        arg_names, numeric = _SIGNATURES[name]
        for key, is_num in zip(arg_names, numeric):
            if key in kwargs and is_num and not isinstance(kwargs[key], float):
                raise ActionSyntaxError(
                    f"argument {key!r} of {name} must be numeric",
                    tok.line, tok.column)
        try:
            if name == "rotate":
                return Rotation(object=str(kwargs.get("object", "object")),
                                yaw_deg=float(kwargs.get("yaw", 90.0)))
            if name == "translate":
                return Translation(object=str(kwargs.get("object", "object")),
                                   dx=float(kwargs.get("dx", 0.0)),
                                   dy=float(kwargs.get("dy", 0.0)),
                                   dz=float(kwargs.get("dz", 0.0)))
            if name == "scale":
                return Scaling(object=str(kwargs.get("object", "object")),
                               factor=float(kwargs.get("factor", 1.0)))
            if name == "move_camera":
                path = kwargs.get("path", "default")
                if isinstance(path, float):
                    raise ActionSyntaxError(
                        "path must be an identifier or waypoint list",
                        tok.line, tok.column)
                return CameraMotion(path=path)  # type: ignore[arg-type]
            return Composition(children=())
        except ActionValidationError as exc:
            raise ActionSyntaxError(str(exc), tok.line, tok.column) from exc


def parse_program(text: str, version: str = "1") -> ActionProgram:
    """Parse program text; raises ActionSyntaxError with line/column on failure."""
    root = _Parser(_tokenize(text)).parse_program()
    return ActionProgram(root=root, source_text=text, version=version)


# -- canonical printer --------------------------------------------------------

def _fmt_number(value: float) -> str:
    if math.isfinite(value) and value == int(value):
        return str(int(value))
    return repr(value)


def _print_node(node: ActionPrimitive) -> str:
    if isinstance(node, Rotation):
        return f"rotate({node.object}, yaw={_fmt_number(node.yaw_deg)})"
    if isinstance(node, Translation):
        return (f"translate({node.object}, dx={_fmt_number(node.dx)}, "
                f"dy={_fmt_number(node.dy)}, dz={_fmt_number(node.dz)})")
    if isinstance(node, Scaling):
        return f"scale({node.object}, factor={_fmt_number(node.factor)})"
    if isinstance(node, CameraMotion):
        if isinstance(node.path, str):
            return f"move_camera(path={node.path})"
        inner = ", ".join(_fmt_number(v) for v in node.path)
        return f"move_camera(path=[{inner}])"
    if isinstance(node, Composition):
        inner = ", ".join(_print_node(c) for c in node.children)
        return f"compose([{inner}])"
    raise TypeError(f"not an action primitive: {node!r}")


def print_program(program: ActionProgram) -> str:
    """Unique canonical text form of a program."""
    return _print_node(program.root)


# -- validation ---------------------------------------------------------------

@dataclass(frozen=True)
class SceneManifest:
    """What the target scene offers: object ids, locked task parameters,
    optional per-parameter ranges (e.g. scale bounds)."""

    objects: frozenset[str]
    locked: frozenset[str] = frozenset()
    scale_range: tuple[float, float] = (0.2, 3.0)


def validate_program(program: ActionProgram, manifest: SceneManifest) -> list[str]:
    """Returns a list of violation messages; empty means ok."""
    violations: list[str] = []

    def walk(node: ActionPrimitive):
        if isinstance(node, (Rotation, Translation, Scaling)):
            if node.object not in manifest.objects:
                violations.append(f"unknown object {node.object}")
        if isinstance(node, Scaling):
            lo, hi = manifest.scale_range
            if not (lo <= node.factor <= hi):
                violations.append(
                    f"out-of-range factor {_fmt_number(node.factor)} for {node.object}")
        if isinstance(node, CameraMotion) and "camera" in manifest.locked:
            violations.append("task-locked parameter: camera")
        if isinstance(node, Composition):
            for child in node.children:
                walk(child)

    walk(program.root)
    return violations


# -- sampling -----------------------------------------------------------------

def _primitives(node: ActionPrimitive) -> list[ActionPrimitive]:
    if isinstance(node, Composition):
        out: list[ActionPrimitive] = []
        for child in node.children:
            out.extend(_primitives(child))
        return out
    return [node]


def sweep_extent_deg(program: ActionProgram) -> float:
    """Total angular sweep of the program: the largest absolute rotation."""
    return max((abs(p.yaw_deg) for p in _primitives(program.root)
                if isinstance(p, Rotation)), default=0.0)


def sample_states(
    program: ActionProgram,
    mode: SamplingMode,
    locked: frozenset[str] = frozenset(),
) -> list[StateDelta]:
    """Sample the program at endpoints (image mode) or densely (video mode).

    Every returned delta interpolates all primitives at the same fraction of
    the sweep; the first delta is always the identity and the last always
    lands exactly on the target, clamping the final step when the video step
    does not divide the sweep.
    """
    prims = _primitives(program.root)
    if "camera" in locked and any(isinstance(p, CameraMotion) for p in prims):
        raise ActionValidationError("camera motion sampled in a camera-locked task")

    if isinstance(mode, ImageEndpoints):
        fractions = [(0.0, False), (1.0, False)]
    else:
        step = float(mode.step_deg)
        if step <= 0:
            raise ActionValidationError("step must be positive")
        sweep = sweep_extent_deg(program)
        if sweep <= 0:
            raise ActionValidationError(
                "dense sampling requires a program with an angular sweep")
        count = math.ceil(sweep / step)
        fractions = []
        for i in range(count + 1):
            angle = i * step
            if angle >= sweep:
                # does-not-divide case lands past the target: clamp and flag
                fractions.append((1.0, angle > sweep))
            else:
                fractions.append((angle / sweep, False))

    deltas: list[StateDelta] = []
    for index, (t, clamped) in enumerate(fractions):
        changes: dict[tuple[str, str], float] = {}
        for prim in prims:
            if isinstance(prim, Rotation):
                changes[(prim.object, "yaw_deg")] = prim.yaw_deg * t
            elif isinstance(prim, Translation):
                changes[(prim.object, "dx")] = prim.dx * t
                changes[(prim.object, "dy")] = prim.dy * t
                changes[(prim.object, "dz")] = prim.dz * t
            elif isinstance(prim, Scaling):
                changes[(prim.object, "scale")] = 1.0 + (prim.factor - 1.0) * t
            elif isinstance(prim, CameraMotion):
                changes[("camera", "path_t")] = t
        deltas.append(StateDelta(index=index, fraction=t, changes=changes,
                                 clamped=clamped))
    return deltas
