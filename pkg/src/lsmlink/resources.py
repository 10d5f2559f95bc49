"""Resource tree primitives: identifiers, typed values, nodes and class checks.

Every addressable thing on a device is one of three node kinds: objects
(containers, the only nodes with children), functions (callable with a typed
signature) and variables (typed fields with value plus metadata). Identifiers
are ordered segment paths that render to a single canonical text form usable
both as URL path and as MQTT topic suffix.
"""

from __future__ import annotations

import math
import re
import threading
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Iterator, Mapping

import numpy as np

_SEGMENT_RE = re.compile(r"[a-z0-9_-]+\Z")

_INT64_MIN = -(2**63)
_INT64_MAX = 2**63 - 1

QUATERNION_NORM_TOL = 1e-9
COVARIANCE_SYMMETRY_TOL = 1e-12
COVARIANCE_EIGENVALUE_FLOOR = -1e-12


class MalformedId(ValueError):
    """Identifier text violating the ``[a-z0-9_-]+`` segment grammar."""


class NotFound(LookupError):
    """No node exists at the requested identifier."""


class NotAnObject(LookupError):
    """Traversal tried to descend through a function or variable."""


class KindMismatch(ValueError):
    """A raw value does not fit the declared value kind."""


@dataclass(frozen=True)
class ResourceId:
    """Structured identifier: non-empty lowercase segments joined by ``/``."""

    segments: tuple[str, ...]

    def __post_init__(self) -> None:
        if not self.segments:
            raise MalformedId("identifier needs at least one segment")
        for seg in self.segments:
            if not _SEGMENT_RE.match(seg):
                raise MalformedId(f"bad segment {seg!r}")

    @classmethod
    def parse(cls, text: str) -> "ResourceId":
        if not isinstance(text, str) or not text:
            raise MalformedId("empty identifier")
        return cls(tuple(text.split("/")))

    def render(self) -> str:
        return "/".join(self.segments)

    def child(self, name: str) -> "ResourceId":
        return ResourceId(self.segments + (name,))

    def __str__(self) -> str:
        return self.render()


class ValueKind(Enum):
    BOOL = "bool"
    INT64 = "int64"
    FLOAT64 = "float64"
    TEXT = "text"
    ENUM = "enum"
    VECTOR3 = "float64[3]"
    VECTOR4 = "float64[4]"
    MATRIX3 = "float64[3x3]"


def _as_float(x: object, what: str) -> float:
    if isinstance(x, bool) or not isinstance(x, (int, float)):
        raise KindMismatch(f"{what}: expected a number, got {type(x).__name__}")
    f = float(x)
    if not math.isfinite(f):
        raise KindMismatch(f"{what}: non-finite number")
    return f


def _as_vector(x: object, length: int) -> tuple[float, ...]:
    if not isinstance(x, (list, tuple)) or len(x) != length:
        raise KindMismatch(f"expected a {length}-vector")
    return tuple(_as_float(v, "vector component") for v in x)


def _as_matrix3(x: object) -> tuple[tuple[float, float, float], ...]:
    if not isinstance(x, (list, tuple)) or len(x) != 3:
        raise KindMismatch("expected a 3x3 matrix")
    return tuple(_as_vector(row, 3) for row in x)  # type: ignore[return-value]


@dataclass(frozen=True)
class Value:
    """Tagged value; ``raw`` is always JSON-compatible (tuples for arrays)."""

    kind: ValueKind
    raw: bool | int | float | str | tuple

    @classmethod
    def from_json(cls, kind: ValueKind, raw: object) -> "Value":
        """Bind untyped JSON data to a declared kind; coercion is limited to
        int-to-float inside float64 slots (JSON cannot tell 3 from 3.0)."""
        if kind is ValueKind.BOOL:
            if not isinstance(raw, bool):
                raise KindMismatch("expected a boolean")
            return cls(kind, raw)
        if kind is ValueKind.INT64:
            if isinstance(raw, bool) or not isinstance(raw, int):
                raise KindMismatch("expected an integer")
            if not _INT64_MIN <= raw <= _INT64_MAX:
                raise KindMismatch("integer out of 64-bit range")
            return cls(kind, raw)
        if kind is ValueKind.FLOAT64:
            return cls(kind, _as_float(raw, "float64"))
        if kind in (ValueKind.TEXT, ValueKind.ENUM):
            if not isinstance(raw, str):
                raise KindMismatch("expected a string")
            return cls(kind, raw)
        if kind is ValueKind.VECTOR3:
            return cls(kind, _as_vector(raw, 3))
        if kind is ValueKind.VECTOR4:
            return cls(kind, _as_vector(raw, 4))
        if kind is ValueKind.MATRIX3:
            return cls(kind, _as_matrix3(raw))
        raise KindMismatch(f"unknown value kind {kind}")

    @classmethod
    def bool_(cls, b: bool) -> "Value":
        return cls.from_json(ValueKind.BOOL, b)

    @classmethod
    def int64(cls, i: int) -> "Value":
        return cls.from_json(ValueKind.INT64, i)

    @classmethod
    def float64(cls, x: float) -> "Value":
        return cls.from_json(ValueKind.FLOAT64, x)

    @classmethod
    def text(cls, s: str) -> "Value":
        return cls.from_json(ValueKind.TEXT, s)

    @classmethod
    def enum(cls, s: str) -> "Value":
        return cls.from_json(ValueKind.ENUM, s)

    @classmethod
    def vector(cls, v) -> "Value":
        seq = tuple(v)
        kind = ValueKind.VECTOR3 if len(seq) == 3 else ValueKind.VECTOR4
        return cls.from_json(kind, seq)

    @classmethod
    def matrix(cls, m) -> "Value":
        return cls.from_json(ValueKind.MATRIX3, tuple(tuple(row) for row in m))

    def to_json(self) -> object:
        return self.raw


def validate_unit_quaternion(q: tuple[float, ...]) -> tuple[float, ...]:
    """Orientation quaternions (w, x, y, z) must be unit within 1e-9."""
    if len(q) != 4:
        raise KindMismatch("quaternion needs 4 components")
    norm = math.sqrt(sum(c * c for c in q))
    if abs(norm - 1.0) > QUATERNION_NORM_TOL:
        raise KindMismatch(f"quaternion norm {norm!r} is not 1 within {QUATERNION_NORM_TOL}")
    return tuple(float(c) for c in q)


def validate_covariance(m) -> tuple[tuple[float, float, float], ...]:
    """Covariances are 3x3, symmetric within 1e-12 and PSD within -1e-12."""
    rows = _as_matrix3(m)
    a = np.asarray(rows, dtype=float)
    if np.max(np.abs(a - a.T)) > COVARIANCE_SYMMETRY_TOL:
        raise KindMismatch("covariance is not symmetric")
    if np.min(np.linalg.eigvalsh(a)) < COVARIANCE_EIGENVALUE_FLOOR:
        raise KindMismatch("covariance is not positive semi-definite")
    return rows


@dataclass(frozen=True)
class Metadata:
    """Per-value metadata: UTC nanosecond timestamp, correlation nonce and,
    for measured positions only, a 3x3 covariance in m^2."""

    ts: int
    nonce: str
    cov: tuple[tuple[float, float, float], ...] | None = None

    def __post_init__(self) -> None:
        if self.cov is not None:
            object.__setattr__(self, "cov", validate_covariance(self.cov))


class NodeKind(Enum):
    OBJECT = "object"
    FUNCTION = "function"
    VARIABLE = "variable"


@dataclass(frozen=True)
class FunctionSig:
    args: tuple[tuple[str, ValueKind], ...] = ()
    returns: tuple[tuple[str, ValueKind], ...] = ()


class ObjectNode:
    """Container node; the only kind allowed to hold children.

    ``create``/``delete`` are optional handlers wired by the device model for
    the few objects that support dynamic children; objects without them reject
    CREATE/DELETE as forbidden.
    """

    kind = NodeKind.OBJECT

    def __init__(
        self,
        children: Mapping[str, "ResourceNode"] | None = None,
        create: Callable[[Mapping[str, object]], Mapping[str, Value]] | None = None,
        delete: Callable[[], Mapping[str, Value]] | None = None,
    ) -> None:
        self.children: dict[str, ResourceNode] = dict(children or {})
        self.create = create
        self.delete = delete

    def add(self, name: str, node: "ResourceNode") -> "ResourceNode":
        if not _SEGMENT_RE.match(name):
            raise MalformedId(f"bad child name {name!r}")
        if name in self.children:
            raise ValueError(f"duplicate child {name!r}")
        self.children[name] = node
        return node


class FunctionNode:
    kind = NodeKind.FUNCTION

    def __init__(
        self,
        sig: FunctionSig,
        handler: Callable[[dict[str, Value]], Mapping[str, Value]] | None = None,
    ) -> None:
        self.sig = sig
        self.handler = handler


class VariableNode:
    """Typed field with atomic value+metadata access from many threads."""

    kind = NodeKind.VARIABLE

    def __init__(self, value_kind: ValueKind, writable: bool, value: Value, meta: Metadata) -> None:
        if value.kind is not value_kind:
            raise KindMismatch(f"initial value kind {value.kind} != {value_kind}")
        self.value_kind = value_kind
        self.writable = writable
        self._value = value
        self._meta = meta
        self._lock = threading.Lock()

    def read(self) -> tuple[Value, Metadata]:
        with self._lock:
            return self._value, self._meta

    def store(self, value: Value, meta: Metadata) -> None:
        if value.kind is not self.value_kind:
            raise KindMismatch(f"value kind {value.kind} != declared {self.value_kind}")
        with self._lock:
            self._value = value
            self._meta = meta

    @property
    def lock(self) -> threading.Lock:
        return self._lock


ResourceNode = ObjectNode | FunctionNode | VariableNode


@dataclass(frozen=True)
class ClassDefinition:
    """Structural class: an object instantiates it when it carries every
    required function (same signature), variable (same kind) and child object
    (recursively conforming). Extra members never hurt."""

    name: str
    functions: tuple[tuple[str, FunctionSig], ...] = ()
    variables: tuple[tuple[str, ValueKind], ...] = ()
    objects: tuple[tuple[str, "ClassDefinition"], ...] = ()

    def __post_init__(self) -> None:
        for group in (self.functions, self.variables, self.objects):
            names = [n for n, _ in group]
            if len(names) != len(set(names)):
                raise ValueError(f"duplicate requirement names in class {self.name!r}")

    def member_names(self) -> list[str]:
        return [n for n, _ in self.functions + self.variables + self.objects]


def parse_resource_id(text: str) -> ResourceId:
    return ResourceId.parse(text)


def resolve(root: ObjectNode, rid: ResourceId) -> ResourceNode:
    node: ResourceNode = root
    for i, seg in enumerate(rid.segments):
        if not isinstance(node, ObjectNode):
            raise NotAnObject("/".join(rid.segments[:i]))
        try:
            node = node.children[seg]
        except KeyError:
            raise NotFound(rid.render()) from None
    return node


def conforms(node: ResourceNode, cls: ClassDefinition) -> bool:
    if not isinstance(node, ObjectNode):
        return False
    for name, sig in cls.functions:
        member = node.children.get(name)
        if not isinstance(member, FunctionNode) or member.sig != sig:
            return False
    for name, kind in cls.variables:
        member = node.children.get(name)
        if not isinstance(member, VariableNode) or member.value_kind is not kind:
            return False
    for name, child_cls in cls.objects:
        member = node.children.get(name)
        if not isinstance(member, ObjectNode) or not conforms(member, child_cls):
            return False
    return True


def browse(node: ResourceNode) -> dict:
    """Model description of a node: structure and typing, never current values."""
    if isinstance(node, ObjectNode):
        return {
            "kind": "object",
            "children": [
                {"name": name, "kind": child.kind.value}
                for name, child in sorted(node.children.items())
            ],
        }
    if isinstance(node, FunctionNode):
        return {
            "kind": "function",
            "args": [{"name": n, "kind": k.value} for n, k in node.sig.args],
            "returns": [{"name": n, "kind": k.value} for n, k in node.sig.returns],
        }
    value, _ = node.read()
    del value
    return {
        "kind": "variable",
        "value_kind": node.value_kind.value,
        "writable": node.writable,
    }


def walk(root: ObjectNode) -> Iterator[tuple[ResourceId, ResourceNode]]:
    """Depth-first enumeration of every node below the root, with its id."""

    def rec(prefix: tuple[str, ...], node: ObjectNode) -> Iterator[tuple[ResourceId, ResourceNode]]:
        for name, child in sorted(node.children.items()):
            rid = ResourceId(prefix + (name,))
            yield rid, child
            if isinstance(child, ObjectNode):
                yield from rec(rid.segments, child)

    yield from rec((), root)
