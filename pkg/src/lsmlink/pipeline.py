"""Protocol-neutral dispatch pipeline.

Every adapter funnels inbound messages into :meth:`Pipeline.dispatch`, which
runs the same stages regardless of transport: resolve the resource, authorize
the (user, id, action) triple, check the action against the resource kind,
execute, and enrich the result with metadata. Internal failures become error
responses; a dispatch never aborts.
"""

from __future__ import annotations

import logging
import random
import threading
import time
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Mapping

from . import wire
from .resources import (
    FunctionNode,
    KindMismatch,
    Metadata,
    NodeKind,
    NotAnObject,
    NotFound,
    ObjectNode,
    ResourceId,
    ResourceNode,
    Value,
    VariableNode,
    resolve,
)

log = logging.getLogger(__name__)


class Action(Enum):
    READ = "read"
    UPDATE = "update"
    CREATE = "create"
    DELETE = "delete"
    ON_SUBSCRIBE = "on_subscribe"
    ON_UNSUBSCRIBE = "on_unsubscribe"
    NOTIFY = "notify"
    ON_INVOKE = "on_invoke"


ALLOWED_ACTIONS: dict[NodeKind, frozenset[Action]] = {
    NodeKind.VARIABLE: frozenset(
        {Action.READ, Action.UPDATE, Action.ON_SUBSCRIBE, Action.ON_UNSUBSCRIBE, Action.NOTIFY}
    ),
    NodeKind.OBJECT: frozenset({Action.CREATE, Action.DELETE}),
    NodeKind.FUNCTION: frozenset({Action.ON_INVOKE}),
}

PAYLOAD_FREE_ACTIONS = frozenset(
    {Action.READ, Action.DELETE, Action.ON_SUBSCRIBE, Action.ON_UNSUBSCRIBE}
)


class AuthzDecision(Enum):
    ALLOW = "allow"
    READONLY = "readonly"
    DENY = "deny"


READONLY_ACTIONS = frozenset({Action.READ, Action.ON_SUBSCRIBE, Action.ON_UNSUBSCRIBE})


class PipelineError(Exception):
    """Base for failures that serialize to an error envelope."""

    code = "internal"

    def __init__(self, message: str) -> None:
        super().__init__(message)
        self.message = message


class NotFoundError(PipelineError):
    code = "not_found"


class ForbiddenError(PipelineError):
    code = "forbidden"


class InvalidActionError(PipelineError):
    code = "invalid_action"


class BadPayloadError(PipelineError):
    code = "bad_payload"


class InternalError(PipelineError):
    code = "internal"


Sink = Callable[[bytes], None]


@dataclass
class ActionRequest:
    """Protocol-neutral request envelope. ``payload`` holds untyped JSON
    values; kinds are bound against the resource declaration at dispatch.
    ``recipient`` is adapter context for the subscription actions, like the
    user string it never travels on the wire."""

    user: str
    resource: ResourceId
    action: Action
    payload: Mapping[str, object] = field(default_factory=dict)
    recipient: Sink | None = None


@dataclass
class ActionResponse:
    result: dict[str, Value] | None = None
    meta: Metadata | None = None
    error: tuple[str, str] | None = None

    def __post_init__(self) -> None:
        if (self.result is None) == (self.error is None):
            raise ValueError("exactly one of result/error must be set")

    @property
    def ok(self) -> bool:
        return self.error is None

    def to_bytes(self) -> bytes:
        if self.error is not None:
            return wire.envelope_error(*self.error)
        assert self.result is not None and self.meta is not None
        return wire.envelope_result(self.result, self.meta)


@dataclass(frozen=True)
class PolicyRule:
    user: str
    decision: AuthzDecision
    pattern: str

    def match_specificity(self, rid_text: str) -> int | None:
        """Length of the matched literal prefix, or None. Exact patterns
        outrank a prefix glob with the same stem by one point."""
        if self.pattern == "**":
            return 0
        if self.pattern.endswith("/**"):
            stem = self.pattern[:-3]
            if rid_text == stem or rid_text.startswith(stem + "/"):
                return len(stem)
            return None
        if rid_text == self.pattern:
            return len(self.pattern) + 1
        return None


class Policy:
    """Authorization rules: lines ``user:allow|readonly|deny:<id-glob>`` where
    the glob is exact or ends in ``/**`` (or is ``**`` alone). The longest
    matching prefix wins; later lines break ties; no match means deny."""

    def __init__(self, rules: list[PolicyRule]) -> None:
        self.rules = rules

    @classmethod
    def parse(cls, text: str) -> "Policy":
        rules = []
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split(":", 2)
            if len(parts) != 3:
                raise ValueError(f"policy line {lineno}: expected user:decision:pattern")
            user, decision, pattern = (p.strip() for p in parts)
            try:
                dec = AuthzDecision(decision)
            except ValueError:
                raise ValueError(f"policy line {lineno}: unknown decision {decision!r}") from None
            if not user or not pattern:
                raise ValueError(f"policy line {lineno}: empty user or pattern")
            rules.append(PolicyRule(user, dec, pattern))
        return cls(rules)

    @classmethod
    def parse_lines(cls, lines) -> "Policy":
        return cls.parse("\n".join(lines))

    def users(self) -> set[str]:
        return {r.user for r in self.rules}

    def decide(self, user: str, rid: ResourceId) -> AuthzDecision:
        rid_text = rid.render()
        best: tuple[int, int] | None = None
        decision = AuthzDecision.DENY
        for index, rule in enumerate(self.rules):
            if rule.user != user:
                continue
            spec = rule.match_specificity(rid_text)
            if spec is None:
                continue
            key = (spec, index)
            if best is None or key >= best:
                best = key
                decision = rule.decision
        return decision


def authorize(user: str, rid: ResourceId, action: Action, policy: Policy) -> AuthzDecision:
    del action  # the decision is per user+resource; dispatch enforces it per action
    return policy.decide(user, rid)


def permits(decision: AuthzDecision, action: Action) -> bool:
    if decision is AuthzDecision.ALLOW:
        return True
    if decision is AuthzDecision.READONLY:
        return action in READONLY_ACTIONS
    return False


class SubscriptionRegistry:
    """Fan-out table from variable ids to opaque sinks taking envelope bytes.

    Sinks that raise are dropped and logged; a recipient removed before a
    notify snapshot is taken receives nothing from that notify.
    """

    def __init__(self) -> None:
        self._subs: dict[ResourceId, dict[int, Sink]] = {}
        self._lock = threading.Lock()

    def subscribe(self, rid: ResourceId, sink: Sink) -> None:
        with self._lock:
            self._subs.setdefault(rid, {})[id(sink)] = sink

    def unsubscribe(self, rid: ResourceId, sink: Sink) -> None:
        with self._lock:
            sinks = self._subs.get(rid)
            if sinks is not None:
                sinks.pop(id(sink), None)
                if not sinks:
                    del self._subs[rid]

    def drop_resource(self, rid: ResourceId) -> None:
        with self._lock:
            self._subs.pop(rid, None)

    def recipient_count(self, rid: ResourceId) -> int:
        with self._lock:
            return len(self._subs.get(rid, ()))

    def notify(self, rid: ResourceId, value: Value, meta: Metadata) -> int:
        payload = wire.envelope_value(value, meta)
        with self._lock:
            snapshot = list(self._subs.get(rid, {}).values())
        failed: list[Sink] = []
        for sink in snapshot:
            try:
                sink(payload)
            except Exception:
                log.warning("dropping failed notification sink for %s", rid, exc_info=True)
                failed.append(sink)
        for sink in failed:
            self.unsubscribe(rid, sink)
        return len(snapshot)


class SimClock:
    """Virtual UTC-nanosecond clock advanced explicitly by the simulation."""

    def __init__(self, start_ns: int = 0) -> None:
        self._ns = int(start_ns)
        self._lock = threading.Lock()

    def now_ns(self) -> int:
        with self._lock:
            return self._ns

    def advance(self, seconds: float) -> None:
        if seconds < 0:
            raise ValueError("clock cannot run backwards")
        with self._lock:
            self._ns += int(round(seconds * 1e9))


class SystemClock:
    """Wall clock calibrated once against the monotonic clock so successive
    reads never step backwards."""

    def __init__(self) -> None:
        self._base = time.time_ns() - time.monotonic_ns()

    def now_ns(self) -> int:
        return self._base + time.monotonic_ns()


class NonceSource:
    """Seeded generator of fresh 128-bit hex correlation nonces."""

    def __init__(self, seed: int | None = None) -> None:
        self._rng = random.Random(seed)
        self._lock = threading.Lock()

    def fresh(self) -> str:
        with self._lock:
            return f"{self._rng.getrandbits(128):032x}"


class Pipeline:
    """Binds a resource tree to authorization, subscriptions and a clock."""

    def __init__(
        self,
        root: ObjectNode,
        policy: Policy,
        registry: SubscriptionRegistry | None = None,
        clock=None,
        nonces: NonceSource | None = None,
    ) -> None:
        self.root = root
        self.policy = policy
        self.registry = registry or SubscriptionRegistry()
        self.clock = clock or SystemClock()
        self.nonces = nonces or NonceSource()

    # -- helpers shared with the device model --

    def stamp(self, prev_ts: int | None = None) -> int:
        now = self.clock.now_ns()
        return now if prev_ts is None else max(now, prev_ts)

    def store_and_notify(self, rid: ResourceId, node: VariableNode, value: Value, meta: Metadata) -> int:
        """Atomic store + fan-out; the variable lock is the ordering point so
        per-topic deliveries happen in store order."""
        with node.lock:
            if value.kind is not node.value_kind:
                raise KindMismatch(f"value kind {value.kind} != declared {node.value_kind}")
            node._value = value
            node._meta = meta
            return self.registry.notify(rid, value, meta)

    # -- dispatch --

    def dispatch(self, request: ActionRequest) -> ActionResponse:
        try:
            return self._dispatch_inner(request)
        except PipelineError as exc:
            return ActionResponse(error=(exc.code, exc.message))
        except Exception as exc:  # never abort a dispatch
            log.exception("unhandled error dispatching %s %s", request.action, request.resource)
            return ActionResponse(error=("internal", f"{type(exc).__name__}: {exc}"))

    def _dispatch_inner(self, request: ActionRequest) -> ActionResponse:
        try:
            node = resolve(self.root, request.resource)
        except (NotFound, NotAnObject):
            raise NotFoundError(f"no resource at {request.resource}") from None

        decision = authorize(request.user, request.resource, request.action, self.policy)
        if not permits(decision, request.action):
            raise ForbiddenError(f"{request.user} may not {request.action.value} {request.resource}")

        if request.action not in ALLOWED_ACTIONS[node.kind]:
            raise InvalidActionError(
                f"{request.action.value} is not defined for {node.kind.value} resources"
            )

        if request.action in PAYLOAD_FREE_ACTIONS and request.payload:
            raise BadPayloadError(f"{request.action.value} takes no payload")

        handler = getattr(self, f"_do_{request.action.value}")
        return handler(request, node)

    def _ack_meta(self, payload: Mapping[str, object]) -> Metadata:
        nonce = payload.get("nonce")
        if not isinstance(nonce, str) or not nonce:
            nonce = self.nonces.fresh()
        return Metadata(ts=self.stamp(), nonce=nonce)

    def _do_read(self, request: ActionRequest, node: VariableNode) -> ActionResponse:
        value, meta = node.read()
        return ActionResponse(result={"value": value}, meta=meta)

    def _do_update(self, request: ActionRequest, node: VariableNode) -> ActionResponse:
        if not node.writable:
            raise ForbiddenError(f"{request.resource} is read-only")
        if "value" not in request.payload:
            raise BadPayloadError("update payload needs a 'value' field")
        extra = set(request.payload) - {"value", "nonce"}
        if extra:
            raise BadPayloadError(f"unexpected update fields {sorted(extra)}")
        try:
            value = Value.from_json(node.value_kind, request.payload["value"])
        except KindMismatch as exc:
            raise BadPayloadError(str(exc)) from None
        _, prev = node.read()
        meta = Metadata(ts=self.stamp(prev.ts), nonce=self._ack_meta(request.payload).nonce)
        self.store_and_notify(request.resource, node, value, meta)
        return ActionResponse(result={"value": value}, meta=meta)

    def _do_notify(self, request: ActionRequest, node: VariableNode) -> ActionResponse:
        current, prev = node.read()
        if "value" in request.payload:
            try:
                value = Value.from_json(node.value_kind, request.payload["value"])
            except KindMismatch as exc:
                raise BadPayloadError(str(exc)) from None
        else:
            value = current
        nonce = request.payload.get("nonce")
        meta = Metadata(
            ts=self.stamp(prev.ts),
            nonce=nonce if isinstance(nonce, str) and nonce else prev.nonce,
            cov=prev.cov,
        )
        delivered = self.store_and_notify(request.resource, node, value, meta)
        return ActionResponse(result={"delivered": Value.int64(delivered)}, meta=meta)

    def _do_on_subscribe(self, request: ActionRequest, node: VariableNode) -> ActionResponse:
        if request.recipient is None:
            raise BadPayloadError("subscribe needs a recipient")
        self.registry.subscribe(request.resource, request.recipient)
        return ActionResponse(result={}, meta=self._ack_meta(request.payload))

    def _do_on_unsubscribe(self, request: ActionRequest, node: VariableNode) -> ActionResponse:
        if request.recipient is None:
            raise BadPayloadError("unsubscribe needs a recipient")
        self.registry.unsubscribe(request.resource, request.recipient)
        return ActionResponse(result={}, meta=self._ack_meta(request.payload))

    def _do_create(self, request: ActionRequest, node: ObjectNode) -> ActionResponse:
        if node.create is None:
            raise ForbiddenError(f"{request.resource} does not accept new children")
        result = dict(node.create(request.payload))
        return ActionResponse(result=result, meta=self._ack_meta(request.payload))

    def _do_delete(self, request: ActionRequest, node: ObjectNode) -> ActionResponse:
        if node.delete is None:
            raise ForbiddenError(f"{request.resource} cannot be removed")
        result = dict(node.delete())
        return ActionResponse(result=result, meta=self._ack_meta(request.payload))

    def _do_on_invoke(self, request: ActionRequest, node: FunctionNode) -> ActionResponse:
        if node.handler is None:
            raise InternalError(f"{request.resource} has no implementation")
        declared = dict(node.sig.args)
        missing = set(declared) - set(request.payload)
        if missing:
            raise BadPayloadError(f"missing arguments {sorted(missing)}")
        extra = set(request.payload) - set(declared)
        if extra:
            raise BadPayloadError(f"unexpected arguments {sorted(extra)}")
        args: dict[str, Value] = {}
        for name, kind in declared.items():
            try:
                args[name] = Value.from_json(kind, request.payload[name])
            except KindMismatch as exc:
                raise BadPayloadError(f"argument {name!r}: {exc}") from None
        result = dict(node.handler(args))
        return ActionResponse(result=result, meta=self._ack_meta(request.payload))


def subscribe(
    pipeline: Pipeline, rid: ResourceId, recipient: Sink, user: str = "system"
) -> ActionResponse:
    return pipeline.dispatch(
        ActionRequest(user=user, resource=rid, action=Action.ON_SUBSCRIBE, recipient=recipient)
    )


def unsubscribe(
    pipeline: Pipeline, rid: ResourceId, recipient: Sink, user: str = "system"
) -> ActionResponse:
    return pipeline.dispatch(
        ActionRequest(user=user, resource=rid, action=Action.ON_UNSUBSCRIBE, recipient=recipient)
    )
