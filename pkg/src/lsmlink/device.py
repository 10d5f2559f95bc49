"""Large-scale metrology device model.

Builds the resource tree every adapter serves — a generic device root with a
metrology subsystem of base stations and target entities — and implements the
entity lifecycle against a pluggable instrument backend: activation with a
search routine, acquisition modes, software/hardware-triggered measurement
streams and covariance-annotated position updates.

Centralized instruments (laser tracker) keep at most one entity in a
measuring state; activating another target implicitly deactivates the rest,
mirroring how a single beam re-points. Distributed instruments measure all
tags independently.
"""

from __future__ import annotations

import collections
import logging
import threading
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Mapping

import numpy as np

from .config import InstrumentConfig, InvalidConfig, TargetSpec
from .geometry import quat_about_axis, quat_multiply
from .instruments import Measurement, build_backend
from .pipeline import (
    ActionRequest,
    ActionResponse,
    BadPayloadError,
    ForbiddenError,
    InternalError,
    InvalidActionError,
    Metadata,
    NonceSource,
    Pipeline,
    Policy,
    SimClock,
    SubscriptionRegistry,
)
from .resources import (
    ClassDefinition,
    FunctionNode,
    FunctionSig,
    ObjectNode,
    ResourceId,
    Value,
    ValueKind,
    VariableNode,
    conforms,
    walk,
)

log = logging.getLogger(__name__)


class AcquisitionMode(Enum):
    CONTINUOUS = "CONTINUOUS"
    TRIGGERED = "TRIGGERED"
    EXTERNAL = "EXTERNAL"


class EntityState(Enum):
    TRIGGERED = "TRIGGERED"
    CONTINUOUS = "CONTINUOUS"
    INACTIVE = "INACTIVE"
    EXTERNAL = "EXTERNAL"
    WARNING = "WARNING"
    ERROR = "ERROR"
    MAINTENANCE = "MAINTENANCE"


MEASURING_STATES = frozenset(
    {EntityState.TRIGGERED, EntityState.CONTINUOUS, EntityState.EXTERNAL}
)

IDENTITY_QUATERNION = (1.0, 0.0, 0.0, 0.0)
ZERO_COVARIANCE = ((0.0, 0.0, 0.0), (0.0, 0.0, 0.0), (0.0, 0.0, 0.0))

_EMPTY_SIG = FunctionSig()
_ACTIVATE_SIG = FunctionSig(args=(("active", ValueKind.BOOL),))
_TRIGGER_SIG = FunctionSig(args=(("count", ValueKind.INT64), ("nonce", ValueKind.TEXT)))
_ACQUISITION_SIG = FunctionSig(args=(("mode", ValueKind.ENUM), ("nonce", ValueKind.TEXT)))
_CLIENT_SIG = FunctionSig(args=(("client", ValueKind.TEXT),))
_JOG_SIG = FunctionSig(args=(("d_azimuth", ValueKind.FLOAT64), ("d_elevation", ValueKind.FLOAT64)))
_CAMERA_SIG = FunctionSig(args=(("on", ValueKind.BOOL),))

CALIBRATION_CLASS = ClassDefinition(name="calibration")

ENTITY_CLASS = ClassDefinition(
    name="target_entity",
    functions=(
        ("activate", _ACTIVATE_SIG),
        ("reset", _EMPTY_SIG),
        ("trigger", _TRIGGER_SIG),
        ("acquisition", _ACQUISITION_SIG),
    ),
    variables=(
        ("name", ValueKind.TEXT),
        ("position", ValueKind.VECTOR3),
        ("quaternion", ValueKind.VECTOR4),
        ("target_type", ValueKind.TEXT),
        ("state", ValueKind.ENUM),
    ),
    objects=(("calibration", CALIBRATION_CLASS),),
)

BASE_CLASS = ClassDefinition(
    name="base_station",
    functions=(("activate", _ACTIVATE_SIG),),
    variables=(
        ("name", ValueKind.TEXT),
        ("position", ValueKind.VECTOR3),
        ("quaternion", ValueKind.VECTOR4),
        ("state", ValueKind.ENUM),
    ),
    objects=(("calibration", CALIBRATION_CLASS),),
)


@dataclass
class _EntityRuntime:
    spec: TargetSpec
    node: ObjectNode
    rid: ResourceId
    vars: dict[str, VariableNode]
    state: EntityState = EntityState.INACTIVE
    mode: AcquisitionMode = AcquisitionMode.TRIGGERED
    nonce: str = ""
    last_known: np.ndarray = field(default_factory=lambda: np.zeros(3))
    stream_acc: float = 0.0


@dataclass
class _BaseRuntime:
    node: ObjectNode
    rid: ResourceId
    vars: dict[str, VariableNode]
    name: str
    quaternion: tuple[float, float, float, float]


class DeviceService:
    """A simulated instrument wired to the dispatch pipeline.

    Owns the resource tree, the entity state machines and the virtual clock;
    adapters only ever call :meth:`handle` plus the browse helpers from
    :mod:`lsmlink.resources`.
    """

    def __init__(self, config: InstrumentConfig, clock: SimClock | None = None) -> None:
        self.config = config
        self.clock = clock or SimClock()
        self._rng = np.random.default_rng(config.seed)
        self.backend = build_backend(config.instrument, self._rng)
        self.registry = SubscriptionRegistry()
        self._lock = threading.RLock()
        self.shutdown_event = threading.Event()
        self._entities: dict[str, _EntityRuntime] = {}
        self._bases: dict[str, _BaseRuntime] = {}
        self._raw_clients: dict[str, Callable[[bytes], None]] = {}
        self._raw_buffers: dict[str, collections.deque] = {}
        self.on_variable_added: list[Callable[[ResourceId, VariableNode], None]] = []
        self.on_variable_removed: list[Callable[[ResourceId], None]] = []

        nonces = NonceSource(config.seed)
        self.root = ObjectNode()
        self.pipeline = Pipeline(
            root=self.root,
            policy=Policy.parse_lines(config.policy),
            registry=self.registry,
            clock=self.clock,
            nonces=nonces,
        )
        self._build_tree()

    # ------------------------------------------------------------------ build

    def _var(
        self,
        kind: ValueKind,
        value: Value,
        writable: bool = False,
        cov: tuple | None = None,
    ) -> VariableNode:
        meta = Metadata(ts=self.clock.now_ns(), nonce=self.pipeline.nonces.fresh(), cov=cov)
        return VariableNode(kind, writable, value, meta)

    def _calibration_node(self) -> ObjectNode:
        node = ObjectNode()
        node.add("status", self._var(ValueKind.TEXT, Value.text("uncalibrated")))
        return node

    def _build_tree(self) -> None:
        root = self.root
        root.add("reset", FunctionNode(_EMPTY_SIG, self._h_device_reset))
        root.add("shutdown", FunctionNode(_EMPTY_SIG, self._h_shutdown))
        root.add("add_raw_data_client", FunctionNode(_CLIENT_SIG, self._h_add_raw_client))
        root.add("remove_raw_data_client", FunctionNode(_CLIENT_SIG, self._h_remove_raw_client))
        root.add("state", self._var(ValueKind.ENUM, Value.enum("OK")))
        root.add("manufacturer", self._var(ValueKind.TEXT, Value.text(self.config.manufacturer)))
        root.add("api_version", self._var(ValueKind.INT64, Value.int64(1)))
        root.add("system_time", self._var(ValueKind.INT64, Value.int64(self.clock.now_ns())))
        root.add(
            "raw_data",
            self._var(ValueKind.VECTOR3, Value.vector((0.0, 0.0, 0.0)), cov=ZERO_COVARIANCE),
        )

        lsm = root.add("lsm", ObjectNode())
        lsm.add("reset", FunctionNode(_EMPTY_SIG, self._h_device_reset))
        lsm.add("calibration", self._calibration_node())
        bases = lsm.add("bases", ObjectNode())
        entities = lsm.add("entities", ObjectNode(create=self._h_create_entity))

        for base_spec in self.config.instrument.bases:
            node, runtime = self._build_base(base_spec)
            bases.add(base_spec.name, node)
            self._bases[base_spec.name] = runtime
            if self.backend.centralized:
                self.extend_tracker_base(base_spec.name)
        for target_spec in self.config.instrument.targets:
            node, runtime = self._build_entity(target_spec)
            node.delete = self._make_delete_entity(target_spec.name)
            entities.add(target_spec.name, node)
            self._entities[target_spec.name] = runtime

        for name, runtime in self._bases.items():
            if not conforms(runtime.node, BASE_CLASS):
                raise InvalidConfig(f"base {name!r} does not instantiate the base-station class")
        for name, runtime in self._entities.items():
            if not conforms(runtime.node, ENTITY_CLASS):
                raise InvalidConfig(f"target {name!r} does not instantiate the entity class")

    def _build_base(self, spec) -> tuple[ObjectNode, _BaseRuntime]:
        rid = ResourceId(("lsm", "bases", spec.name))
        node = ObjectNode()
        variables = {
            "name": self._var(ValueKind.TEXT, Value.text(spec.name), writable=True),
            "position": self._var(ValueKind.VECTOR3, Value.vector(spec.position)),
            "quaternion": self._var(ValueKind.VECTOR4, Value.vector(spec.quaternion)),
            "state": self._var(ValueKind.ENUM, Value.enum("ACTIVE")),
        }
        node.add("activate", FunctionNode(_ACTIVATE_SIG, self._make_base_activate(spec.name)))
        for var_name, var in variables.items():
            node.add(var_name, var)
        node.add("calibration", self._calibration_node())
        runtime = _BaseRuntime(
            node=node, rid=rid, vars=variables, name=spec.name, quaternion=spec.quaternion
        )
        return node, runtime

    def extend_tracker_base(self, name: str) -> None:
        """Grow jog and camera members on a tracker head; the extended object
        still instantiates the base-station class. Non-tracker bases have no
        beam to jog, so the extension is an invalid action for them."""
        if not self.backend.centralized:
            raise InvalidActionError("only a laser-tracker head supports jog/camera extensions")
        runtime = self._bases[name]
        camera = self._var(ValueKind.BOOL, Value.bool_(False))
        runtime.vars["camera"] = camera
        runtime.node.add("jog", FunctionNode(_JOG_SIG, self._make_jog(name)))
        runtime.node.add("set_camera", FunctionNode(_CAMERA_SIG, self._make_set_camera(name)))
        runtime.node.add("camera", camera)

    def _build_entity(self, spec: TargetSpec) -> tuple[ObjectNode, _EntityRuntime]:
        rid = ResourceId(("lsm", "entities", spec.name))
        node = ObjectNode()
        variables = {
            "name": self._var(ValueKind.TEXT, Value.text(spec.name), writable=True),
            "position": self._var(
                ValueKind.VECTOR3, Value.vector(spec.position), cov=ZERO_COVARIANCE
            ),
            "quaternion": self._var(ValueKind.VECTOR4, Value.vector(IDENTITY_QUATERNION)),
            "target_type": self._var(ValueKind.TEXT, Value.text(spec.target_type)),
            "state": self._var(ValueKind.ENUM, Value.enum(EntityState.INACTIVE.value)),
        }
        node.add("activate", FunctionNode(_ACTIVATE_SIG, self._make_activate(spec.name)))
        node.add("reset", FunctionNode(_EMPTY_SIG, self._make_reset(spec.name)))
        node.add("trigger", FunctionNode(_TRIGGER_SIG, self._make_trigger(spec.name)))
        node.add("acquisition", FunctionNode(_ACQUISITION_SIG, self._make_acquisition(spec.name)))
        node.add("inject_trigger", FunctionNode(_EMPTY_SIG, self._make_inject(spec.name)))
        for var_name, var in variables.items():
            node.add(var_name, var)
        node.add("calibration", self._calibration_node())
        runtime = _EntityRuntime(
            spec=spec,
            node=node,
            rid=rid,
            vars=variables,
            last_known=np.asarray(spec.position, dtype=float).copy(),
            nonce=self.pipeline.nonces.fresh(),
        )
        return node, runtime

    # ------------------------------------------------------------- dispatch

    def handle(self, request: ActionRequest) -> ActionResponse:
        return self.pipeline.dispatch(request)

    # -------------------------------------------------------- variable writes

    def _write_var(
        self,
        rid: ResourceId,
        node: VariableNode,
        value: Value,
        nonce: str | None = None,
        cov: tuple | None | str = "keep",
    ) -> None:
        _, prev = node.read()
        meta = Metadata(
            ts=self.pipeline.stamp(prev.ts),
            nonce=nonce if nonce is not None else self.pipeline.nonces.fresh(),
            cov=prev.cov if cov == "keep" else cov,
        )
        self.pipeline.store_and_notify(rid, node, value, meta)

    def _set_state(self, ent: _EntityRuntime, state: EntityState) -> None:
        if ent.state is state:
            return
        ent.state = state
        self._write_var(ent.rid.child("state"), ent.vars["state"], Value.enum(state.value))

    def _publish_measurement(self, ent: _EntityRuntime, m: Measurement) -> None:
        ent.last_known = np.asarray(m.position, dtype=float).copy()
        value = Value.vector(m.position)
        self._write_var(
            ent.rid.child("position"), ent.vars["position"], value, nonce=ent.nonce, cov=m.covariance
        )
        raw = self.root.children["raw_data"]
        self._write_var(ResourceId(("raw_data",)), raw, value, nonce=ent.nonce, cov=m.covariance)

    # ------------------------------------------------------- entity handlers

    def _entity(self, name: str) -> _EntityRuntime:
        try:
            return self._entities[name]
        except KeyError:
            raise InternalError(f"entity {name!r} no longer exists") from None

    def _deactivate(self, ent: _EntityRuntime) -> None:
        self.backend.release(ent.spec.name)
        if ent.state is not EntityState.MAINTENANCE:
            self._set_state(ent, EntityState.INACTIVE)

    def _run_search(self, ent: _EntityRuntime) -> None:
        if self.config.instrument.search_duration > 0:
            self.clock.advance(self.config.instrument.search_duration)
        try:
            found = self.backend.search(ent.spec.name, ent.last_known)
        except Exception:
            self._set_state(ent, EntityState.ERROR)
            raise
        if not found:
            self._set_state(ent, EntityState.ERROR)
            raise InternalError("search failed")
        self._set_state(ent, EntityState(ent.mode.value))

    def _make_activate(self, name: str):
        def handler(args: dict[str, Value]) -> Mapping[str, Value]:
            with self._lock:
                ent = self._entity(name)
                if not args["active"].raw:
                    self._deactivate(ent)
                    return {}
                if self.backend.centralized:
                    for other in self._entities.values():
                        if other is not ent:
                            self._deactivate(other)
                self._run_search(ent)
            return {}

        return handler

    def _make_reset(self, name: str):
        def handler(args: dict[str, Value]) -> Mapping[str, Value]:
            with self._lock:
                ent = self._entity(name)
                ent.mode = AcquisitionMode.TRIGGERED
                ent.stream_acc = 0.0
                ent.last_known = np.asarray(ent.spec.position, dtype=float).copy()
                self._write_var(
                    ent.rid.child("position"),
                    ent.vars["position"],
                    Value.vector(ent.spec.position),
                    cov=ZERO_COVARIANCE,
                )
                if ent.state in MEASURING_STATES or ent.state is EntityState.ERROR:
                    if self.backend.centralized:
                        for other in self._entities.values():
                            if other is not ent:
                                self._deactivate(other)
                    self._run_search(ent)
            return {}

        return handler

    def _make_trigger(self, name: str):
        def handler(args: dict[str, Value]) -> Mapping[str, Value]:
            count = args["count"].raw
            if not isinstance(count, int) or count < 1:
                raise BadPayloadError("count must be >= 1")
            with self._lock:
                ent = self._entity(name)
                if ent.state is not EntityState.TRIGGERED:
                    raise InvalidActionError(
                        "trigger requires an active entity in triggered acquisition mode"
                    )
                ent.nonce = str(args["nonce"].raw)
                for _ in range(count):
                    self._publish_measurement(ent, self.backend.measure(name))
            return {}

        return handler

    def _make_acquisition(self, name: str):
        def handler(args: dict[str, Value]) -> Mapping[str, Value]:
            symbol = str(args["mode"].raw)
            try:
                mode = AcquisitionMode(symbol)
            except ValueError:
                raise BadPayloadError(f"unknown acquisition mode {symbol!r}") from None
            with self._lock:
                ent = self._entity(name)
                ent.mode = mode
                ent.nonce = str(args["nonce"].raw)
                ent.stream_acc = 0.0
                if ent.state in MEASURING_STATES:
                    self._set_state(ent, EntityState(mode.value))
            return {}

        return handler

    def _make_inject(self, name: str):
        def handler(args: dict[str, Value]) -> Mapping[str, Value]:
            with self._lock:
                ent = self._entity(name)
                if ent.state is not EntityState.EXTERNAL:
                    raise InvalidActionError(
                        "hardware trigger requires an active entity in external acquisition mode"
                    )
                self._publish_measurement(ent, self.backend.measure(name))
            return {}

        return handler

    def inject_hardware_trigger(self, name: str) -> None:
        """Simulate a hardware trigger pulse on an EXTERNAL-mode entity."""
        self._make_inject(name)({})

    # --------------------------------------------------------- base handlers

    def _make_base_activate(self, name: str):
        def handler(args: dict[str, Value]) -> Mapping[str, Value]:
            active = bool(args["active"].raw)
            with self._lock:
                base = self._bases[name]
                self.backend.set_base_active(name, active)
                state = "ACTIVE" if active else "INACTIVE"
                current, _ = base.vars["state"].read()
                if current.raw != state:
                    self._write_var(base.rid.child("state"), base.vars["state"], Value.enum(state))
            return {}

        return handler

    def _make_jog(self, name: str):
        def handler(args: dict[str, Value]) -> Mapping[str, Value]:
            with self._lock:
                base = self._bases[name]
                q, _ = base.vars["quaternion"].read()
                rotated = quat_multiply(
                    quat_multiply(q.raw, quat_about_axis(float(args["d_azimuth"].raw), "z")),
                    quat_about_axis(float(args["d_elevation"].raw), "y"),
                )
                self._write_var(
                    base.rid.child("quaternion"), base.vars["quaternion"], Value.vector(rotated)
                )
            return {}

        return handler

    def _make_set_camera(self, name: str):
        def handler(args: dict[str, Value]) -> Mapping[str, Value]:
            with self._lock:
                base = self._bases[name]
                self._write_var(
                    base.rid.child("camera"), base.vars["camera"], Value.bool_(bool(args["on"].raw))
                )
            return {}

        return handler

    # -------------------------------------------------------- device handlers

    def _h_device_reset(self, args: dict[str, Value]) -> Mapping[str, Value]:
        with self._lock:
            self._write_var(ResourceId(("state",)), self.root.children["state"], Value.enum("OK"))
            for base in self._bases.values():
                self.backend.set_base_active(base.name, True)
                current, _ = base.vars["state"].read()
                if current.raw != "ACTIVE":
                    self._write_var(base.rid.child("state"), base.vars["state"], Value.enum("ACTIVE"))
                q, _ = base.vars["quaternion"].read()
                if tuple(q.raw) != base.quaternion:
                    self._write_var(
                        base.rid.child("quaternion"),
                        base.vars["quaternion"],
                        Value.vector(base.quaternion),
                    )
                camera = base.vars.get("camera")
                if camera is not None and camera.read()[0].raw:
                    self._write_var(base.rid.child("camera"), camera, Value.bool_(False))
            home: _EntityRuntime | None = None
            for ent in self._entities.values():
                self._deactivate(ent)
                if ent.state is EntityState.MAINTENANCE:
                    self._set_state(ent, EntityState.INACTIVE)
                ent.mode = AcquisitionMode.TRIGGERED
                ent.stream_acc = 0.0
                ent.last_known = np.asarray(ent.spec.position, dtype=float).copy()
                self._write_var(
                    ent.rid.child("position"),
                    ent.vars["position"],
                    Value.vector(ent.spec.position),
                    cov=ZERO_COVARIANCE,
                )
                if ent.spec.home:
                    home = ent
            if self.backend.centralized and home is not None:
                self._run_search(home)
        return {}

    def _h_shutdown(self, args: dict[str, Value]) -> Mapping[str, Value]:
        with self._lock:
            self._write_var(
                ResourceId(("state",)), self.root.children["state"], Value.enum("SHUTDOWN")
            )
        self.shutdown_event.set()
        return {}

    def _h_add_raw_client(self, args: dict[str, Value]) -> Mapping[str, Value]:
        client = str(args["client"].raw)
        with self._lock:
            if client in self._raw_clients:
                return {}
            buffer: collections.deque = collections.deque(maxlen=1024)
            sink = buffer.append
            self._raw_clients[client] = sink
            self._raw_buffers[client] = buffer
            self.registry.subscribe(ResourceId(("raw_data",)), sink)
        return {}

    def _h_remove_raw_client(self, args: dict[str, Value]) -> Mapping[str, Value]:
        client = str(args["client"].raw)
        with self._lock:
            sink = self._raw_clients.pop(client, None)
            self._raw_buffers.pop(client, None)
            if sink is not None:
                self.registry.unsubscribe(ResourceId(("raw_data",)), sink)
        return {}

    def raw_client_buffer(self, client: str) -> list[bytes]:
        with self._lock:
            return list(self._raw_buffers.get(client, ()))

    # ------------------------------------------------------- dynamic targets

    def _h_create_entity(self, payload: Mapping[str, object]) -> Mapping[str, Value]:
        try:
            spec = TargetSpec.from_json(dict(payload), "target.")
        except InvalidConfig as exc:
            raise BadPayloadError(str(exc)) from None
        if spec.home:
            raise BadPayloadError("target.home: the home target is fixed at build time")
        with self._lock:
            entities = self._entities_object()
            if spec.name in entities.children:
                raise BadPayloadError(f"target.name: {spec.name!r} already exists")
            self.backend.add_target(spec)
            node, runtime = self._build_entity(spec)
            node.delete = self._make_delete_entity(spec.name)
            entities.add(spec.name, node)
            self._entities[spec.name] = runtime
            for rid, child in walk(node):
                if isinstance(child, VariableNode):
                    full = ResourceId(runtime.rid.segments + rid.segments)
                    for hook in self.on_variable_added:
                        hook(full, child)
        return {}

    def _make_delete_entity(self, name: str):
        def handler() -> Mapping[str, Value]:
            with self._lock:
                ent = self._entities.get(name)
                if ent is None:
                    raise InternalError(f"entity {name!r} no longer exists")
                if ent.spec.home:
                    raise ForbiddenError("the home target cannot be removed")
                if ent.state is not EntityState.INACTIVE:
                    raise ForbiddenError("only an inactive entity can be removed")
                entities = self._entities_object()
                del entities.children[name]
                del self._entities[name]
                self.backend.remove_target(name)
                for rid, child in walk(ent.node):
                    full = ResourceId(ent.rid.segments + rid.segments)
                    if isinstance(child, VariableNode):
                        self.registry.drop_resource(full)
                        for hook in self.on_variable_removed:
                            hook(full)
            return {}

        return handler

    def _entities_object(self) -> ObjectNode:
        lsm = self.root.children["lsm"]
        assert isinstance(lsm, ObjectNode)
        entities = lsm.children["entities"]
        assert isinstance(entities, ObjectNode)
        return entities

    # ------------------------------------------------------------ simulation

    def step_simulation(self, dt: float) -> int:
        """Advance the virtual clock and motion profiles by ``dt`` seconds and
        emit CONTINUOUS-mode measurements at the configured rate. Returns the
        number of measurements emitted."""
        if dt < 0:
            raise ValueError("dt must be >= 0")
        emitted = 0
        with self._lock:
            self.clock.advance(dt)
            self.backend.step(dt)
            self._write_var(
                ResourceId(("system_time",)),
                self.root.children["system_time"],
                Value.int64(self.clock.now_ns()),
            )
            period = 1.0 / self.config.instrument.rate_hz
            for ent in self._entities.values():
                if ent.state is not EntityState.CONTINUOUS:
                    ent.stream_acc = 0.0
                    continue
                ent.stream_acc += dt
                while ent.stream_acc >= period - 1e-12:
                    ent.stream_acc -= period
                    try:
                        self._publish_measurement(ent, self.backend.measure(ent.spec.name))
                    except Exception:
                        log.exception("continuous measurement failed for %s", ent.spec.name)
                        self._set_state(ent, EntityState.ERROR)
                        break
                    emitted += 1
        return emitted

    # ------------------------------------------------------------- test/ops

    def entity_state(self, name: str) -> EntityState:
        with self._lock:
            return self._entity(name).state

    def entity_mode(self, name: str) -> AcquisitionMode:
        with self._lock:
            return self._entity(name).mode

    def measuring_entities(self) -> list[str]:
        with self._lock:
            return [n for n, e in self._entities.items() if e.state in MEASURING_STATES]

    def inject_entity_state(self, name: str, state: EntityState) -> None:
        """Maintenance/fault injection hook for states the simulators never
        raise on their own (WARNING, MAINTENANCE)."""
        with self._lock:
            ent = self._entity(name)
            if state in MEASURING_STATES:
                raise InvalidActionError("measuring states are reached via activate/acquisition")
            self.backend.release(name)
            self._set_state(ent, state)

    def variable_ids(self) -> list[ResourceId]:
        with self._lock:
            return [rid for rid, node in walk(self.root) if isinstance(node, VariableNode)]


def build_device_tree(config: InstrumentConfig, clock: SimClock | None = None) -> DeviceService:
    """Convenience constructor mirroring the one-call build most tests use."""
    return DeviceService(config, clock=clock)
