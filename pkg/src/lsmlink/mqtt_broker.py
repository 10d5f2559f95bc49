"""Embedded MQTT 3.1.1 broker (QoS 0, retained messages).

The broker core owns sessions, routing and the retained store; device
behavior is injected through a small application interface so the protocol
bridge can reuse the same core against a remote device.

Delivery model for device variables: an exact-topic subscription is routed
through the dispatch pipeline (the session's queue becomes a subscription
recipient), wildcard filters are served by broker-side filter matching fed
from one retained-store sink per variable. A session never receives a change
twice: broker-side routing skips topics the pipeline already delivers to it.

Retained messages double as the read mechanism: the retained envelope on a
value topic is byte-identical to the HTTP GET body because both come from
the same canonical serializer.
"""

from __future__ import annotations

import logging
import socket
import threading
from collections import deque

from . import mqtt_codec as mc
from . import wire
from .device import DeviceService
from .pipeline import Action, ActionRequest, AuthzDecision, permits
from .resources import (
    FunctionNode,
    MalformedId,
    NotAnObject,
    NotFound,
    ResourceId,
    VariableNode,
    resolve,
    walk,
)

log = logging.getLogger(__name__)

QUEUE_LIMIT = 1000
INVALID_NONCE_LEVEL = "_invalid"


class Session:
    """One connected client: reader loop, bounded outbound queue, writer."""

    def __init__(self, broker: "MqttBroker", sock: socket.socket, peer: str) -> None:
        self.broker = broker
        self.sock = sock
        self.peer = peer
        self.client_id = ""
        self.user = ""
        self.filters: set[str] = set()
        self.data: dict = {}  # application scratch (e.g. pipeline sinks per topic)
        self._queue: deque[bytes] = deque()
        self._cond = threading.Condition()
        self._closed = False
        self._writer = threading.Thread(target=self._write_loop, daemon=True)
        self._reader = threading.Thread(target=self._read_loop, daemon=True)

    def start(self) -> None:
        self._writer.start()
        self._reader.start()

    def enqueue(self, data: bytes) -> None:
        with self._cond:
            if self._closed:
                return
            if len(self._queue) >= QUEUE_LIMIT:
                self._queue.popleft()
                log.warning("session %s outbound queue full, dropping oldest", self.client_id)
            self._queue.append(data)
            self._cond.notify()

    def send_packet(self, packet: mc.Packet) -> None:
        self.enqueue(mc.encode(packet))

    def close(self) -> None:
        with self._cond:
            if self._closed:
                return
            self._closed = True
            self._cond.notify()
        try:
            self.sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self.sock.close()
        self.broker._session_closed(self)

    def _write_loop(self) -> None:
        while True:
            with self._cond:
                while not self._queue and not self._closed:
                    self._cond.wait()
                if self._closed and not self._queue:
                    return
                data = self._queue.popleft()
            try:
                self.sock.sendall(data)
            except OSError:
                self.close()
                return

    def _read_loop(self) -> None:
        reader = mc.FrameReader(self.sock)
        try:
            packet = reader.read_packet()
            if not isinstance(packet, mc.Connect):
                return
            if not self._handle_connect(packet):
                return
            while True:
                packet = reader.read_packet()
                if packet is None or isinstance(packet, mc.Disconnect):
                    return
                self._handle(packet)
        except (mc.ProtocolError, OSError) as exc:
            log.debug("session %s closed: %s", self.client_id or self.peer, exc)
        except Exception:
            log.exception("session %s crashed", self.client_id or self.peer)
        finally:
            self.close()

    def _handle_connect(self, packet: mc.Connect) -> bool:
        user = self.broker.app.authenticate(packet.username, packet.password)
        if user is None:
            self.send_packet(mc.ConnAck(return_code=mc.CONNACK_REFUSED_BAD_CREDENTIALS))
            self._flush_and_stop()
            return False
        if packet.will_topic is not None:
            log.debug("ignoring will message from %s (not supported)", packet.client_id)
        self.user = user
        self.client_id = packet.client_id or f"anon-{id(self):x}"
        self.broker._register_session(self)
        self.send_packet(mc.ConnAck(return_code=mc.CONNACK_ACCEPTED))
        return True

    def _handle(self, packet: mc.Packet) -> None:
        if isinstance(packet, mc.PingReq):
            self.send_packet(mc.PingResp())
        elif isinstance(packet, mc.Subscribe):
            codes = []
            for filt, _qos in packet.topics:
                rc = self.broker.app.on_subscribe(self, filt)
                if rc != mc.SUBACK_FAILURE:
                    self.filters.add(filt)
                codes.append(rc)
            self.send_packet(mc.SubAck(packet_id=packet.packet_id, return_codes=tuple(codes)))
            for filt, rc in zip((t for t, _ in packet.topics), codes):
                if rc != mc.SUBACK_FAILURE:
                    self.broker.deliver_retained(self, filt)
        elif isinstance(packet, mc.Unsubscribe):
            for filt in packet.topics:
                self.filters.discard(filt)
                self.broker.app.on_unsubscribe(self, filt)
            self.send_packet(mc.UnsubAck(packet_id=packet.packet_id))
        elif isinstance(packet, mc.Publish):
            if packet.qos == 2:
                raise mc.ProtocolError("QoS 2 is not supported")
            if packet.qos == 1 and packet.packet_id is not None:
                self.send_packet(mc.PubAck(packet_id=packet.packet_id))
            if self.broker.app.on_publish(self, packet):
                self.broker.publish(packet.topic, packet.payload, retain=packet.retain)
        elif isinstance(packet, (mc.PubAck, mc.PingResp)):
            pass
        else:
            raise mc.ProtocolError(f"unexpected {type(packet).__name__} from client")

    def _flush_and_stop(self) -> None:
        with self._cond:
            while self._queue and not self._closed:
                self._cond.wait(timeout=0.01)
        self.close()


class BrokerApp:
    """Behavior the broker core delegates to its embedding."""

    def authenticate(self, username: str | None, password: bytes | None) -> str | None:
        raise NotImplementedError

    def on_subscribe(self, session: Session, filt: str) -> int:
        return 0

    def on_unsubscribe(self, session: Session, filt: str) -> None:
        pass

    def on_publish(self, session: Session, packet: mc.Publish) -> bool:
        """Return True to let the broker route the publish generically."""
        return True

    def may_receive(self, user: str, topic: str) -> bool:
        return True

    def delivers_directly(self, session: Session, topic: str) -> bool:
        """True when the pipeline already feeds this session this topic."""
        return False

    def on_session_closed(self, session: Session) -> None:
        pass


class MqttBroker:
    """TCP listener + session table + retained store."""

    def __init__(self, app: BrokerApp, host: str = "127.0.0.1", port: int = 0) -> None:
        self.app = app
        self._listener = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        self._listener.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        self._listener.bind((host, port))
        self._sessions: dict[str, Session] = {}
        self._lock = threading.Lock()
        self._retained: dict[str, bytes] = {}
        self._accept_thread: threading.Thread | None = None
        self._stopping = False

    @property
    def port(self) -> int:
        return self._listener.getsockname()[1]

    def start(self) -> None:
        self._listener.listen()
        self._listener.settimeout(0.1)  # lets stop() interrupt the accept loop
        self._accept_thread = threading.Thread(
            target=self._accept_loop, name="mqtt-broker", daemon=True
        )
        self._accept_thread.start()

    def stop(self) -> None:
        self._stopping = True
        try:
            self._listener.close()
        except OSError:
            pass
        with self._lock:
            sessions = list(self._sessions.values())
        for session in sessions:
            session.close()
        if self._accept_thread is not None:
            self._accept_thread.join(timeout=5)

    def _accept_loop(self) -> None:
        while not self._stopping:
            try:
                sock, addr = self._listener.accept()
            except socket.timeout:
                continue
            except OSError:
                return
            sock.settimeout(None)
            sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            Session(self, sock, f"{addr[0]}:{addr[1]}").start()

    def _register_session(self, session: Session) -> None:
        with self._lock:
            old = self._sessions.get(session.client_id)
            self._sessions[session.client_id] = session
        if old is not None and old is not session:
            log.info("session takeover for client id %r", session.client_id)
            old.close()

    def _session_closed(self, session: Session) -> None:
        with self._lock:
            if self._sessions.get(session.client_id) is session:
                del self._sessions[session.client_id]
        self.app.on_session_closed(session)

    # ------------------------------------------------------------ publishing

    def set_retained(self, topic: str, payload: bytes) -> None:
        with self._lock:
            if payload:
                self._retained[topic] = payload
            else:
                self._retained.pop(topic, None)

    def retained(self, topic: str) -> bytes | None:
        with self._lock:
            return self._retained.get(topic)

    def retained_snapshot(self) -> dict[str, bytes]:
        with self._lock:
            return dict(self._retained)

    def publish(self, topic: str, payload: bytes, retain: bool = False) -> None:
        """Store (when retained) and fan out to subscribed sessions."""
        if retain:
            self.set_retained(topic, payload)
        self.route(topic, payload)

    def route(self, topic: str, payload: bytes, skip_direct: bool = False) -> None:
        with self._lock:
            sessions = list(self._sessions.values())
        frame = mc.encode(mc.Publish(topic=topic, payload=payload))
        for session in sessions:
            if skip_direct and self.app.delivers_directly(session, topic):
                continue
            if not any(mc.topic_matches(f, topic) for f in session.filters):
                continue
            if not self.app.may_receive(session.user, topic):
                continue
            session.enqueue(frame)

    def deliver_retained(self, session: Session, filt: str) -> None:
        for topic, payload in sorted(self.retained_snapshot().items()):
            if not mc.topic_matches(filt, topic):
                continue
            if self.app.delivers_directly(session, topic):
                continue  # the pipeline recipient path already sent it
            if not self.app.may_receive(session.user, topic):
                continue
            session.enqueue(mc.encode(mc.Publish(topic=topic, payload=payload, retain=True)))


class DeviceBrokerApp(BrokerApp):
    """Exposes one device over the broker.

    Value topics are ``<device>/<resource-id>``; function invocation follows
    the request/reply convention ``<device>/<id>/invoke`` answered on
    ``<device>/<id>/result/<nonce>``.
    """

    def __init__(self, device: DeviceService, device_id: str, credentials: dict[str, str]) -> None:
        self.device = device
        self.device_id = device_id
        self.credentials = dict(credentials)
        self.broker: MqttBroker | None = None

    # ---------------------------------------------------------------- wiring

    def attach(self, broker: MqttBroker) -> None:
        self.broker = broker
        for rid, node in walk(self.device.root):
            if isinstance(node, VariableNode):
                self._wire_variable(rid, node)
        self.device.on_variable_added.append(self._wire_variable)
        self.device.on_variable_removed.append(self._unwire_variable)

    def _wire_variable(self, rid: ResourceId, node: VariableNode) -> None:
        assert self.broker is not None
        topic = self.topic_for(rid)
        value, meta = node.read()
        self.broker.set_retained(topic, wire.envelope_value(value, meta))

        def sink(payload: bytes, _topic: str = topic) -> None:
            broker = self.broker
            if broker is not None:
                broker.set_retained(_topic, payload)
                broker.route(_topic, payload, skip_direct=True)

        self.device.registry.subscribe(rid, sink)

    def _unwire_variable(self, rid: ResourceId) -> None:
        if self.broker is not None:
            topic = self.topic_for(rid)
            self.broker.set_retained(topic, b"")
            self.broker.route(topic, b"")

    def topic_for(self, rid: ResourceId) -> str:
        return f"{self.device_id}/{rid.render()}"

    def rid_for(self, topic: str) -> ResourceId | None:
        prefix = self.device_id + "/"
        if not topic.startswith(prefix):
            return None
        try:
            return ResourceId.parse(topic[len(prefix) :])
        except MalformedId:
            return None

    def _node_at(self, rid: ResourceId):
        try:
            return resolve(self.device.root, rid)
        except (NotFound, NotAnObject):
            return None

    # ----------------------------------------------------------- application

    def authenticate(self, username: str | None, password: bytes | None) -> str | None:
        if username is None:
            return None
        expected = self.credentials.get(username)
        if expected is None or password != expected.encode("utf-8"):
            return None
        return username

    def on_subscribe(self, session: Session, filt: str) -> int:
        rid = None if ("+" in filt or "#" in filt) else self.rid_for(filt)
        if rid is None:
            return 0  # wildcard or foreign/reply topic: broker-side routing
        node = self._node_at(rid)
        if not isinstance(node, VariableNode):
            return 0
        sinks: dict[str, object] = session.data.setdefault("pipeline_sinks", {})
        if filt in sinks:
            return 0

        def sink(payload: bytes, _topic: str = filt, _session: Session = session) -> None:
            _session.enqueue(mc.encode(mc.Publish(topic=_topic, payload=payload)))

        response = self.device.handle(
            ActionRequest(
                user=session.user, resource=rid, action=Action.ON_SUBSCRIBE, recipient=sink
            )
        )
        if not response.ok:
            return mc.SUBACK_FAILURE
        sinks[filt] = sink
        return 0

    def on_unsubscribe(self, session: Session, filt: str) -> None:
        sink = session.data.get("pipeline_sinks", {}).pop(filt, None)
        rid = self.rid_for(filt)
        if sink is not None and rid is not None:
            self.device.handle(
                ActionRequest(
                    user=session.user, resource=rid, action=Action.ON_UNSUBSCRIBE, recipient=sink
                )
            )

    def on_session_closed(self, session: Session) -> None:
        for filt in list(session.data.get("pipeline_sinks", {})):
            self.on_unsubscribe(session, filt)

    def delivers_directly(self, session: Session, topic: str) -> bool:
        return topic in session.data.get("pipeline_sinks", {})

    def may_receive(self, user: str, topic: str) -> bool:
        rid = self.rid_for(topic)
        if rid is None or self._node_at(rid) is None:
            return True  # reply and foreign topics carry their own correlation
        decision = self.device.pipeline.policy.decide(user, rid)
        return permits(decision, Action.ON_SUBSCRIBE)

    def on_publish(self, session: Session, packet: mc.Publish) -> bool:
        prefix = self.device_id + "/"
        if not packet.topic.startswith(prefix):
            return True  # plain pub/sub outside the device namespace

        if packet.topic.endswith("/invoke"):
            rid = self.rid_for(packet.topic[: -len("/invoke")])
            if rid is not None and isinstance(self._node_at(rid), FunctionNode):
                self._invoke(session, rid, packet.payload)
                return False

        rid = self.rid_for(packet.topic)
        node = self._node_at(rid) if rid is not None else None
        if isinstance(node, VariableNode):
            self._update(session, rid, packet.payload)
            return False
        # other device-namespace topics (e.g. replies) route like any other
        return True

    def _update(self, session: Session, rid: ResourceId, payload: bytes) -> None:
        try:
            fields = wire.deserialize_payload(payload)
        except wire.BadPayload as exc:
            log.warning("dropping malformed update publish for %s: %s", rid, exc)
            return
        response = self.device.handle(
            ActionRequest(user=session.user, resource=rid, action=Action.UPDATE, payload=fields)
        )
        if not response.ok:
            log.warning("update via publish failed for %s: %s", rid, response.error)

    def _invoke(self, session: Session, rid: ResourceId, payload: bytes) -> None:
        assert self.broker is not None
        base = f"{self.device_id}/{rid.render()}/result/"
        try:
            fields = wire.deserialize_payload(payload)
        except wire.BadPayload as exc:
            self.broker.publish(
                base + INVALID_NONCE_LEVEL, wire.envelope_error("bad_payload", str(exc))
            )
            return
        nonce = fields.get("nonce")
        if not isinstance(nonce, str) or not nonce or any(c in nonce for c in "/+#\u0000"):
            self.broker.publish(
                base + INVALID_NONCE_LEVEL,
                wire.envelope_error("bad_payload", "invoke payload needs a topic-safe nonce"),
            )
            return
        node = self._node_at(rid)
        declared = {name for name, _ in node.sig.args} if isinstance(node, FunctionNode) else set()
        args = dict(fields)
        if "nonce" not in declared:
            args.pop("nonce", None)
        response = self.device.handle(
            ActionRequest(user=session.user, resource=rid, action=Action.ON_INVOKE, payload=args)
        )
        self.broker.publish(base + nonce, response.to_bytes())


def serve_device_broker(
    device: DeviceService,
    device_id: str,
    credentials: dict[str, str],
    host: str = "127.0.0.1",
    port: int = 0,
) -> MqttBroker:
    """Build, wire and start a broker for a device; returns it running."""
    app = DeviceBrokerApp(device, device_id, credentials)
    broker = MqttBroker(app, host=host, port=port)
    app.attach(broker)
    broker.start()
    return broker
