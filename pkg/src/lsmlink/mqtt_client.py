"""Minimal blocking MQTT 3.1.1 client (QoS 0) for the CLI, bridge and tests."""

from __future__ import annotations

import itertools
import queue
import socket
import threading

from . import mqtt_codec as mc


class MqttError(RuntimeError):
    pass


class ConnectionRefused(MqttError):
    def __init__(self, return_code: int) -> None:
        super().__init__(f"connection refused, return code {return_code}")
        self.return_code = return_code


class MqttClient:
    """One connection with a background reader; inbound publishes land in a
    queue of (topic, payload, retain) tuples."""

    def __init__(
        self,
        host: str,
        port: int,
        client_id: str = "",
        username: str | None = None,
        password: str | None = None,
        timeout: float = 5.0,
    ) -> None:
        self.host = host
        self.port = port
        self.client_id = client_id
        self.username = username
        self.password = password
        self.timeout = timeout
        self.messages: "queue.Queue[tuple[str, bytes, bool]]" = queue.Queue()
        self._acks: "queue.Queue[mc.Packet]" = queue.Queue()
        self._packet_ids = itertools.count(1)
        self._sock: socket.socket | None = None
        self._reader: threading.Thread | None = None
        self._send_lock = threading.Lock()
        self._closed = threading.Event()

    # ------------------------------------------------------------- lifecycle

    def connect(self) -> None:
        sock = socket.create_connection((self.host, self.port), timeout=self.timeout)
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        self._sock = sock
        self._send(
            mc.Connect(
                client_id=self.client_id,
                username=self.username,
                password=None if self.password is None else self.password.encode("utf-8"),
            )
        )
        reader = mc.FrameReader(sock)
        ack = reader.read_packet()
        if not isinstance(ack, mc.ConnAck):
            raise MqttError(f"expected CONNACK, got {type(ack).__name__}")
        if ack.return_code != mc.CONNACK_ACCEPTED:
            raise ConnectionRefused(ack.return_code)
        self._reader = threading.Thread(
            target=self._read_loop, args=(reader,), name="mqtt-client", daemon=True
        )
        self._reader.start()

    def close(self) -> None:
        if self._sock is None:
            return
        try:
            self._send(mc.Disconnect())
        except MqttError:
            pass
        self._closed.set()
        try:
            self._sock.close()
        except OSError:
            pass
        if self._reader is not None:
            self._reader.join(timeout=2)

    def __enter__(self) -> "MqttClient":
        self.connect()
        return self

    def __exit__(self, *exc) -> None:
        self.close()

    # ------------------------------------------------------------ operations

    def subscribe(self, *filters: str) -> tuple[int, ...]:
        packet_id = next(self._packet_ids)
        self._send(mc.Subscribe(packet_id=packet_id, topics=tuple((f, 0) for f in filters)))
        ack = self._await_ack(mc.SubAck)
        return ack.return_codes

    def unsubscribe(self, *filters: str) -> None:
        packet_id = next(self._packet_ids)
        self._send(mc.Unsubscribe(packet_id=packet_id, topics=tuple(filters)))
        self._await_ack(mc.UnsubAck)

    def publish(self, topic: str, payload: bytes, retain: bool = False) -> None:
        self._send(mc.Publish(topic=topic, payload=payload, retain=retain))

    def ping(self) -> None:
        self._send(mc.PingReq())
        self._await_ack(mc.PingResp)

    def next_message(self, timeout: float | None = None) -> tuple[str, bytes, bool]:
        try:
            return self.messages.get(timeout=self.timeout if timeout is None else timeout)
        except queue.Empty:
            raise MqttError("timed out waiting for a publish") from None

    def expect(self, topic: str, timeout: float | None = None) -> bytes:
        """Next payload on exactly ``topic``; other messages stay interleaved."""
        deadline = (self.timeout if timeout is None else timeout) + _now()
        while True:
            remaining = deadline - _now()
            if remaining <= 0:
                raise MqttError(f"timed out waiting for {topic!r}")
            got_topic, payload, _ = self.next_message(timeout=remaining)
            if got_topic == topic:
                return payload

    # -------------------------------------------------------------- plumbing

    def _send(self, packet: mc.Packet) -> None:
        if self._sock is None:
            raise MqttError("not connected")
        data = mc.encode(packet)
        with self._send_lock:
            try:
                self._sock.sendall(data)
            except OSError as exc:
                raise MqttError(f"send failed: {exc}") from exc

    def _await_ack(self, kind: type) -> mc.Packet:
        try:
            packet = self._acks.get(timeout=self.timeout)
        except queue.Empty:
            raise MqttError(f"timed out waiting for {kind.__name__}") from None
        if not isinstance(packet, kind):
            raise MqttError(f"expected {kind.__name__}, got {type(packet).__name__}")
        return packet

    def _read_loop(self, reader: mc.FrameReader) -> None:
        try:
            while True:
                packet = reader.read_packet()
                if packet is None:
                    return
                if isinstance(packet, mc.Publish):
                    self.messages.put((packet.topic, packet.payload, packet.retain))
                elif isinstance(packet, (mc.SubAck, mc.UnsubAck, mc.PingResp)):
                    self._acks.put(packet)
        except (mc.ProtocolError, OSError):
            if not self._closed.is_set():
                return


def _now() -> float:
    import time

    return time.monotonic()
