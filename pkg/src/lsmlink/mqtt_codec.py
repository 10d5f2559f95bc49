"""MQTT 3.1.1 frame codec and topic matching.

Implements exactly the packet set a QoS-0 broker needs: CONNECT/CONNACK,
SUBSCRIBE/SUBACK, UNSUBSCRIBE/UNSUBACK, PUBLISH (+PUBACK so QoS-1 publishers
are not left retransmitting), PINGREQ/PINGRESP and DISCONNECT. The fixed
header carries the packet type plus flags and a remaining-length varint of
one to four 7-bit groups; strings are length-prefixed UTF-8.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

MAX_REMAINING_LENGTH = 268_435_455

CONNECT = 1
CONNACK = 2
PUBLISH = 3
PUBACK = 4
SUBSCRIBE = 8
SUBACK = 9
UNSUBSCRIBE = 10
UNSUBACK = 11
PINGREQ = 12
PINGRESP = 13
DISCONNECT = 14

CONNACK_ACCEPTED = 0
CONNACK_REFUSED_PROTOCOL = 1
CONNACK_REFUSED_IDENTIFIER = 2
CONNACK_REFUSED_UNAVAILABLE = 3
CONNACK_REFUSED_BAD_CREDENTIALS = 4
CONNACK_REFUSED_NOT_AUTHORIZED = 5

SUBACK_FAILURE = 0x80


class ProtocolError(ValueError):
    """Malformed frame or topic; the peer connection must be closed."""


# --------------------------------------------------------------- primitives


def encode_remaining_length(n: int) -> bytes:
    if not 0 <= n <= MAX_REMAINING_LENGTH:
        raise ProtocolError(f"remaining length {n} out of range")
    out = bytearray()
    while True:
        n, digit = divmod(n, 128)
        out.append(digit | (0x80 if n else 0))
        if not n:
            return bytes(out)


def decode_remaining_length(data: bytes, offset: int = 0) -> tuple[int, int]:
    """Returns (value, bytes consumed). Raises on truncation or a fifth byte."""
    value = 0
    for i in range(4):
        if offset + i >= len(data):
            raise ProtocolError("truncated remaining length")
        byte = data[offset + i]
        value |= (byte & 0x7F) << (7 * i)
        if not byte & 0x80:
            return value, i + 1
    raise ProtocolError("remaining length exceeds 4 bytes")


def _encode_string(s: str) -> bytes:
    raw = s.encode("utf-8")
    if len(raw) > 0xFFFF:
        raise ProtocolError("string exceeds 65535 bytes")
    return struct.pack(">H", len(raw)) + raw


def _encode_binary(b: bytes) -> bytes:
    if len(b) > 0xFFFF:
        raise ProtocolError("binary field exceeds 65535 bytes")
    return struct.pack(">H", len(b)) + b


class _Cursor:
    def __init__(self, data: bytes) -> None:
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise ProtocolError("truncated packet body")
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def u8(self) -> int:
        return self.take(1)[0]

    def u16(self) -> int:
        return struct.unpack(">H", self.take(2))[0]

    def string(self) -> str:
        raw = self.take(self.u16())
        try:
            return raw.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise ProtocolError(f"invalid UTF-8 string: {exc}") from None

    def binary(self) -> bytes:
        return self.take(self.u16())

    def rest(self) -> bytes:
        chunk = self.data[self.pos :]
        self.pos = len(self.data)
        return chunk

    def exhausted(self) -> bool:
        return self.pos == len(self.data)


# -------------------------------------------------------------- topic rules


def validate_topic(name: str) -> None:
    """Publish topic names carry no wildcards."""
    raw = name.encode("utf-8")
    if not 1 <= len(raw) <= 0xFFFF:
        raise ProtocolError("topic length out of range")
    if "\u0000" in name:
        raise ProtocolError("topic contains U+0000")
    if "+" in name or "#" in name:
        raise ProtocolError("publish topics may not contain wildcards")


def validate_filter(filt: str) -> None:
    raw = filt.encode("utf-8")
    if not 1 <= len(raw) <= 0xFFFF:
        raise ProtocolError("filter length out of range")
    if "\u0000" in filt:
        raise ProtocolError("filter contains U+0000")
    levels = filt.split("/")
    for i, level in enumerate(levels):
        if "#" in level:
            if level != "#" or i != len(levels) - 1:
                raise ProtocolError("'#' must be the final, whole level")
        if "+" in level and level != "+":
            raise ProtocolError("'+' must occupy a whole level")


def topic_matches(filt: str, topic: str) -> bool:
    """MQTT 3.1.1 filter semantics, including the rule that wildcard-leading
    filters never match '$'-prefixed topics."""
    f_levels = filt.split("/")
    t_levels = topic.split("/")
    if topic.startswith("$") and f_levels[0] in ("#", "+"):
        return False
    for i, fl in enumerate(f_levels):
        if fl == "#":
            return True  # also matches the parent level itself
        if i >= len(t_levels):
            return False
        if fl == "+":
            continue
        if fl != t_levels[i]:
            return False
    return len(f_levels) == len(t_levels)


# ------------------------------------------------------------------ packets


@dataclass(frozen=True)
class Connect:
    client_id: str
    username: str | None = None
    password: bytes | None = None
    keepalive: int = 60
    clean_session: bool = True
    will_topic: str | None = None
    will_payload: bytes = b""
    will_qos: int = 0
    will_retain: bool = False


@dataclass(frozen=True)
class ConnAck:
    return_code: int
    session_present: bool = False


@dataclass(frozen=True)
class Publish:
    topic: str
    payload: bytes
    retain: bool = False
    qos: int = 0
    dup: bool = False
    packet_id: int | None = None


@dataclass(frozen=True)
class PubAck:
    packet_id: int


@dataclass(frozen=True)
class Subscribe:
    packet_id: int
    topics: tuple[tuple[str, int], ...]


@dataclass(frozen=True)
class SubAck:
    packet_id: int
    return_codes: tuple[int, ...]


@dataclass(frozen=True)
class Unsubscribe:
    packet_id: int
    topics: tuple[str, ...]


@dataclass(frozen=True)
class UnsubAck:
    packet_id: int


@dataclass(frozen=True)
class PingReq:
    pass


@dataclass(frozen=True)
class PingResp:
    pass


@dataclass(frozen=True)
class Disconnect:
    pass


Packet = (
    Connect
    | ConnAck
    | Publish
    | PubAck
    | Subscribe
    | SubAck
    | Unsubscribe
    | UnsubAck
    | PingReq
    | PingResp
    | Disconnect
)


def _frame(packet_type: int, flags: int, body: bytes) -> bytes:
    return bytes([(packet_type << 4) | flags]) + encode_remaining_length(len(body)) + body


def encode(packet: Packet) -> bytes:
    if isinstance(packet, Connect):
        flags = 0x02 if packet.clean_session else 0x00
        body = _encode_string("MQTT") + bytes([4])
        payload = _encode_string(packet.client_id)
        if packet.will_topic is not None:
            flags |= 0x04 | ((packet.will_qos & 0x03) << 3)
            if packet.will_retain:
                flags |= 0x20
            payload += _encode_string(packet.will_topic) + _encode_binary(packet.will_payload)
        if packet.username is not None:
            flags |= 0x80
            payload += _encode_string(packet.username)
        if packet.password is not None:
            if packet.username is None:
                raise ProtocolError("password requires a username")
            flags |= 0x40
            payload += _encode_binary(packet.password)
        body += bytes([flags]) + struct.pack(">H", packet.keepalive) + payload
        return _frame(CONNECT, 0, body)
    if isinstance(packet, ConnAck):
        return _frame(CONNACK, 0, bytes([1 if packet.session_present else 0, packet.return_code]))
    if isinstance(packet, Publish):
        flags = (0x08 if packet.dup else 0) | ((packet.qos & 0x03) << 1) | (0x01 if packet.retain else 0)
        validate_topic(packet.topic)
        body = _encode_string(packet.topic)
        if packet.qos > 0:
            if packet.packet_id is None:
                raise ProtocolError("QoS > 0 publish needs a packet id")
            body += struct.pack(">H", packet.packet_id)
        body += packet.payload
        return _frame(PUBLISH, flags, body)
    if isinstance(packet, PubAck):
        return _frame(PUBACK, 0, struct.pack(">H", packet.packet_id))
    if isinstance(packet, Subscribe):
        if not packet.topics:
            raise ProtocolError("subscribe needs at least one filter")
        body = struct.pack(">H", packet.packet_id)
        for filt, qos in packet.topics:
            validate_filter(filt)
            body += _encode_string(filt) + bytes([qos & 0x03])
        return _frame(SUBSCRIBE, 0x02, body)
    if isinstance(packet, SubAck):
        return _frame(
            SUBACK, 0, struct.pack(">H", packet.packet_id) + bytes(packet.return_codes)
        )
    if isinstance(packet, Unsubscribe):
        if not packet.topics:
            raise ProtocolError("unsubscribe needs at least one filter")
        body = struct.pack(">H", packet.packet_id)
        for filt in packet.topics:
            validate_filter(filt)
            body += _encode_string(filt)
        return _frame(UNSUBSCRIBE, 0x02, body)
    if isinstance(packet, UnsubAck):
        return _frame(UNSUBACK, 0, struct.pack(">H", packet.packet_id))
    if isinstance(packet, PingReq):
        return _frame(PINGREQ, 0, b"")
    if isinstance(packet, PingResp):
        return _frame(PINGRESP, 0, b"")
    if isinstance(packet, Disconnect):
        return _frame(DISCONNECT, 0, b"")
    raise ProtocolError(f"cannot encode {type(packet).__name__}")


def decode_body(packet_type: int, flags: int, body: bytes) -> Packet:
    cur = _Cursor(body)
    if packet_type == CONNECT:
        protocol = cur.string()
        level = cur.u8()
        if protocol != "MQTT" or level != 4:
            raise ProtocolError(f"unsupported protocol {protocol!r} level {level}")
        connect_flags = cur.u8()
        if connect_flags & 0x01:
            raise ProtocolError("reserved connect flag set")
        keepalive = cur.u16()
        client_id = cur.string()
        will_topic = None
        will_payload = b""
        will_qos = 0
        will_retain = False
        if connect_flags & 0x04:
            will_topic = cur.string()
            will_payload = cur.binary()
            will_qos = (connect_flags >> 3) & 0x03
            will_retain = bool(connect_flags & 0x20)
        username = cur.string() if connect_flags & 0x80 else None
        password = cur.binary() if connect_flags & 0x40 else None
        if password is not None and username is None:
            raise ProtocolError("password flag without username flag")
        return Connect(
            client_id=client_id,
            username=username,
            password=password,
            keepalive=keepalive,
            clean_session=bool(connect_flags & 0x02),
            will_topic=will_topic,
            will_payload=will_payload,
            will_qos=will_qos,
            will_retain=will_retain,
        )
    if packet_type == CONNACK:
        session_present = bool(cur.u8() & 0x01)
        return ConnAck(return_code=cur.u8(), session_present=session_present)
    if packet_type == PUBLISH:
        qos = (flags >> 1) & 0x03
        if qos == 3:
            raise ProtocolError("invalid publish QoS 3")
        topic = cur.string()
        validate_topic(topic)
        packet_id = cur.u16() if qos > 0 else None
        return Publish(
            topic=topic,
            payload=cur.rest(),
            retain=bool(flags & 0x01),
            qos=qos,
            dup=bool(flags & 0x08),
            packet_id=packet_id,
        )
    if packet_type == PUBACK:
        return PubAck(packet_id=cur.u16())
    if packet_type == SUBSCRIBE:
        if flags != 0x02:
            raise ProtocolError("subscribe flags must be 0b0010")
        packet_id = cur.u16()
        topics = []
        while not cur.exhausted():
            filt = cur.string()
            validate_filter(filt)
            qos = cur.u8()
            if qos > 2:
                raise ProtocolError("requested QoS out of range")
            topics.append((filt, qos))
        if not topics:
            raise ProtocolError("subscribe without filters")
        return Subscribe(packet_id=packet_id, topics=tuple(topics))
    if packet_type == SUBACK:
        packet_id = cur.u16()
        return SubAck(packet_id=packet_id, return_codes=tuple(cur.rest()))
    if packet_type == UNSUBSCRIBE:
        if flags != 0x02:
            raise ProtocolError("unsubscribe flags must be 0b0010")
        packet_id = cur.u16()
        topics = []
        while not cur.exhausted():
            filt = cur.string()
            validate_filter(filt)
            topics.append(filt)
        if not topics:
            raise ProtocolError("unsubscribe without filters")
        return Unsubscribe(packet_id=packet_id, topics=tuple(topics))
    if packet_type == UNSUBACK:
        return UnsubAck(packet_id=cur.u16())
    if packet_type == PINGREQ:
        return PingReq()
    if packet_type == PINGRESP:
        return PingResp()
    if packet_type == DISCONNECT:
        return Disconnect()
    raise ProtocolError(f"unknown packet type {packet_type}")


def decode(data: bytes) -> tuple[Packet, int]:
    """Decode one packet from the head of ``data``; returns (packet, consumed)."""
    if not data:
        raise ProtocolError("empty buffer")
    packet_type = data[0] >> 4
    flags = data[0] & 0x0F
    length, header = decode_remaining_length(data, 1)
    end = 1 + header + length
    if len(data) < end:
        raise ProtocolError("truncated packet")
    return decode_body(packet_type, flags, data[1 + header : end]), end


class FrameReader:
    """Blocking reader turning a socket into a packet iterator."""

    def __init__(self, sock) -> None:
        self._sock = sock
        self._buffer = b""

    def _fill(self, n: int) -> bool:
        while len(self._buffer) < n:
            chunk = self._sock.recv(4096)
            if not chunk:
                return False
            self._buffer += chunk
        return True

    def read_packet(self) -> Packet | None:
        """Next packet, or None on orderly EOF at a frame boundary."""
        if not self._fill(2):
            if self._buffer:
                raise ProtocolError("connection closed mid-frame")
            return None
        header = 1
        while True:
            if header > 4:
                raise ProtocolError("remaining length exceeds 4 bytes")
            if not self._fill(1 + header):
                raise ProtocolError("connection closed mid-frame")
            if not self._buffer[header] & 0x80:
                break
            header += 1
        length, _ = decode_remaining_length(self._buffer, 1)
        if not self._fill(1 + header + length):
            raise ProtocolError("connection closed mid-frame")
        packet, consumed = decode(self._buffer)
        self._buffer = self._buffer[consumed:]
        return packet
