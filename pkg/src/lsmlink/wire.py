"""Canonical JSON wire format shared by every adapter.

One serializer produces every byte that leaves the device, so the HTTP body
for a variable and its retained MQTT payload are identical by construction:
object keys sorted, no insignificant whitespace, floats in shortest
round-trip form, non-finite numbers rejected.
"""

from __future__ import annotations

import json
from typing import Mapping

from .resources import Metadata, Value


class BadPayload(ValueError):
    """Inbound bytes that are not valid payload JSON."""


def canonical_json(obj: object) -> bytes:
    return json.dumps(
        obj, sort_keys=True, separators=(",", ":"), allow_nan=False, ensure_ascii=True
    ).encode("ascii")


def meta_to_json(meta: Metadata) -> dict:
    doc: dict = {"nonce": meta.nonce, "ts": meta.ts}
    if meta.cov is not None:
        doc["cov"] = meta.cov
    return doc


def envelope_result(values: Mapping[str, Value], meta: Metadata) -> bytes:
    """Result envelope. A single ``value`` entry is unwrapped to keep variable
    envelopes flat; anything else (including an empty ack) stays a named map."""
    if set(values) == {"value"}:
        body: object = values["value"].to_json()
    else:
        body = {name: v.to_json() for name, v in values.items()}
    return canonical_json({"value": body, "meta": meta_to_json(meta)})


def envelope_value(value: Value, meta: Metadata) -> bytes:
    return envelope_result({"value": value}, meta)


def envelope_error(code: str, message: str) -> bytes:
    return canonical_json({"error": {"code": code, "message": message}})


def deserialize_payload(data: bytes | str) -> dict[str, object]:
    """Parse request payload bytes into a named map of untyped JSON values.
    Kind binding against the target's declaration happens at dispatch."""
    if isinstance(data, bytes):
        try:
            data = data.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise BadPayload(f"payload is not UTF-8: {exc}") from exc
    if not data.strip():
        return {}
    try:
        doc = json.loads(data)
    except json.JSONDecodeError as exc:
        raise BadPayload(f"payload is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise BadPayload("payload must be a JSON object")
    return doc


def parse_envelope(data: bytes | str) -> dict:
    """Parse an envelope produced by :func:`envelope_result`/``envelope_error``."""
    doc = deserialize_payload(data)
    if "error" in doc:
        err = doc["error"]
        if not isinstance(err, dict) or not {"code", "message"} <= set(err):
            raise BadPayload("malformed error envelope")
    elif not {"value", "meta"} <= set(doc):
        raise BadPayload("envelope needs value+meta or error")
    return doc


def is_error_envelope(doc: Mapping[str, object]) -> bool:
    return "error" in doc
