"""HTTP/REST adapter.

URL-structured identifiers under ``/api/v1/`` map straight onto pipeline
actions: GET reads a variable or browses an object/function model, PUT
updates, POST invokes a function or creates a child, DELETE removes. Users
authenticate with bearer tokens from the configured token table. Response
bodies are always canonical envelopes (or browse documents), so a variable's
GET body is byte-identical to its published MQTT payload.
"""

from __future__ import annotations

import logging
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from urllib.parse import urlsplit

from . import wire
from .device import DeviceService
from .pipeline import Action, ActionRequest, AuthzDecision
from .resources import (
    FunctionNode,
    MalformedId,
    NotAnObject,
    NotFound,
    ObjectNode,
    ResourceId,
    VariableNode,
    browse,
    resolve,
)

log = logging.getLogger(__name__)

API_PREFIX = "/api/v1"

STATUS_BY_CODE = {
    "bad_payload": 400,
    "unauthorized": 401,
    "forbidden": 403,
    "not_found": 404,
    "invalid_action": 405,
    "internal": 500,
}


class HttpAdapter:
    """Threaded HTTP/1.1 server bound to one device."""

    def __init__(
        self,
        device: DeviceService,
        tokens: dict[str, str],
        host: str = "127.0.0.1",
        port: int = 0,
    ) -> None:
        self.device = device
        self.tokens = dict(tokens)
        adapter = self

        class Handler(BaseHTTPRequestHandler):
            protocol_version = "HTTP/1.1"
            server_version = "lsmlink"

            def log_message(self, fmt, *args):  # keep request noise out of stderr
                log.debug("http %s", fmt % args)

            def _reply(self, status: int, body: bytes) -> None:
                self.send_response(status)
                self.send_header("Content-Type", "application/json")
                self.send_header("Content-Length", str(len(body)))
                self.end_headers()
                self.wfile.write(body)

            def _handle(self, method: str) -> None:
                try:
                    length = int(self.headers.get("Content-Length") or 0)
                    body = self.rfile.read(length) if length else b""
                    status, payload = adapter.handle_request(
                        method, self.path, dict(self.headers), body
                    )
                except Exception as exc:  # adapter bug: still answer with an envelope
                    log.exception("http handler failure")
                    status, payload = 500, wire.envelope_error("internal", str(exc))
                self._reply(status, payload)

            def do_GET(self):
                self._handle("GET")

            def do_PUT(self):
                self._handle("PUT")

            def do_POST(self):
                self._handle("POST")

            def do_DELETE(self):
                self._handle("DELETE")

        self._server = ThreadingHTTPServer((host, port), Handler)
        self._server.daemon_threads = True
        self._thread: threading.Thread | None = None

    @property
    def port(self) -> int:
        return self._server.server_address[1]

    def start(self) -> None:
        self._thread = threading.Thread(
            target=lambda: self._server.serve_forever(poll_interval=0.05),
            name="http-adapter",
            daemon=True,
        )
        self._thread.start()

    def stop(self) -> None:
        self._server.shutdown()
        self._server.server_close()
        if self._thread is not None:
            self._thread.join(timeout=5)

    # ------------------------------------------------------------- requests

    def handle_request(
        self, method: str, path: str, headers: dict[str, str], body: bytes
    ) -> tuple[int, bytes]:
        user = self._authenticate(headers)
        if user is None:
            return 401, wire.envelope_error("unauthorized", "missing or unknown bearer token")

        parsed = urlsplit(path)
        route = parsed.path
        if route != API_PREFIX and not route.startswith(API_PREFIX + "/"):
            return 404, wire.envelope_error("not_found", f"unknown path {route!r}")
        suffix = route[len(API_PREFIX) :].strip("/")

        if not suffix:
            if method == "GET":
                return self._browse(user, None)
            return 405, wire.envelope_error("invalid_action", "the root only supports GET")

        try:
            rid = ResourceId.parse(suffix)
        except MalformedId as exc:
            return 404, wire.envelope_error("not_found", str(exc))

        if method == "GET":
            return self._get(user, rid)
        if method == "PUT":
            return self._dispatch(user, rid, Action.UPDATE, body)
        if method == "POST":
            return self._post(user, rid, body)
        if method == "DELETE":
            return self._dispatch(user, rid, Action.DELETE, b"")
        return 405, wire.envelope_error("invalid_action", f"unsupported method {method}")

    def _authenticate(self, headers: dict[str, str]) -> str | None:
        auth = next((v for k, v in headers.items() if k.lower() == "authorization"), "")
        if not auth.startswith("Bearer "):
            return None
        return self.tokens.get(auth[len("Bearer ") :].strip())

    def _get(self, user: str, rid: ResourceId) -> tuple[int, bytes]:
        try:
            node = resolve(self.device.root, rid)
        except (NotFound, NotAnObject):
            return 404, wire.envelope_error("not_found", f"no resource at {rid}")
        if isinstance(node, VariableNode):
            return self._dispatch(user, rid, Action.READ, b"")
        return self._browse(user, rid)

    def _post(self, user: str, rid: ResourceId, body: bytes) -> tuple[int, bytes]:
        try:
            node = resolve(self.device.root, rid)
        except (NotFound, NotAnObject):
            return 404, wire.envelope_error("not_found", f"no resource at {rid}")
        if isinstance(node, FunctionNode):
            return self._dispatch(user, rid, Action.ON_INVOKE, body)
        if isinstance(node, ObjectNode):
            return self._dispatch(user, rid, Action.CREATE, body)
        # CRUD stays unambiguous: writes to variables use PUT, never POST
        return 405, wire.envelope_error("invalid_action", "POST is not defined for variables")

    def _dispatch(self, user: str, rid: ResourceId, action: Action, body: bytes) -> tuple[int, bytes]:
        try:
            payload = wire.deserialize_payload(body)
        except wire.BadPayload as exc:
            return 400, wire.envelope_error("bad_payload", str(exc))
        response = self.device.handle(
            ActionRequest(user=user, resource=rid, action=action, payload=payload)
        )
        if response.ok:
            return 200, response.to_bytes()
        return STATUS_BY_CODE.get(response.error[0], 500), response.to_bytes()

    def _browse(self, user: str, rid: ResourceId | None) -> tuple[int, bytes]:
        # Model browsing reveals structure, not values; any authenticated user
        # may list the root, below that the resource's own decision applies.
        if rid is not None:
            decision = self.device.pipeline.policy.decide(user, rid)
            if decision is AuthzDecision.DENY:
                return 403, wire.envelope_error("forbidden", "browsing denied")
        node = self.device.root if rid is None else resolve(self.device.root, rid)
        doc = browse(node)
        if isinstance(node, ObjectNode):
            prefix = API_PREFIX if rid is None else f"{API_PREFIX}/{rid}"
            for child in doc["children"]:
                child["href"] = f"{prefix}/{child['name']}"
        return 200, wire.canonical_json(doc)
