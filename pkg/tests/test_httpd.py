from __future__ import annotations

import http.client
import json

import pytest

from lsmlink.httpd import HttpAdapter

from conftest import activate

TOKENS = {"t-ops": "ops", "t-viewer": "viewer", "t-intruder": "intruder"}


@pytest.fixture
def server(tracker_device):
    adapter = HttpAdapter(tracker_device, TOKENS)
    adapter.start()
    yield adapter
    adapter.stop()


def request(server, method, path, body=None, token="t-ops", headers=True):
    conn = http.client.HTTPConnection("127.0.0.1", server.port, timeout=5)
    hdrs = {"Authorization": f"Bearer {token}"} if headers else {}
    conn.request(method, path, body=body, headers=hdrs)
    resp = conn.getresponse()
    data = resp.read()
    conn.close()
    return resp.status, data


def test_get_position_variable(server, tracker_device):
    activate(tracker_device, "smr1")
    status, data = request(server, "GET", "/api/v1/lsm/entities/smr1/position")
    assert status == 200
    doc = json.loads(data)
    assert len(doc["value"]) == 3
    assert "cov" in doc["meta"] and len(doc["meta"]["cov"]) == 3


def test_post_trigger(server, tracker_device):
    activate(tracker_device, "smr1")
    status, data = request(
        server,
        "POST",
        "/api/v1/lsm/entities/smr1/trigger",
        body=json.dumps({"count": 3, "nonce": "a"}),
    )
    assert status == 200
    assert json.loads(data)["meta"]["nonce"] == "a"


def test_put_forbidden_for_viewer(server):
    status, data = request(
        server,
        "PUT",
        "/api/v1/lsm/entities/smr1/name",
        body=json.dumps({"value": "A"}),
        token="t-viewer",
    )
    assert status == 403
    assert json.loads(data)["error"]["code"] == "forbidden"


def test_put_updates_writable_variable(server):
    status, data = request(
        server, "PUT", "/api/v1/lsm/entities/smr1/name", body=json.dumps({"value": "alpha"})
    )
    assert status == 200
    status, data = request(server, "GET", "/api/v1/lsm/entities/smr1/name")
    assert json.loads(data)["value"] == "alpha"


def test_browse_root_lists_generic_device(server):
    status, data = request(server, "GET", "/api/v1/")
    assert status == 200
    doc = json.loads(data)
    names = [c["name"] for c in doc["children"]]
    assert "lsm" in names and "manufacturer" in names and "shutdown" in names
    lsm = next(c for c in doc["children"] if c["name"] == "lsm")
    assert lsm["href"] == "/api/v1/lsm"


def test_browse_lsm_children(server):
    status, data = request(server, "GET", "/api/v1/lsm")
    assert status == 200
    assert [c["name"] for c in json.loads(data)["children"]] == [
        "bases",
        "calibration",
        "entities",
        "reset",
    ]


def test_browse_function_signature(server):
    status, data = request(server, "GET", "/api/v1/lsm/entities/smr1/trigger")
    assert status == 200
    doc = json.loads(data)
    assert doc["kind"] == "function"
    assert doc["args"] == [
        {"kind": "int64", "name": "count"},
        {"kind": "text", "name": "nonce"},
    ]


def test_unknown_token_401(server):
    status, data = request(server, "GET", "/api/v1/manufacturer", token="bogus")
    assert status == 401
    assert json.loads(data)["error"]["code"] == "unauthorized"
    status, _ = request(server, "GET", "/api/v1/manufacturer", headers=False)
    assert status == 401


def test_not_found_404(server):
    status, data = request(server, "GET", "/api/v1/lsm/entities/ghost/position")
    assert status == 404
    status, _ = request(server, "GET", "/elsewhere")
    assert status == 404
    status, _ = request(server, "GET", "/api/v1/Not-Valid!")
    assert status == 404


def test_post_to_variable_405(server):
    status, data = request(
        server, "POST", "/api/v1/lsm/entities/smr1/name", body=json.dumps({"value": "x"})
    )
    assert status == 405
    assert json.loads(data)["error"]["code"] == "invalid_action"


def test_bad_json_400(server):
    status, data = request(server, "PUT", "/api/v1/lsm/entities/smr1/name", body="{nope")
    assert status == 400
    assert json.loads(data)["error"]["code"] == "bad_payload"


def test_internal_error_becomes_500_envelope(server, tracker_device):
    tracker_device.backend.displace("smr2", (1.0, 0.0, 0.0))
    status, data = request(
        server,
        "POST",
        "/api/v1/lsm/entities/smr2/activate",
        body=json.dumps({"active": True}),
    )
    assert status == 500
    doc = json.loads(data)
    assert doc["error"] == {"code": "internal", "message": "search failed"}


def test_delete_entity_lifecycle(server, tracker_device):
    status, _ = request(
        server,
        "POST",
        "/api/v1/lsm/entities",
        body=json.dumps({"name": "smr9", "position": [0.1, 0.2, 0.3]}),
    )
    assert status == 200
    status, data = request(server, "GET", "/api/v1/lsm/entities/smr9/state")
    assert status == 200 and json.loads(data)["value"] == "INACTIVE"
    status, _ = request(server, "DELETE", "/api/v1/lsm/entities/smr9")
    assert status == 200
    status, _ = request(server, "GET", "/api/v1/lsm/entities/smr9/state")
    assert status == 404


def test_get_body_is_canonical_bytes(server, tracker_device):
    _, first = request(server, "GET", "/api/v1/lsm/entities/smr1/name")
    _, second = request(server, "GET", "/api/v1/lsm/entities/smr1/name")
    assert first == second
    assert b" " not in first
