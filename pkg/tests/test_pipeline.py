from __future__ import annotations

import itertools
import json

import pytest

from lsmlink import wire
from lsmlink.pipeline import (
    ALLOWED_ACTIONS,
    Action,
    ActionRequest,
    AuthzDecision,
    Metadata,
    NonceSource,
    Pipeline,
    Policy,
    SimClock,
    SubscriptionRegistry,
    authorize,
)
from lsmlink.resources import (
    FunctionNode,
    FunctionSig,
    NodeKind,
    ObjectNode,
    ResourceId,
    Value,
    ValueKind,
    VariableNode,
    parse_resource_id,
)

POLICY = Policy.parse(
    "\n".join(
        [
            "ops:allow:**",
            "viewer:readonly:lsm/**",
            "viewer:allow:lsm/entities/smr1/trigger",
            "mixed:deny:**",
            "mixed:allow:lsm/entities/**",
            "mixed:deny:lsm/entities/smr2/**",
        ]
    )
)


def build_pipeline():
    root = ObjectNode()
    calls = {"invoked": 0, "created": 0, "deleted": 0}

    def fn_handler(args):
        calls["invoked"] += 1
        return {}

    def create_handler(payload):
        calls["created"] += 1
        return {}

    lsm = root.add("lsm", ObjectNode())
    entities = lsm.add("entities", ObjectNode(create=create_handler))
    smr1 = entities.add("smr1", ObjectNode())

    def delete_handler():
        calls["deleted"] += 1
        del entities.children["smr1"]
        return {}

    smr1.delete = delete_handler
    smr1.add(
        "name",
        VariableNode(ValueKind.TEXT, True, Value.text("smr1"), Metadata(ts=0, nonce="n0")),
    )
    smr1.add(
        "position",
        VariableNode(
            ValueKind.VECTOR3, False, Value.vector((0.0, 0.0, 0.0)), Metadata(ts=0, nonce="n0")
        ),
    )
    smr1.add(
        "trigger",
        FunctionNode(
            FunctionSig(args=(("count", ValueKind.INT64), ("nonce", ValueKind.TEXT))), fn_handler
        ),
    )
    pipeline = Pipeline(
        root, POLICY, SubscriptionRegistry(), clock=SimClock(), nonces=NonceSource(0)
    )
    return pipeline, calls


def req(path, action, user="ops", payload=None, recipient=None):
    return ActionRequest(
        user=user,
        resource=parse_resource_id(path),
        action=action,
        payload=payload or {},
        recipient=recipient,
    )


class TestDispatchBasics:
    def test_read_variable(self):
        pipeline, _ = build_pipeline()
        resp = pipeline.dispatch(req("lsm/entities/smr1/name", Action.READ))
        assert resp.ok and resp.result["value"].raw == "smr1"

    def test_not_found(self):
        pipeline, _ = build_pipeline()
        resp = pipeline.dispatch(req("lsm/entities/nope", Action.READ))
        assert resp.error[0] == "not_found"

    def test_descend_through_variable_is_not_found(self):
        pipeline, _ = build_pipeline()
        resp = pipeline.dispatch(req("lsm/entities/smr1/name/extra", Action.READ))
        assert resp.error[0] == "not_found"

    def test_forbidden_update_for_readonly_user(self):
        pipeline, _ = build_pipeline()
        resp = pipeline.dispatch(
            req("lsm/entities/smr1/name", Action.UPDATE, user="viewer", payload={"value": "A"})
        )
        assert resp.error[0] == "forbidden"

    def test_read_only_variable_update_forbidden(self):
        pipeline, _ = build_pipeline()
        resp = pipeline.dispatch(
            req("lsm/entities/smr1/position", Action.UPDATE, payload={"value": [1.0, 2.0, 3.0]})
        )
        assert resp.error[0] == "forbidden"

    def test_invalid_action_on_function(self):
        pipeline, _ = build_pipeline()
        resp = pipeline.dispatch(req("lsm/entities/smr1/trigger", Action.READ))
        assert resp.error[0] == "invalid_action"

    def test_update_kind_mismatch_is_bad_payload(self):
        pipeline, _ = build_pipeline()
        resp = pipeline.dispatch(
            req("lsm/entities/smr1/name", Action.UPDATE, payload={"value": 42})
        )
        assert resp.error[0] == "bad_payload"

    def test_payload_free_actions_reject_payload(self):
        pipeline, _ = build_pipeline()
        resp = pipeline.dispatch(
            req("lsm/entities/smr1/name", Action.READ, payload={"value": "x"})
        )
        assert resp.error[0] == "bad_payload"

    def test_handler_exception_becomes_internal_error_envelope(self):
        pipeline, _ = build_pipeline()
        node = pipeline.root.children["lsm"].children["entities"].children["smr1"]
        node.add(
            "boom",
            FunctionNode(FunctionSig(), lambda args: (_ for _ in ()).throw(RuntimeError("kaput"))),
        )
        resp = pipeline.dispatch(req("lsm/entities/smr1/boom", Action.ON_INVOKE))
        assert resp.error[0] == "internal"
        doc = json.loads(resp.to_bytes())
        assert doc["error"]["code"] == "internal"

    def test_invoke_argument_validation(self):
        pipeline, calls = build_pipeline()
        ok = pipeline.dispatch(
            req("lsm/entities/smr1/trigger", Action.ON_INVOKE, payload={"count": 2, "nonce": "a"})
        )
        assert ok.ok and calls["invoked"] == 1
        missing = pipeline.dispatch(
            req("lsm/entities/smr1/trigger", Action.ON_INVOKE, payload={"count": 2})
        )
        assert missing.error[0] == "bad_payload"
        extra = pipeline.dispatch(
            req(
                "lsm/entities/smr1/trigger",
                Action.ON_INVOKE,
                payload={"count": 2, "nonce": "a", "bogus": 1},
            )
        )
        assert extra.error[0] == "bad_payload"
        wrong = pipeline.dispatch(
            req("lsm/entities/smr1/trigger", Action.ON_INVOKE, payload={"count": "2", "nonce": "a"})
        )
        assert wrong.error[0] == "bad_payload"
        assert calls["invoked"] == 1

    def test_nonce_echoed_into_ack_meta(self):
        pipeline, _ = build_pipeline()
        resp = pipeline.dispatch(
            req("lsm/entities/smr1/trigger", Action.ON_INVOKE, payload={"count": 1, "nonce": "t42"})
        )
        assert resp.meta.nonce == "t42"

    def test_create_and_delete_handlers(self):
        pipeline, calls = build_pipeline()
        resp = pipeline.dispatch(
            req("lsm/entities", Action.CREATE, payload={"name": "smr9"})
        )
        assert resp.ok and calls["created"] == 1
        resp = pipeline.dispatch(req("lsm/entities/smr1", Action.DELETE))
        assert resp.ok and calls["deleted"] == 1
        assert pipeline.dispatch(req("lsm/entities/smr1", Action.READ)).error[0] == "not_found"

    def test_create_without_handler_is_forbidden(self):
        pipeline, _ = build_pipeline()
        resp = pipeline.dispatch(req("lsm/entities/smr1", Action.CREATE, payload={"x": 1}))
        assert resp.error[0] == "forbidden"


class TestActionMatrix:
    def test_every_pair_follows_the_table(self):
        pipeline, _ = build_pipeline()
        paths = {
            NodeKind.VARIABLE: "lsm/entities/smr1/name",
            NodeKind.OBJECT: "lsm/entities/smr1",
            NodeKind.FUNCTION: "lsm/entities/smr1/trigger",
        }
        # allowed object actions need the node that actually carries the handler
        special_paths = {(NodeKind.OBJECT, Action.CREATE): "lsm/entities"}
        payloads = {
            Action.UPDATE: {"value": "renamed"},
            Action.NOTIFY: {"value": "poked"},
            Action.CREATE: {"name": "x"},
            Action.ON_INVOKE: {"count": 1, "nonce": "n"},
        }
        sink = lambda data: None
        for kind, action in itertools.product(NodeKind, Action):
            # DELETE on the object removes it; rebuild each round for isolation
            pipeline, _ = build_pipeline()
            resp = pipeline.dispatch(
                req(
                    special_paths.get((kind, action), paths[kind]),
                    action,
                    payload=payloads.get(action, {}),
                    recipient=sink,
                )
            )
            if action in ALLOWED_ACTIONS[kind]:
                assert resp.ok, (kind, action, resp.error)
            else:
                assert resp.error[0] == "invalid_action", (kind, action, resp.error)


class TestAuthorization:
    def test_allow_all_rule(self):
        rid = parse_resource_id("anything/at/all")
        assert authorize("ops", rid, Action.ON_INVOKE, POLICY) is AuthzDecision.ALLOW

    def test_readonly_prefix_permits_read(self):
        pipeline, _ = build_pipeline()
        resp = pipeline.dispatch(req("lsm/entities/smr1/name", Action.READ, user="viewer"))
        assert resp.ok

    def test_unknown_user_denied(self):
        rid = parse_resource_id("lsm/entities/smr1/name")
        assert authorize("nobody", rid, Action.READ, POLICY) is AuthzDecision.DENY

    def test_longest_prefix_wins(self):
        assert (
            authorize("mixed", parse_resource_id("lsm/reset"), Action.READ, POLICY)
            is AuthzDecision.DENY
        )
        assert (
            authorize("mixed", parse_resource_id("lsm/entities/smr1/name"), Action.READ, POLICY)
            is AuthzDecision.ALLOW
        )
        assert (
            authorize("mixed", parse_resource_id("lsm/entities/smr2/name"), Action.READ, POLICY)
            is AuthzDecision.DENY
        )

    def test_exact_rule_beats_prefix(self):
        decision = authorize(
            "viewer", parse_resource_id("lsm/entities/smr1/trigger"), Action.ON_INVOKE, POLICY
        )
        assert decision is AuthzDecision.ALLOW

    def test_deny_produces_no_side_effects(self):
        pipeline, calls = build_pipeline()
        resp = pipeline.dispatch(
            req(
                "lsm/entities/smr1/trigger",
                Action.ON_INVOKE,
                user="nobody",
                payload={"count": 1, "nonce": "n"},
            )
        )
        assert resp.error[0] == "forbidden"
        assert calls["invoked"] == 0

    def test_policy_parse_errors(self):
        with pytest.raises(ValueError):
            Policy.parse("ops=allow=**")
        with pytest.raises(ValueError):
            Policy.parse("ops:sometimes:**")


class TestSubscriptions:
    def test_single_event_fan_out(self):
        pipeline, _ = build_pipeline()
        rid = parse_resource_id("lsm/entities/smr1/name")
        got = []
        sink = got.append
        assert pipeline.dispatch(req(rid.render(), Action.ON_SUBSCRIBE, recipient=sink)).ok
        pipeline.dispatch(req(rid.render(), Action.UPDATE, payload={"value": "A"}))
        assert len(got) == 1
        assert json.loads(got[0])["value"] == "A"

    def test_duplicate_subscribe_is_set_semantics(self):
        pipeline, _ = build_pipeline()
        rid = parse_resource_id("lsm/entities/smr1/name")
        got = []
        sink = got.append
        pipeline.dispatch(req(rid.render(), Action.ON_SUBSCRIBE, recipient=sink))
        pipeline.dispatch(req(rid.render(), Action.ON_SUBSCRIBE, recipient=sink))
        pipeline.dispatch(req(rid.render(), Action.UPDATE, payload={"value": "B"}))
        assert len(got) == 1

    def test_unsubscribe_unknown_is_noop(self):
        pipeline, _ = build_pipeline()
        rid = parse_resource_id("lsm/entities/smr1/name")
        resp = pipeline.dispatch(req(rid.render(), Action.ON_UNSUBSCRIBE, recipient=lambda b: None))
        assert resp.ok

    def test_subscribe_non_variable_is_invalid_action(self):
        pipeline, _ = build_pipeline()
        resp = pipeline.dispatch(
            req("lsm/entities/smr1", Action.ON_SUBSCRIBE, recipient=lambda b: None)
        )
        assert resp.error[0] == "invalid_action"

    def test_fan_out_exactness_after_churn(self):
        registry = SubscriptionRegistry()
        rid = parse_resource_id("lsm/entities/smr1/position")
        sinks = [list() for _ in range(8)]
        recipients = [s.append for s in sinks]
        for r in recipients:
            registry.subscribe(rid, r)
        for r in recipients[:3]:
            registry.unsubscribe(rid, r)
        count = registry.notify(
            rid, Value.vector((1.0, 2.0, 3.0)), Metadata(ts=1, nonce="n")
        )
        assert count == 5
        assert sum(len(s) for s in sinks) == 5

    def test_failed_sink_counted_then_dropped(self):
        registry = SubscriptionRegistry()
        rid = parse_resource_id("lsm/entities/smr1/position")
        good: list[bytes] = []

        def bad(data: bytes) -> None:
            raise IOError("sink gone")

        registry.subscribe(rid, good.append)
        registry.subscribe(rid, bad)
        first = registry.notify(rid, Value.vector((0.0, 0.0, 0.0)), Metadata(ts=1, nonce="a"))
        assert first == 2
        second = registry.notify(rid, Value.vector((0.0, 0.0, 1.0)), Metadata(ts=2, nonce="b"))
        assert second == 1
        assert len(good) == 2

    def test_zero_subscribers_zero_count(self):
        registry = SubscriptionRegistry()
        rid = parse_resource_id("x")
        assert registry.notify(rid, Value.text("v"), Metadata(ts=0, nonce="n")) == 0


class TestMetadata:
    def test_update_timestamps_non_decreasing(self):
        pipeline, _ = build_pipeline()
        rid = "lsm/entities/smr1/name"
        stamps = []
        for text in ("a", "b", "c"):
            resp = pipeline.dispatch(req(rid, Action.UPDATE, payload={"value": text}))
            stamps.append(resp.meta.ts)
        assert stamps == sorted(stamps)

    def test_fresh_nonces_are_seeded_and_unique(self):
        a, b = NonceSource(42), NonceSource(42)
        seq_a = [a.fresh() for _ in range(5)]
        seq_b = [b.fresh() for _ in range(5)]
        assert seq_a == seq_b
        assert len(set(seq_a)) == 5

    def test_error_responses_always_serializable(self):
        pipeline, _ = build_pipeline()
        for path, action in [
            ("nope", Action.READ),
            ("lsm/entities/smr1/trigger", Action.READ),
            ("lsm/entities/smr1/name", Action.UPDATE),
        ]:
            resp = pipeline.dispatch(req(path, action))
            assert not resp.ok
            doc = json.loads(resp.to_bytes())
            assert set(doc) == {"error"} and set(doc["error"]) == {"code", "message"}
