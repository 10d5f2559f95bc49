from __future__ import annotations

import json

import pytest

from lsmlink.config import InvalidConfig, parse_config

from conftest import mlat_config_doc, tracker_config_doc


def test_round_trip_is_identity():
    cfg = parse_config(json.dumps(tracker_config_doc()))
    rendered = cfg.render()
    again = parse_config(rendered)
    assert again.render() == rendered
    assert again == cfg


def test_mlat_round_trip():
    cfg = parse_config(json.dumps(mlat_config_doc()))
    assert parse_config(cfg.render()) == cfg


def test_not_json_names_problem():
    with pytest.raises(InvalidConfig, match="not valid JSON"):
        parse_config("{nope")


@pytest.mark.parametrize(
    "mutate,key",
    [
        (lambda d: d.pop("device_id"), "device_id"),
        (lambda d: d.pop("manufacturer"), "manufacturer"),
        (lambda d: d["instrument"].pop("bases"), "instrument.bases"),
        (lambda d: d["instrument"].pop("noise"), "instrument.noise"),
        (lambda d: d.__setitem__("bogus", 1), "bogus"),
        (lambda d: d["instrument"]["targets"][0].pop("position"), "position"),
    ],
)
def test_missing_or_unknown_keys_are_named(mutate, key):
    doc = tracker_config_doc()
    mutate(doc)
    with pytest.raises(InvalidConfig, match=key.replace(".", r"\.")):
        parse_config(json.dumps(doc))


def test_duplicate_names_rejected():
    doc = tracker_config_doc()
    doc["instrument"]["targets"][1]["name"] = "smr1"
    with pytest.raises(InvalidConfig, match="duplicate"):
        parse_config(json.dumps(doc))


def test_zero_bases_rejected():
    doc = tracker_config_doc()
    doc["instrument"]["bases"] = []
    with pytest.raises(InvalidConfig, match="bases"):
        parse_config(json.dumps(doc))


def test_exactly_one_home_for_tracker():
    doc = tracker_config_doc()
    doc["instrument"]["targets"][0]["home"] = False
    with pytest.raises(InvalidConfig, match="home"):
        parse_config(json.dumps(doc))
    doc = tracker_config_doc()
    doc["instrument"]["targets"][1]["home"] = True
    with pytest.raises(InvalidConfig, match="home"):
        parse_config(json.dumps(doc))


def test_mlat_needs_four_anchors():
    doc = mlat_config_doc()
    doc["instrument"]["bases"] = doc["instrument"]["bases"][:3]
    with pytest.raises(InvalidConfig, match="4 anchors"):
        parse_config(json.dumps(doc))


def test_port_collision_rejected():
    doc = tracker_config_doc()
    doc["adapters"] = {
        "http": {"port": 9000, "tokens": {"t": "ops"}},
        "mqtt": {"port": 9000, "credentials": {"ops": "pw"}},
    }
    with pytest.raises(InvalidConfig, match="port"):
        parse_config(json.dumps(doc))


def test_adapter_users_must_have_policy_rules():
    doc = tracker_config_doc()
    doc["adapters"] = {"http": {"port": 9000, "tokens": {"t": "ghost"}}}
    with pytest.raises(InvalidConfig, match="ghost"):
        parse_config(json.dumps(doc))


def test_noise_must_be_strictly_positive():
    doc = tracker_config_doc()
    doc["instrument"]["noise"]["sigma_d"] = 0.0
    with pytest.raises(InvalidConfig, match="strictly positive"):
        parse_config(json.dumps(doc))


def test_quaternion_must_be_unit():
    doc = tracker_config_doc()
    doc["instrument"]["targets"][0]["quaternion"] = [1.0, 1.0, 0.0, 0.0]
    with pytest.raises(InvalidConfig, match="quaternion"):
        parse_config(json.dumps(doc))


def test_bad_device_id_rejected():
    doc = tracker_config_doc()
    doc["device_id"] = "Dev 1"
    with pytest.raises(InvalidConfig, match="device_id"):
        parse_config(json.dumps(doc))
