from __future__ import annotations

import json

import pytest

from lsmlink import DeviceService, parse_config
from lsmlink.pipeline import Action, ActionRequest, ActionResponse
from lsmlink.resources import parse_resource_id

TRACKER_NOISE = {"sigma_d": 1e-5, "sigma_az": 4.848e-6, "sigma_el": 4.848e-6}

POLICY = [
    "ops:allow:**",
    "viewer:readonly:**",
    "system:allow:**",
    "intruder:deny:**",
]


def tracker_config_doc(n_targets: int = 2, seed: int = 7, **instrument_overrides) -> dict:
    targets = [{"name": "smr1", "position": [1.0, 2.0, 0.5], "home": True}]
    for i in range(2, n_targets + 1):
        targets.append({"name": f"smr{i}", "position": [float(-i), float(i), 0.3]})
    instrument = {
        "type": "laser_tracker",
        "noise": dict(TRACKER_NOISE),
        "bases": [{"name": "head"}],
        "targets": targets,
        "rate_hz": 10.0,
        "search_radius": 0.05,
        "realtime": False,
    }
    instrument.update(instrument_overrides)
    return {
        "device_id": "dev1",
        "manufacturer": "Acme Metrology",
        "seed": seed,
        "instrument": instrument,
        "policy": list(POLICY),
    }


def mlat_config_doc(seed: int = 11) -> dict:
    return {
        "device_id": "uwb1",
        "manufacturer": "Acme Metrology",
        "seed": seed,
        "instrument": {
            "type": "multilateration",
            "range_sigma": 0.001,
            "bases": [
                {"name": "a0", "position": [0.0, 0.0, 0.0]},
                {"name": "a1", "position": [10.0, 0.0, 0.2]},
                {"name": "a2", "position": [0.0, 10.0, 0.1]},
                {"name": "a3", "position": [10.0, 10.0, 2.5]},
                {"name": "a4", "position": [5.0, 5.0, 3.0]},
            ],
            "targets": [
                {"name": "tag1", "position": [3.0, 4.0, 1.0]},
                {"name": "tag2", "position": [6.0, 2.0, 1.5]},
            ],
            "realtime": False,
        },
        "policy": list(POLICY),
    }


@pytest.fixture
def tracker_config():
    return parse_config(json.dumps(tracker_config_doc()))


@pytest.fixture
def tracker_device(tracker_config) -> DeviceService:
    return DeviceService(tracker_config)


@pytest.fixture
def mlat_config():
    return parse_config(json.dumps(mlat_config_doc()))


@pytest.fixture
def mlat_device(mlat_config) -> DeviceService:
    return DeviceService(mlat_config)


def invoke(dev: DeviceService, path: str, user: str = "ops", **args) -> ActionResponse:
    return dev.handle(
        ActionRequest(
            user=user, resource=parse_resource_id(path), action=Action.ON_INVOKE, payload=args
        )
    )


def read(dev: DeviceService, path: str, user: str = "ops") -> ActionResponse:
    return dev.handle(
        ActionRequest(user=user, resource=parse_resource_id(path), action=Action.READ)
    )


def update(dev: DeviceService, path: str, value, user: str = "ops") -> ActionResponse:
    return dev.handle(
        ActionRequest(
            user=user,
            resource=parse_resource_id(path),
            action=Action.UPDATE,
            payload={"value": value},
        )
    )


def activate(dev: DeviceService, name: str, active: bool = True) -> ActionResponse:
    return invoke(dev, f"lsm/entities/{name}/activate", active=active)
