"""Declarative instrument configuration.

A single JSON document describes a simulated device: identity, instrument
geometry and noise, both adapter endpoints, authorization rules and the RNG
seed. Parsing is strict — unknown or missing keys fail with the offending
key named — and a parsed config renders back to the identical canonical
document.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

from . import wire
from .geometry import TrackerNoise
from .pipeline import Policy
from .resources import MalformedId, ResourceId, validate_unit_quaternion

LASER_TRACKER = "laser_tracker"
MULTILATERATION = "multilateration"

IDENTITY_QUATERNION = (1.0, 0.0, 0.0, 0.0)


class InvalidConfig(ValueError):
    """Configuration rejected; the message names the offending key."""


def _require(doc: dict, key: str, context: str):
    if key not in doc:
        raise InvalidConfig(f"missing key {context}{key}")
    return doc[key]


def _no_extras(doc: dict, allowed: set[str], context: str) -> None:
    extra = set(doc) - allowed
    if extra:
        raise InvalidConfig(f"unknown key {context}{sorted(extra)[0]}")


def _vec3(v, context: str) -> tuple[float, float, float]:
    if not isinstance(v, (list, tuple)) or len(v) != 3:
        raise InvalidConfig(f"{context} must be a 3-vector")
    try:
        return tuple(float(x) for x in v)  # type: ignore[return-value]
    except (TypeError, ValueError):
        raise InvalidConfig(f"{context} must hold numbers") from None


def _quat(v, context: str) -> tuple[float, float, float, float]:
    if not isinstance(v, (list, tuple)) or len(v) != 4:
        raise InvalidConfig(f"{context} must be a 4-vector quaternion")
    try:
        return validate_unit_quaternion(tuple(float(x) for x in v))  # type: ignore[return-value]
    except (TypeError, ValueError) as exc:
        raise InvalidConfig(f"{context}: {exc}") from None


def _name(v, context: str) -> str:
    if not isinstance(v, str):
        raise InvalidConfig(f"{context} must be a string")
    try:
        ResourceId.parse(v)
    except MalformedId as exc:
        raise InvalidConfig(f"{context}: {exc}") from None
    if "/" in v:
        raise InvalidConfig(f"{context} must be a single segment")
    return v


@dataclass(frozen=True)
class BaseStationSpec:
    name: str
    position: tuple[float, float, float] = (0.0, 0.0, 0.0)
    quaternion: tuple[float, float, float, float] = IDENTITY_QUATERNION

    @classmethod
    def from_json(cls, doc: dict, context: str) -> "BaseStationSpec":
        _no_extras(doc, {"name", "position", "quaternion"}, context)
        return cls(
            name=_name(_require(doc, "name", context), context + "name"),
            position=_vec3(doc.get("position", (0.0, 0.0, 0.0)), context + "position"),
            quaternion=_quat(doc.get("quaternion", IDENTITY_QUATERNION), context + "quaternion"),
        )

    def to_json(self) -> dict:
        return {
            "name": self.name,
            "position": list(self.position),
            "quaternion": list(self.quaternion),
        }


@dataclass(frozen=True)
class TargetSpec:
    name: str
    position: tuple[float, float, float]
    target_type: str = "smr"
    home: bool = False
    quaternion: tuple[float, float, float, float] = IDENTITY_QUATERNION
    velocity: tuple[float, float, float] = (0.0, 0.0, 0.0)

    @classmethod
    def from_json(cls, doc: dict, context: str) -> "TargetSpec":
        _no_extras(
            doc, {"name", "position", "type", "home", "quaternion", "velocity"}, context
        )
        home = doc.get("home", False)
        if not isinstance(home, bool):
            raise InvalidConfig(f"{context}home must be a boolean")
        target_type = doc.get("type", "smr")
        if not isinstance(target_type, str) or not target_type:
            raise InvalidConfig(f"{context}type must be a non-empty string")
        return cls(
            name=_name(_require(doc, "name", context), context + "name"),
            position=_vec3(_require(doc, "position", context), context + "position"),
            target_type=target_type,
            home=home,
            quaternion=_quat(doc.get("quaternion", IDENTITY_QUATERNION), context + "quaternion"),
            velocity=_vec3(doc.get("velocity", (0.0, 0.0, 0.0)), context + "velocity"),
        )

    def to_json(self) -> dict:
        return {
            "name": self.name,
            "position": list(self.position),
            "type": self.target_type,
            "home": self.home,
            "quaternion": list(self.quaternion),
            "velocity": list(self.velocity),
        }


@dataclass(frozen=True)
class InstrumentSpec:
    kind: str
    bases: tuple[BaseStationSpec, ...]
    targets: tuple[TargetSpec, ...]
    noise: TrackerNoise | None = None
    range_sigma: float | None = None
    rate_hz: float = 10.0
    search_radius: float = 0.05
    search_duration: float = 0.0
    realtime: bool = True

    @classmethod
    def from_json(cls, doc: dict) -> "InstrumentSpec":
        ctx = "instrument."
        _no_extras(
            doc,
            {
                "type",
                "bases",
                "targets",
                "noise",
                "range_sigma",
                "rate_hz",
                "search_radius",
                "search_duration",
                "realtime",
            },
            ctx,
        )
        kind = _require(doc, "type", ctx)
        if kind not in (LASER_TRACKER, MULTILATERATION):
            raise InvalidConfig(f"instrument.type must be {LASER_TRACKER} or {MULTILATERATION}")
        bases_doc = _require(doc, "bases", ctx)
        targets_doc = _require(doc, "targets", ctx)
        if not isinstance(bases_doc, list) or not isinstance(targets_doc, list):
            raise InvalidConfig("instrument.bases and instrument.targets must be arrays")
        bases = tuple(
            BaseStationSpec.from_json(b, f"instrument.bases[{i}].") for i, b in enumerate(bases_doc)
        )
        targets = tuple(
            TargetSpec.from_json(t, f"instrument.targets[{i}].") for i, t in enumerate(targets_doc)
        )

        noise = None
        if "noise" in doc:
            ndoc = doc["noise"]
            _no_extras(ndoc, {"sigma_d", "sigma_az", "sigma_el"}, ctx + "noise.")
            try:
                noise = TrackerNoise(
                    sigma_d=float(_require(ndoc, "sigma_d", ctx + "noise.")),
                    sigma_az=float(_require(ndoc, "sigma_az", ctx + "noise.")),
                    sigma_el=float(_require(ndoc, "sigma_el", ctx + "noise.")),
                )
            except (TypeError, ValueError) as exc:
                raise InvalidConfig(f"instrument.noise: {exc}") from None

        range_sigma = doc.get("range_sigma")
        if range_sigma is not None:
            try:
                range_sigma = float(range_sigma)
            except (TypeError, ValueError):
                raise InvalidConfig("instrument.range_sigma must be a number") from None

        spec = cls(
            kind=kind,
            bases=bases,
            targets=targets,
            noise=noise,
            range_sigma=range_sigma,
            rate_hz=float(doc.get("rate_hz", 10.0)),
            search_radius=float(doc.get("search_radius", 0.05)),
            search_duration=float(doc.get("search_duration", 0.0)),
            realtime=bool(doc.get("realtime", True)),
        )
        spec.validate()
        return spec

    def validate(self) -> None:
        names = [b.name for b in self.bases] + [t.name for t in self.targets]
        seen: set[str] = set()
        for n in names:
            if n in seen:
                raise InvalidConfig(f"duplicate name in instrument.bases/targets: {n!r}")
            seen.add(n)
        if not self.bases:
            raise InvalidConfig("instrument.bases must list at least one base station")
        if not self.targets:
            raise InvalidConfig("instrument.targets must list at least one target")
        homes = [t for t in self.targets if t.home]
        if self.kind == LASER_TRACKER:
            if len(self.bases) != 1:
                raise InvalidConfig("instrument.bases: a laser tracker has exactly one base")
            if len(homes) != 1:
                raise InvalidConfig("instrument.targets needs exactly one home target")
            if self.noise is None:
                raise InvalidConfig("missing key instrument.noise")
            if min(self.noise.sigma_d, self.noise.sigma_az, self.noise.sigma_el) <= 0:
                raise InvalidConfig("instrument.noise sigmas must be strictly positive")
        else:
            if len(self.bases) < 4:
                raise InvalidConfig("instrument.bases: multilateration needs at least 4 anchors")
            if self.range_sigma is None:
                raise InvalidConfig("missing key instrument.range_sigma")
            if not self.range_sigma > 0:
                raise InvalidConfig("instrument.range_sigma must be strictly positive")
        if not (math.isfinite(self.rate_hz) and self.rate_hz > 0):
            raise InvalidConfig("instrument.rate_hz must be strictly positive")
        if not (math.isfinite(self.search_radius) and self.search_radius > 0):
            raise InvalidConfig("instrument.search_radius must be strictly positive")
        if self.search_duration < 0:
            raise InvalidConfig("instrument.search_duration must be >= 0")

    def to_json(self) -> dict:
        doc: dict = {
            "type": self.kind,
            "bases": [b.to_json() for b in self.bases],
            "targets": [t.to_json() for t in self.targets],
            "rate_hz": self.rate_hz,
            "search_radius": self.search_radius,
            "search_duration": self.search_duration,
            "realtime": self.realtime,
        }
        if self.noise is not None:
            doc["noise"] = {
                "sigma_d": self.noise.sigma_d,
                "sigma_az": self.noise.sigma_az,
                "sigma_el": self.noise.sigma_el,
            }
        if self.range_sigma is not None:
            doc["range_sigma"] = self.range_sigma
        return doc


@dataclass(frozen=True)
class HttpAdapterConfig:
    port: int
    tokens: dict[str, str] = field(default_factory=dict)  # bearer token -> user

    @classmethod
    def from_json(cls, doc: dict) -> "HttpAdapterConfig":
        _no_extras(doc, {"port", "tokens"}, "adapters.http.")
        port = _require(doc, "port", "adapters.http.")
        tokens = doc.get("tokens", {})
        if not isinstance(port, int) or isinstance(port, bool) or not 0 <= port <= 65535:
            raise InvalidConfig("adapters.http.port must be an integer in [0, 65535]")
        if not isinstance(tokens, dict) or not all(
            isinstance(k, str) and isinstance(v, str) for k, v in tokens.items()
        ):
            raise InvalidConfig("adapters.http.tokens must map token strings to user names")
        return cls(port=port, tokens=dict(tokens))

    def to_json(self) -> dict:
        return {"port": self.port, "tokens": dict(sorted(self.tokens.items()))}


@dataclass(frozen=True)
class MqttAdapterConfig:
    port: int
    credentials: dict[str, str] = field(default_factory=dict)  # user -> password

    @classmethod
    def from_json(cls, doc: dict) -> "MqttAdapterConfig":
        _no_extras(doc, {"port", "credentials"}, "adapters.mqtt.")
        port = _require(doc, "port", "adapters.mqtt.")
        creds = doc.get("credentials", {})
        if not isinstance(port, int) or isinstance(port, bool) or not 0 <= port <= 65535:
            raise InvalidConfig("adapters.mqtt.port must be an integer in [0, 65535]")
        if not isinstance(creds, dict) or not all(
            isinstance(k, str) and isinstance(v, str) for k, v in creds.items()
        ):
            raise InvalidConfig("adapters.mqtt.credentials must map user names to passwords")
        return cls(port=port, credentials=dict(creds))

    def to_json(self) -> dict:
        return {"port": self.port, "credentials": dict(sorted(self.credentials.items()))}


@dataclass(frozen=True)
class InstrumentConfig:
    device_id: str
    manufacturer: str
    instrument: InstrumentSpec
    policy: tuple[str, ...]
    http: HttpAdapterConfig | None = None
    mqtt: MqttAdapterConfig | None = None
    seed: int = 0

    @classmethod
    def from_json(cls, doc: dict) -> "InstrumentConfig":
        if not isinstance(doc, dict):
            raise InvalidConfig("config root must be a JSON object")
        _no_extras(
            doc, {"device_id", "manufacturer", "instrument", "adapters", "policy", "seed"}, ""
        )
        device_id = _name(_require(doc, "device_id", ""), "device_id")
        manufacturer = _require(doc, "manufacturer", "")
        if not isinstance(manufacturer, str) or not manufacturer:
            raise InvalidConfig("manufacturer must be a non-empty string")
        instrument = InstrumentSpec.from_json(_require(doc, "instrument", ""))

        policy_doc = _require(doc, "policy", "")
        if not isinstance(policy_doc, list) or not all(isinstance(p, str) for p in policy_doc):
            raise InvalidConfig("policy must be an array of rule strings")
        try:
            policy = Policy.parse_lines(policy_doc)
        except ValueError as exc:
            raise InvalidConfig(f"policy: {exc}") from None

        adapters = doc.get("adapters", {})
        if not isinstance(adapters, dict):
            raise InvalidConfig("adapters must be an object")
        _no_extras(adapters, {"http", "mqtt"}, "adapters.")
        http = HttpAdapterConfig.from_json(adapters["http"]) if "http" in adapters else None
        mqtt = MqttAdapterConfig.from_json(adapters["mqtt"]) if "mqtt" in adapters else None

        seed = doc.get("seed", 0)
        if not isinstance(seed, int) or isinstance(seed, bool):
            raise InvalidConfig("seed must be an integer")

        cfg = cls(
            device_id=device_id,
            manufacturer=manufacturer,
            instrument=instrument,
            policy=tuple(policy_doc),
            http=http,
            mqtt=mqtt,
            seed=seed,
        )
        cfg.validate(policy)
        return cfg

    def validate(self, policy: Policy | None = None) -> None:
        policy = policy or Policy.parse_lines(self.policy)
        known_users = policy.users()
        if self.http is not None and self.mqtt is not None:
            if self.http.port != 0 and self.http.port == self.mqtt.port:
                raise InvalidConfig("adapters.http.port collides with adapters.mqtt.port")
        if self.http is not None:
            for token, user in self.http.tokens.items():
                if user not in known_users:
                    raise InvalidConfig(f"adapters.http.tokens: user {user!r} has no policy rule")
        if self.mqtt is not None:
            for user in self.mqtt.credentials:
                if user not in known_users:
                    raise InvalidConfig(
                        f"adapters.mqtt.credentials: user {user!r} has no policy rule"
                    )

    def to_json(self) -> dict:
        doc: dict = {
            "device_id": self.device_id,
            "manufacturer": self.manufacturer,
            "instrument": self.instrument.to_json(),
            "policy": list(self.policy),
            "seed": self.seed,
        }
        adapters: dict = {}
        if self.http is not None:
            adapters["http"] = self.http.to_json()
        if self.mqtt is not None:
            adapters["mqtt"] = self.mqtt.to_json()
        if adapters:
            doc["adapters"] = adapters
        return doc

    def render(self) -> str:
        return wire.canonical_json(self.to_json()).decode("ascii")


def load_config(path: str | Path) -> InstrumentConfig:
    text = Path(path).read_text(encoding="utf-8")
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise InvalidConfig(f"config is not valid JSON: {exc}") from None
    return InstrumentConfig.from_json(doc)


def parse_config(text: str) -> InstrumentConfig:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise InvalidConfig(f"config is not valid JSON: {exc}") from None
    return InstrumentConfig.from_json(doc)
