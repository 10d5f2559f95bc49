"""Simulated instrument backends.

Two backends validate the device model from opposite ends of the hardware
spectrum: a centralized laser tracker (one head, one locked target at a time,
spherical noise model) and a distributed ultra-wideband multilateration
system (anchor ranging, every tag measurable simultaneously). Both present
the same capability surface to the device layer, which stays agnostic of
which one it drives.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass

import numpy as np

from . import geometry
from .config import InstrumentSpec, TargetSpec, LASER_TRACKER
from .geometry import TrackerNoise
from .pipeline import InternalError, InvalidActionError


@dataclass(frozen=True)
class Measurement:
    position: tuple[float, float, float]
    covariance: tuple[tuple[float, float, float], ...]


def _tuple3(a) -> tuple[float, float, float]:
    x, y, z = (float(v) for v in a)
    return (x, y, z)


def _tuple3x3(m) -> tuple[tuple[float, float, float], ...]:
    return tuple(tuple(float(v) for v in row) for row in np.asarray(m, dtype=float))


class _TargetState:
    __slots__ = ("spec", "true_position", "velocity")

    def __init__(self, spec: TargetSpec) -> None:
        self.spec = spec
        self.true_position = np.asarray(spec.position, dtype=float).copy()
        self.velocity = np.asarray(spec.velocity, dtype=float).copy()


class _SimBackendBase:
    """State shared by both simulators: moving targets, switchable bases."""

    centralized: bool

    def __init__(self, spec: InstrumentSpec, rng: np.random.Generator) -> None:
        self._spec = spec
        self._rng = rng
        self._lock = threading.RLock()
        self._targets: dict[str, _TargetState] = {
            t.name: _TargetState(t) for t in spec.targets
        }
        self._base_active: dict[str, bool] = {b.name: True for b in spec.bases}

    # -- target bookkeeping --

    def target_names(self) -> list[str]:
        with self._lock:
            return list(self._targets)

    def true_position(self, name: str) -> tuple[float, float, float]:
        with self._lock:
            return _tuple3(self._target(name).true_position)

    def displace(self, name: str, delta) -> None:
        """Test hook: move the physical target without telling anybody."""
        with self._lock:
            self._target(name).true_position += np.asarray(delta, dtype=float)

    def add_target(self, spec: TargetSpec) -> None:
        with self._lock:
            if spec.name in self._targets:
                raise InternalError(f"target {spec.name!r} already exists")
            self._targets[spec.name] = _TargetState(spec)

    def remove_target(self, name: str) -> None:
        with self._lock:
            self._targets.pop(name, None)

    def set_base_active(self, name: str, active: bool) -> None:
        with self._lock:
            if name not in self._base_active:
                raise InternalError(f"unknown base {name!r}")
            self._base_active[name] = active

    def step(self, dt: float) -> None:
        """Advance motion profiles (static targets simply stay put)."""
        with self._lock:
            for t in self._targets.values():
                t.true_position += t.velocity * dt

    def _target(self, name: str) -> _TargetState:
        try:
            return self._targets[name]
        except KeyError:
            raise InternalError(f"unknown target {name!r}") from None


class LaserTrackerBackend(_SimBackendBase):
    """Single-head tracker: the beam locks onto at most one target; readings
    are spherical with independent Gaussian noise per raw channel."""

    centralized = True

    def __init__(self, spec: InstrumentSpec, rng: np.random.Generator) -> None:
        super().__init__(spec, rng)
        assert spec.kind == LASER_TRACKER and spec.noise is not None
        self.noise: TrackerNoise = spec.noise
        self.search_radius = spec.search_radius
        self._head = spec.bases[0].name
        self._head_position = np.asarray(spec.bases[0].position, dtype=float)
        self._locked: str | None = None

    @property
    def locked_target(self) -> str | None:
        with self._lock:
            return self._locked

    def search(self, name: str, last_known) -> bool:
        with self._lock:
            if not self._base_active[self._head]:
                raise InternalError("base station is inactive")
            target = self._target(name)
            ok = geometry.tracker_search(last_known, target.true_position, self.search_radius)
            self._locked = name if ok else None
            return ok

    def release(self, name: str) -> None:
        with self._lock:
            if self._locked == name:
                self._locked = None

    def measure(self, name: str) -> Measurement:
        with self._lock:
            if self._locked != name:
                raise InvalidActionError(f"tracker is not locked on {name!r}")
            if not self._base_active[self._head]:
                raise InternalError("base station is inactive")
            true_rel = self._target(name).true_position - self._head_position
            reading = geometry.cartesian_to_spherical(true_rel)
            noisy = geometry.SphericalReading(
                d=max(0.0, reading.d + self._rng.normal(0.0, self.noise.sigma_d)),
                az=_wrap_azimuth(reading.az + self._rng.normal(0.0, self.noise.sigma_az)),
                el=_clamp_elevation(reading.el + self._rng.normal(0.0, self.noise.sigma_el)),
            )
            position = geometry.spherical_to_cartesian(noisy) + self._head_position
            cov = geometry.covariance_propagate(reading, self.noise)
            return Measurement(position=_tuple3(position), covariance=_tuple3x3(cov))


class MultilaterationBackend(_SimBackendBase):
    """Anchor-ranging system: every tag may measure at once; a fix needs at
    least four active, non-coplanar anchors."""

    centralized = False

    def __init__(self, spec: InstrumentSpec, rng: np.random.Generator) -> None:
        super().__init__(spec, rng)
        assert spec.range_sigma is not None
        self.range_sigma = float(spec.range_sigma)
        self._anchor_positions = {
            b.name: np.asarray(b.position, dtype=float) for b in spec.bases
        }
        self._estimates: dict[str, np.ndarray] = {}

    def active_anchors(self) -> np.ndarray:
        with self._lock:
            return np.array(
                [self._anchor_positions[n] for n, on in self._base_active.items() if on]
            )

    def search(self, name: str, last_known) -> bool:
        with self._lock:
            self._target(name)  # existence check
            self._estimates[name] = np.asarray(last_known, dtype=float).copy()
            return True

    def release(self, name: str) -> None:
        with self._lock:
            self._estimates.pop(name, None)

    def measure(self, name: str) -> Measurement:
        with self._lock:
            target = self._target(name)
            anchors = self.active_anchors()
            if anchors.shape[0] < 4:
                raise InternalError("fewer than 4 active anchors")
            truth = target.true_position
            ranges = np.linalg.norm(truth - anchors, axis=1) + self._rng.normal(
                0.0, self.range_sigma, anchors.shape[0]
            )
            centroid = anchors.mean(axis=0) + 0.01
            x0 = self._estimates.get(name, centroid)
            if np.min(np.linalg.norm(x0 - anchors, axis=1)) < 1e-9:
                x0 = centroid  # the solver cannot start on an anchor
            try:
                position, cov = geometry.gauss_newton_solve(
                    anchors, ranges, x0, sigma_r=self.range_sigma
                )
            except (geometry.DegenerateGeometry, geometry.NoConvergence) as exc:
                try:  # a stale prior may sit in bad geometry; retry cold
                    position, cov = geometry.gauss_newton_solve(
                        anchors, ranges, centroid, sigma_r=self.range_sigma
                    )
                except (geometry.DegenerateGeometry, geometry.NoConvergence):
                    raise InternalError(f"multilateration failed: {exc}") from None
            self._estimates[name] = position.copy()
            return Measurement(position=_tuple3(position), covariance=_tuple3x3(cov))


def _wrap_azimuth(az: float) -> float:
    while az > np.pi:
        az -= 2 * np.pi
    while az <= -np.pi:
        az += 2 * np.pi
    return az


def _clamp_elevation(el: float) -> float:
    return float(min(np.pi / 2, max(-np.pi / 2, el)))


def build_backend(spec: InstrumentSpec, rng: np.random.Generator):
    if spec.kind == LASER_TRACKER:
        return LaserTrackerBackend(spec, rng)
    return MultilaterationBackend(spec, rng)
