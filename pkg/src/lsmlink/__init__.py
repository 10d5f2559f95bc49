"""Protocol-agnostic device interface for large-scale metrology instruments.

A device is a tree of objects, functions and variables driven by one
dispatch pipeline of eight actions, served simultaneously over HTTP/REST and
an embedded MQTT broker, and validated against simulated laser-tracker and
multilateration backends.
"""

from .config import (
    BaseStationSpec,
    InstrumentConfig,
    InstrumentSpec,
    InvalidConfig,
    TargetSpec,
    load_config,
    parse_config,
)
from .device import (
    AcquisitionMode,
    BASE_CLASS,
    CALIBRATION_CLASS,
    DeviceService,
    ENTITY_CLASS,
    EntityState,
    build_device_tree,
)
from .geometry import (
    DegenerateGeometry,
    NoConvergence,
    SphericalReading,
    TrackerNoise,
    covariance_propagate,
    gauss_newton_solve,
    mlat_residual_jacobian,
    spherical_to_cartesian,
    tracker_search,
)
from .pipeline import (
    Action,
    ActionRequest,
    ActionResponse,
    AuthzDecision,
    Pipeline,
    Policy,
    SimClock,
    SubscriptionRegistry,
    authorize,
)
from .resources import (
    ClassDefinition,
    FunctionNode,
    FunctionSig,
    MalformedId,
    Metadata,
    NotAnObject,
    NotFound,
    ObjectNode,
    ResourceId,
    Value,
    ValueKind,
    VariableNode,
    browse,
    conforms,
    parse_resource_id,
    resolve,
    walk,
)

__version__ = "0.1.0"

__all__ = [
    "Action",
    "ActionRequest",
    "ActionResponse",
    "AcquisitionMode",
    "AuthzDecision",
    "BASE_CLASS",
    "BaseStationSpec",
    "CALIBRATION_CLASS",
    "ClassDefinition",
    "DegenerateGeometry",
    "DeviceService",
    "ENTITY_CLASS",
    "EntityState",
    "FunctionNode",
    "FunctionSig",
    "InstrumentConfig",
    "InstrumentSpec",
    "InvalidConfig",
    "MalformedId",
    "Metadata",
    "NoConvergence",
    "NotAnObject",
    "NotFound",
    "ObjectNode",
    "Pipeline",
    "Policy",
    "ResourceId",
    "SimClock",
    "SphericalReading",
    "SubscriptionRegistry",
    "TargetSpec",
    "TrackerNoise",
    "Value",
    "ValueKind",
    "VariableNode",
    "authorize",
    "browse",
    "build_device_tree",
    "conforms",
    "covariance_propagate",
    "gauss_newton_solve",
    "load_config",
    "mlat_residual_jacobian",
    "parse_config",
    "parse_resource_id",
    "resolve",
    "spherical_to_cartesian",
    "tracker_search",
    "walk",
]
