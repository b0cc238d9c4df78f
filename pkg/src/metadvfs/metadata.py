"""Canonical metadata schema for devices and applications.

Records carry the attribute set that characterizes one device or one app
(vendor, process node, topology, category, target fps, sensitivities, ...).
Attribute values are canonical lowercase tokens so that the task-forest
candidate filter can test set intersection by exact key+value equality.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field


class MetadataError(Exception):
    pass


class UnknownAttribute(MetadataError):
    pass


class MalformedValue(MetadataError):
    pass


class ParseError(MetadataError):
    pass


class SchemaViolation(MetadataError):
    pass


SENSITIVITY_LEVELS = ("low", "medium", "high", "very_high")

_RANGE_RE = re.compile(r"^(\d+)\s*[-–—]\s*(\d+)\s*(?:mhz)?$")
_TOPOLOGY_RE = re.compile(r"^\d+(\+\d+)*$")


def _canon_token(value: str) -> str:
    return re.sub(r"\s+", "_", value.strip().lower())


def _canon_int(value: str) -> str:
    v = value.strip().lower()
    if not v.isdigit():
        raise MalformedValue(f"expected integer, got {value!r}")
    return str(int(v))


def _canon_process_node(value: str) -> str:
    m = re.match(r"^(\d+)\s*nm\b", value.strip().lower())
    if not m:
        raise MalformedValue(f"expected '<N>nm ...', got {value!r}")
    return f"{int(m.group(1))}nm"


def _canon_topology(value: str) -> str:
    v = re.sub(r"\s+", "", value.strip().lower())
    if not _TOPOLOGY_RE.match(v):
        raise MalformedValue(f"expected topology like '1+3+4', got {value!r}")
    return v


def _canon_freq_range(value: str) -> str:
    m = _RANGE_RE.match(value.strip().lower())
    if not m:
        raise MalformedValue(f"expected 'LO-HI[MHz]', got {value!r}")
    lo, hi = int(m.group(1)), int(m.group(2))
    if lo >= hi:
        raise MalformedValue(f"range must ascend, got {value!r}")
    return f"{lo}-{hi}"


def _canon_fps(value: str) -> str:
    v = value.strip().lower()
    if v == "variable":
        return "variable"
    m = re.match(r"^(\d+)\s*(?:fps)?$", v)
    if not m:
        raise MalformedValue(f"expected '<N>[ FPS]' or 'variable', got {value!r}")
    return str(int(m.group(1)))


def _canon_resolution(value: str) -> str:
    v = _canon_token(value)
    if v == "variable":
        return v
    if not re.match(r"^\d+p$", v):
        raise MalformedValue(f"expected '<N>p' or 'variable', got {value!r}")
    return v


def _canon_sensitivity(value: str) -> str:
    v = _canon_token(value)
    if v not in SENSITIVITY_LEVELS:
        raise MalformedValue(f"sensitivity must be one of {SENSITIVITY_LEVELS}, got {value!r}")
    return v


def _canon_category(value: str) -> str:
    v = _canon_token(value)
    if v not in ("video", "interactive", "graphics"):
        raise MalformedValue(f"unknown category {value!r}")
    return v


# key -> (kind, value canonicalizer)
SCHEMA: dict[str, tuple[str, object]] = {
    "core_count": ("device", _canon_int),
    "chipset_vendor": ("device", _canon_token),
    "process_node": ("device", _canon_process_node),
    "cpu_topology": ("device", _canon_topology),
    "cpu_freq_range": ("device", _canon_freq_range),
    "gpu_freq_range": ("device", _canon_freq_range),
    "category": ("application", _canon_category),
    "target_fps": ("application", _canon_fps),
    "resolution": ("application", _canon_resolution),
    "cpu_sensitivity": ("application", _canon_sensitivity),
    "gpu_sensitivity": ("application", _canon_sensitivity),
    "io_sensitivity": ("application", _canon_sensitivity),
}

DEVICE_KEYS = tuple(k for k, (kind, _) in SCHEMA.items() if kind == "device")
APP_KEYS = tuple(k for k, (kind, _) in SCHEMA.items() if kind == "application")

# Attributes admitted to the merge-candidate intersection test.  Raw numeric
# ranges and core counts are excluded by default: exact numeric equality
# across devices is rare and carries no similarity signal.
DEFAULT_MERGE_KEYS = frozenset(
    {
        "device.chipset_vendor",
        "device.process_node",
        "device.cpu_topology",
        "app.category",
        "app.target_fps",
        "app.resolution",
        "app.cpu_sensitivity",
        "app.gpu_sensitivity",
        "app.io_sensitivity",
    }
)


def canonicalize(raw_key: str, raw_value: str) -> tuple[str, str]:
    """Canonicalize one raw key/value pair. Idempotent for canonical input."""
    key = _canon_token(raw_key)
    if key not in SCHEMA:
        raise UnknownAttribute(f"attribute {raw_key!r} not in schema")
    _, fn = SCHEMA[key]
    return key, fn(str(raw_value))


@dataclass(frozen=True)
class MetadataRecord:
    """One device or one application, fully canonicalized."""

    kind: str  # "device" | "application"
    id: str
    attributes: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in ("device", "application"):
            raise SchemaViolation(f"{self.id}: kind must be device|application")
        required = DEVICE_KEYS if self.kind == "device" else APP_KEYS
        for key in required:
            if key not in self.attributes:
                raise SchemaViolation(f"{self.id}: missing required attribute {key!r}")
        for key in self.attributes:
            if key not in SCHEMA or SCHEMA[key][0] != self.kind:
                raise SchemaViolation(f"{self.id}: attribute {key!r} not valid for {self.kind}")

    @classmethod
    def from_raw(cls, kind: str, id: str, raw_attributes: dict) -> "MetadataRecord":
        attrs = dict(canonicalize(k, v) for k, v in raw_attributes.items())
        return cls(kind=kind, id=id, attributes=attrs)


@dataclass(frozen=True)
class CombinationKey:
    """One device-application pairing; its attributes namespaced by kind."""

    device_id: str
    app_id: str
    merged_attributes: dict[str, str]

    @property
    def id(self) -> str:
        return f"{self.device_id}__{self.app_id}"

    @classmethod
    def from_records(cls, device: MetadataRecord, app: MetadataRecord) -> "CombinationKey":
        if device.kind != "device" or app.kind != "application":
            raise SchemaViolation("combination needs one device and one application record")
        merged = {f"device.{k}": v for k, v in device.attributes.items()}
        merged.update({f"app.{k}": v for k, v in app.attributes.items()})
        return cls(device_id=device.id, app_id=app.id, merged_attributes=merged)


def shared_attributes(a: dict[str, str], b: dict[str, str]) -> dict[str, str]:
    """Pairs present with identical key AND value in both sets."""
    return {k: v for k, v in a.items() if b.get(k) == v}


def merge_view(attrs: dict[str, str], merge_keys: frozenset[str] = DEFAULT_MERGE_KEYS) -> dict[str, str]:
    """Restrict an attribute set to the keys admitted to the merge test."""
    return {k: v for k, v in attrs.items() if k in merge_keys}


def load_catalog(path) -> list[MetadataRecord]:
    """Load and validate a catalog file (JSON list of records), sorted by id."""
    try:
        with open(path, "r", encoding="utf-8") as fh:
            raw = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ParseError(f"cannot parse catalog {path}: {exc}") from exc
    if not isinstance(raw, list):
        raise ParseError(f"catalog {path} must be a JSON list of records")
    records = []
    seen: set[str] = set()
    for entry in raw:
        if not isinstance(entry, dict) or not {"kind", "id", "attributes"} <= entry.keys():
            raise ParseError(f"catalog entry missing kind/id/attributes: {entry!r}")
        rid = str(entry["id"])
        if rid in seen:
            raise SchemaViolation(f"duplicate record id {rid!r}")
        seen.add(rid)
        try:
            records.append(MetadataRecord.from_raw(entry["kind"], rid, entry["attributes"]))
        except MalformedValue as exc:
            raise SchemaViolation(f"{rid}: {exc}") from exc
    return sorted(records, key=lambda r: r.id)


def combinations(records: list[MetadataRecord]) -> list[CombinationKey]:
    """All device x application pairings of a catalog, in stable id order."""
    devices = [r for r in records if r.kind == "device"]
    apps = [r for r in records if r.kind == "application"]
    return [CombinationKey.from_records(d, a) for d in devices for a in apps]
