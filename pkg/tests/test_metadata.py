import json

import pytest
from hypothesis import given, strategies as st

from metadvfs import metadata
from metadvfs.metadata import (
    CombinationKey,
    MalformedValue,
    MetadataRecord,
    SchemaViolation,
    UnknownAttribute,
    canonicalize,
    merge_view,
    shared_attributes,
)

from conftest import CATALOG_DIR, write_catalog


# -- canonicalization oracles ------------------------------------------------

CANON_CASES = [
    ("process_node", "4nm FinFET", "4nm"),
    ("process_node", " 10NM lpp ", "10nm"),
    ("target_fps", "60 FPS", "60"),
    ("target_fps", "Variable", "variable"),
    ("cpu_freq_range", "300-2803MHz", "300-2803"),
    ("cpu_freq_range", "402 - 2850 mhz", "402-2850"),
    ("cpu_topology", "1 + 3 + 4", "1+3+4"),
    ("chipset_vendor", "Google Tensor", "google_tensor"),
    ("resolution", "1080p", "1080p"),
    ("cpu_sensitivity", "Very High", "very_high"),
    ("category", "Video", "video"),
    ("core_count", "8", "8"),
]


@pytest.mark.parametrize("key,raw,expected", CANON_CASES)
def test_canonicalize_known_values(key, raw, expected):
    got_key, got = canonicalize(key, raw)
    assert got_key == key
    assert got == expected


@pytest.mark.parametrize("key,raw,expected", CANON_CASES)
def test_canonicalize_idempotent(key, raw, expected):
    _, once = canonicalize(key, raw)
    _, twice = canonicalize(key, once)
    assert twice == once


@pytest.mark.parametrize(
    "key,raw",
    [
        ("process_node", "FinFET"),
        ("target_fps", "sixty"),
        ("cpu_freq_range", "2803-300"),
        ("cpu_freq_range", "300"),
        ("cpu_topology", "octa"),
        ("cpu_sensitivity", "extreme"),
        ("core_count", "eight"),
    ],
)
def test_canonicalize_rejects_malformed(key, raw):
    with pytest.raises(MalformedValue):
        canonicalize(key, raw)


def test_unknown_attribute_rejected():
    with pytest.raises(UnknownAttribute):
        canonicalize("battery_mah", "5000")


# -- records and combinations ------------------------------------------------

DEV = {
    "core_count": "8",
    "chipset_vendor": "Google Tensor",
    "process_node": "4nm FinFET",
    "cpu_topology": "1+3+4",
    "cpu_freq_range": "300-2803MHz",
    "gpu_freq_range": "150-900MHz",
}
APP = {
    "category": "video",
    "target_fps": "60 FPS",
    "resolution": "1080p",
    "cpu_sensitivity": "medium",
    "gpu_sensitivity": "high",
    "io_sensitivity": "low",
}


def test_record_requires_all_keys():
    with pytest.raises(SchemaViolation):
        MetadataRecord.from_raw("device", "d1", {k: v for k, v in DEV.items() if k != "cpu_topology"})


def test_record_rejects_cross_kind_keys():
    bad = dict(DEV)
    bad["category"] = "video"
    with pytest.raises(SchemaViolation):
        MetadataRecord.from_raw("device", "d1", bad)


def test_combination_key_namespaces_attributes():
    d = MetadataRecord.from_raw("device", "pixel", DEV)
    a = MetadataRecord.from_raw("application", "youtube", APP)
    combo = CombinationKey.from_records(d, a)
    assert combo.id == "pixel__youtube"
    assert combo.merged_attributes["device.process_node"] == "4nm"
    assert combo.merged_attributes["app.target_fps"] == "60"
    assert len(combo.merged_attributes) == 12


def test_shared_attributes_exact_match_only():
    a = {"device.process_node": "4nm", "app.category": "video", "app.target_fps": "60"}
    b = {"device.process_node": "4nm", "app.category": "video", "app.target_fps": "30"}
    assert shared_attributes(a, b) == {"device.process_node": "4nm", "app.category": "video"}


def test_merge_view_drops_excluded_keys():
    d = MetadataRecord.from_raw("device", "pixel", DEV)
    a = MetadataRecord.from_raw("application", "youtube", APP)
    view = merge_view(CombinationKey.from_records(d, a).merged_attributes)
    assert "device.core_count" not in view
    assert "device.cpu_freq_range" not in view
    assert "device.gpu_freq_range" not in view
    assert view["device.cpu_topology"] == "1+3+4"


@given(st.dictionaries(st.text(min_size=1, max_size=8), st.text(max_size=8), max_size=6))
def test_shared_attributes_idempotent_and_symmetric(attrs):
    assert shared_attributes(attrs, attrs) == attrs
    other = {k: v + "x" for k, v in attrs.items()}
    assert shared_attributes(attrs, other) == shared_attributes(other, attrs)


# -- catalogs ----------------------------------------------------------------

def test_load_catalog_pixel_table():
    records = metadata.load_catalog(CATALOG_DIR / "pixel_table.json")
    devices = [r for r in records if r.kind == "device"]
    apps = [r for r in records if r.kind == "application"]
    assert len(devices) == 5 and len(apps) == 6
    assert len(metadata.combinations(records)) == 30
    assert records == sorted(records, key=lambda r: r.id)


def test_load_catalog_rejects_bad_value(tmp_path):
    path = write_catalog(
        tmp_path / "bad.json",
        [{"kind": "device", "id": "d", "attributes": dict(DEV, process_node="FinFET")}],
    )
    with pytest.raises(SchemaViolation):
        metadata.load_catalog(path)


def test_load_catalog_rejects_duplicate_ids(tmp_path):
    rec = {"kind": "device", "id": "d", "attributes": DEV}
    path = write_catalog(tmp_path / "dup.json", [rec, rec])
    with pytest.raises(SchemaViolation):
        metadata.load_catalog(path)


def test_load_catalog_rejects_invalid_json(tmp_path):
    path = tmp_path / "broken.json"
    path.write_text("{not json")
    with pytest.raises(metadata.ParseError):
        metadata.load_catalog(path)
