"""Dataset manifest persistence: one JSON record per line.

Line 1 is a header carrying the schema tag and the QES configuration used
to set the ``retained`` flags; every following line is one annotation
record. The format is append-safe, diff-able, and language-neutral. QES
values are stored to 4 decimal places.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from ..errors import DataError
from ..qes import QESConfig

SCHEMA = "iml-manifest/1"

_REQUIRED = {
    "id": str,
    "probe_path": str,
    "reference_path": str,
    "group": str,
    "mask_path": (str, type(None)),
    "qes": (int, float),
    "retained": bool,
    "md5": str,
    "phash": str,
    "source": str,
    "status": str,
}


@dataclass
class AnnotationRecord:
    """One auto-annotated sample. ``mask`` optionally carries the in-memory
    probability map; only ``mask_path`` is persisted."""

    id: str
    probe_path: str
    reference_path: str
    group: str
    mask_path: str | None
    qes: float
    retained: bool
    md5: str
    phash: str
    source: str = ""
    status: str = "ok"
    mask: np.ndarray | None = field(default=None, repr=False, compare=False)

    def to_json(self) -> str:
        payload = asdict(self)
        payload.pop("mask")
        payload["qes"] = round(float(payload["qes"]), 4)
        return json.dumps(payload, sort_keys=True)

    @classmethod
    def from_dict(cls, payload: dict, line_no: int) -> "AnnotationRecord":
        for key, types in _REQUIRED.items():
            if key not in payload:
                raise DataError(f"manifest line {line_no}: missing field {key!r}")
            if not isinstance(payload[key], types):
                raise DataError(f"manifest line {line_no}: field {key!r} has wrong type")
        extra = set(payload) - set(_REQUIRED)
        if extra:
            raise DataError(f"manifest line {line_no}: unknown fields {sorted(extra)}")
        if payload["group"] not in ("SPG", "SDG"):
            raise DataError(f"manifest line {line_no}: group must be SPG or SDG")
        if not 0.0 <= payload["qes"] <= 1.0:
            raise DataError(f"manifest line {line_no}: qes out of [0, 1]")
        return cls(**payload)


def build_manifest(records: list[AnnotationRecord], path: str | Path,
                   qes_config: QESConfig = QESConfig()) -> None:
    """Write a manifest atomically; rejects duplicate ids or md5 digests."""
    ids = [r.id for r in records]
    if len(set(ids)) != len(ids):
        raise DataError("duplicate record ids in manifest")
    digests = [r.md5 for r in records]
    if len(set(digests)) != len(digests):
        raise DataError("duplicate md5 digests in manifest")
    header = {
        "schema": SCHEMA,
        "qes_config": {
            "t_high": qes_config.t_high,
            "t_low": qes_config.t_low,
            "keep_threshold": qes_config.keep_threshold,
        },
    }
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with tmp.open("w", encoding="utf-8") as fh:
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for record in records:
            fh.write(record.to_json() + "\n")
    tmp.replace(path)


def append_records(records: list[AnnotationRecord], path: str | Path) -> None:
    """Append records to an existing manifest (validated on next load)."""
    with Path(path).open("a", encoding="utf-8") as fh:
        for record in records:
            fh.write(record.to_json() + "\n")


def load_manifest(path: str | Path) -> tuple[list[AnnotationRecord], QESConfig]:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"manifest not found: {path}")
    with path.open("r", encoding="utf-8") as fh:
        lines = [line.rstrip("\n") for line in fh if line.strip()]
    if not lines:
        raise DataError(f"manifest is empty (missing header): {path}")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise DataError(f"manifest header is not valid JSON: {exc}")
    if not isinstance(header, dict) or header.get("schema") != SCHEMA:
        raise DataError(f"unknown manifest schema in {path}")
    qes_cfg = QESConfig(**header.get("qes_config", {}))
    records = []
    seen_ids: set[str] = set()
    seen_md5: set[str] = set()
    for line_no, line in enumerate(lines[1:], start=2):
        try:
            payload = json.loads(line)
        except json.JSONDecodeError as exc:
            raise DataError(f"manifest line {line_no}: invalid JSON ({exc})")
        record = AnnotationRecord.from_dict(payload, line_no)
        if record.id in seen_ids:
            raise DataError(f"manifest line {line_no}: duplicate id {record.id!r}")
        if record.md5 in seen_md5:
            raise DataError(f"manifest line {line_no}: duplicate md5 {record.md5}")
        seen_ids.add(record.id)
        seen_md5.add(record.md5)
        records.append(record)
    return records, qes_cfg
