"""Parsing, normalization and de-duplication of raw business/contact records."""

from __future__ import annotations

import csv
import io
import logging
import math
import re
import string
from dataclasses import dataclass, field, replace
from datetime import datetime, timezone
from pathlib import Path
from typing import IO, Iterable, Mapping, Sequence

logger = logging.getLogger(__name__)

SOURCE_KINDS = ("raid_report", "listing", "advertisement")
LABELS = ("raided", "not_raided", "unlabeled")
MIN_TIMESTAMP = datetime(1990, 1, 1, tzinfo=timezone.utc)

# Columns written to / read from a record file. Canonical keys are derived, never read.
RECORD_COLUMNS = (
    "record_id",
    "parlor_name",
    "address_raw",
    "address_canon",
    "city",
    "county",
    "phone_raw",
    "phone_canon",
    "owner_ethnicity",
    "review_count",
    "hourly_rate_usd",
    "num_local_raids",
    "alias",
    "label",
    "timestamp",
    "source_kind",
)
DERIVED_COLUMNS = frozenset({"address_canon", "phone_canon"})
INPUT_FIELDS = tuple(c for c in RECORD_COLUMNS if c not in DERIVED_COLUMNS)
CATEGORICAL_FIELDS = ("county", "owner_ethnicity", "city", "source_kind", "label")


class SchemaError(ValueError):
    """The column map does not fit the input file."""


@dataclass(frozen=True)
class EntityRecord:
    record_id: str
    parlor_name: str
    address_raw: str
    address_canon: str
    city: str
    county: str
    phone_raw: str
    phone_canon: str | None
    owner_ethnicity: str | None
    review_count: int
    hourly_rate_usd: float | None
    num_local_raids: int | None
    alias: str | None
    label: str
    timestamp: datetime
    source_kind: str

    @property
    def parlor_key(self) -> tuple[str, str]:
        return (self.parlor_name, self.address_canon)


@dataclass(frozen=True)
class Rejection:
    source_file: str
    row: int
    reason: str


@dataclass(frozen=True)
class CategoryVocab:
    field_name: str
    categories: tuple[str, ...]
    index: Mapping[str, int] = field(repr=False, compare=False)

    @classmethod
    def from_values(cls, field_name: str, values: Iterable[str | None]) -> "CategoryVocab":
        cats = tuple(sorted({v for v in values if v}))
        return cls(field_name, cats, {c: i for i, c in enumerate(cats)})

    def __len__(self) -> int:
        return len(self.categories)

    def encode(self, value: str | None) -> list[float]:
        """One-hot row; absent or unseen values give the all-zeros vector."""
        row = [0.0] * len(self.categories)
        pos = self.index.get(value) if value else None
        if pos is not None:
            row[pos] = 1.0
        return row


# -- normalization -----------------------------------------------------------

_NON_DIGIT = re.compile(r"\D+")
_PUNCT = str.maketrans("", "", string.punctuation)
_SUFFIXES = {
    "st": "street",
    "ave": "avenue",
    "blvd": "boulevard",
    "dr": "drive",
    "rd": "road",
    "suite": "ste",
}


def normalize_phone(raw: str | None) -> str | None:
    """Canonical digit string for a phone number, or None when unusable."""
    if not raw:
        return None
    digits = _NON_DIGIT.sub("", raw)
    if len(digits) == 11 and digits.startswith("1"):
        digits = digits[1:]
    if not 10 <= len(digits) <= 15:
        return None
    return digits


def normalize_address(raw: str | None) -> str:
    if not raw:
        return ""
    tokens = raw.lower().translate(_PUNCT).split()
    return " ".join(_SUFFIXES.get(t, t) for t in tokens)


def parse_timestamp(text: str) -> datetime:
    text = text.strip()
    if text.endswith(("Z", "z")):
        text = text[:-1] + "+00:00"
    ts = datetime.fromisoformat(text)
    if ts.tzinfo is None:
        ts = ts.replace(tzinfo=timezone.utc)
    return ts.astimezone(timezone.utc)


def format_timestamp(ts: datetime) -> str:
    ts = ts.astimezone(timezone.utc)
    if ts.microsecond:
        return ts.strftime("%Y-%m-%dT%H:%M:%S.%fZ")
    return ts.strftime("%Y-%m-%dT%H:%M:%SZ")


# -- parsing -----------------------------------------------------------------


class _RowError(Exception):
    pass


def _opt_text(value: str | None) -> str | None:
    value = (value or "").strip()
    return value or None


def _non_negative(value: str | None, name: str, cast):
    text = (value or "").strip()
    if not text:
        return None
    try:
        number = cast(text)
    except ValueError:
        raise _RowError(f"bad {name}: {text!r}") from None
    if not math.isfinite(number):
        raise _RowError(f"non-finite {name}")
    if number < 0:
        raise _RowError(f"negative {name}")
    return number


def _to_int(text: str) -> int:
    try:
        return int(text)
    except ValueError:
        number = float(text)
        if not number.is_integer():
            raise
        return int(number)


def _int_field(value, name):
    return _non_negative(value, name, _to_int)


def _build_record(row: Mapping[str, str], kind: str | None, default_id: str) -> EntityRecord:
    get = row.get
    ts_text = (get("timestamp") or "").strip()
    if not ts_text:
        raise _RowError("missing timestamp")
    try:
        ts = parse_timestamp(ts_text)
    except ValueError:
        raise _RowError(f"bad timestamp: {ts_text!r}") from None
    if ts < MIN_TIMESTAMP:
        raise _RowError("timestamp before 1990-01-01")

    name = (get("parlor_name") or "").strip()
    if not name:
        raise _RowError("missing parlor_name")

    row_kind = kind or (get("source_kind") or "").strip()
    if row_kind not in SOURCE_KINDS:
        raise _RowError(f"bad source_kind: {row_kind!r}")

    label = (get("label") or "").strip() or "unlabeled"
    if label not in LABELS:
        raise _RowError(f"bad label: {label!r}")
    if label != "unlabeled" and row_kind != "raid_report":
        raise _RowError("label only allowed on raid_report rows")

    address_raw = (get("address_raw") or "").strip()
    phone_raw = (get("phone_raw") or "").strip()
    rate = _non_negative(get("hourly_rate_usd"), "hourly_rate_usd", float)
    return EntityRecord(
        record_id=(get("record_id") or "").strip() or default_id,
        parlor_name=name,
        address_raw=address_raw,
        address_canon=normalize_address(address_raw),
        city=(get("city") or "").strip(),
        county=(get("county") or "").strip(),
        phone_raw=phone_raw,
        phone_canon=normalize_phone(phone_raw),
        owner_ethnicity=_opt_text(get("owner_ethnicity")),
        review_count=_int_field(get("review_count"), "review_count") or 0,
        hourly_rate_usd=rate,
        num_local_raids=_int_field(get("num_local_raids"), "num_local_raids"),
        alias=_opt_text(get("alias")),
        label=label,
        timestamp=ts,
        source_kind=row_kind,
    )


def parse_records(
    source: IO[str] | str | Path,
    kind: str | None = None,
    schema: Mapping[str, str] | None = None,
    source_name: str | None = None,
) -> tuple[list[EntityRecord], list[Rejection]]:
    """Parse a comma-separated record file with a header row.

    `schema` maps record field -> column name in the file; by default every
    header column named like a record field is used. `kind` overrides the
    per-row ``source_kind`` column. Malformed rows are returned as
    rejections (1-based data row numbers); the call itself only raises for
    an unreadable stream or a schema that does not fit the header.
    """
    if kind is not None and kind not in SOURCE_KINDS:
        raise SchemaError(f"unknown source kind {kind!r}")
    if isinstance(source, (str, Path)):
        source_name = source_name or str(source)
        with open(source, newline="", encoding="utf-8") as fh:
            return parse_records(fh, kind, schema, source_name)
    source_name = source_name or getattr(source, "name", "<stream>")

    reader = csv.DictReader(source)
    header = reader.fieldnames
    if header is None:
        raise SchemaError(f"{source_name}: empty file, header row required")
    header = [h.strip() for h in header]
    if schema is None:
        schema = {f: f for f in INPUT_FIELDS if f in header}
    else:
        unknown_fields = set(schema) - set(INPUT_FIELDS)
        if unknown_fields:
            raise SchemaError(f"unknown record field(s) in schema: {sorted(unknown_fields)}")
        missing = [col for col in schema.values() if col not in header]
        if missing:
            raise SchemaError(f"{source_name}: column(s) not in header: {missing}")

    records: list[EntityRecord] = []
    rejections: list[Rejection] = []
    for row_no, raw in enumerate(reader, start=1):
        raw = {k.strip() if k else k: v for k, v in raw.items()}
        if None in raw:
            rejections.append(Rejection(source_name, row_no, "too many fields"))
            continue
        mapped = {f: raw.get(col) for f, col in schema.items()}
        try:
            records.append(_build_record(mapped, kind, f"{Path(source_name).name}:{row_no}"))
        except _RowError as exc:
            rejections.append(Rejection(source_name, row_no, str(exc)))
    if rejections:
        logger.info("%s: %d records, %d rejections", source_name, len(records), len(rejections))
    return records, rejections


def _cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, datetime):
        return format_timestamp(value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_records(records: Iterable[EntityRecord], dest: IO[str] | str | Path) -> None:
    if isinstance(dest, (str, Path)):
        with open(dest, "w", newline="", encoding="utf-8") as fh:
            write_records(records, fh)
        return
    writer = csv.writer(dest, lineterminator="\n")
    writer.writerow(RECORD_COLUMNS)
    for rec in records:
        writer.writerow([_cell(getattr(rec, c)) for c in RECORD_COLUMNS])


def write_rejections(rejections: Iterable[Rejection], dest: str | Path) -> None:
    with open(dest, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["source_file", "row", "reason"])
        for rej in rejections:
            writer.writerow([rej.source_file, rej.row, rej.reason])


def records_to_text(records: Sequence[EntityRecord]) -> str:
    buf = io.StringIO()
    write_records(records, buf)
    return buf.getvalue()


def deduplicate(records: Iterable[EntityRecord]) -> list[EntityRecord]:
    """Drop repeats of (parlor_name, address_canon, phone_canon, timestamp, source_kind), keeping the first."""
    seen: set[tuple] = set()
    out = []
    for rec in records:
        key = (rec.parlor_name, rec.address_canon, rec.phone_canon, rec.timestamp, rec.source_kind)
        if key not in seen:
            seen.add(key)
            out.append(rec)
    return out


def build_vocab(records: Iterable[EntityRecord], field_name: str) -> CategoryVocab:
    if field_name not in CATEGORICAL_FIELDS:
        raise ValueError(f"{field_name!r} is not a categorical record field")
    return CategoryVocab.from_values(field_name, (getattr(r, field_name) for r in records))


def renormalize(record: EntityRecord) -> EntityRecord:
    """Recompute canonical keys from the raw fields."""
    return replace(
        record,
        address_canon=normalize_address(record.address_raw),
        phone_canon=normalize_phone(record.phone_raw),
    )


def ingest_files(
    paths: Sequence[str | Path], kinds: Sequence[str | None]
) -> tuple[list[EntityRecord], list[Rejection]]:
    """Parse several files in order, then de-duplicate the merged stream."""
    records: list[EntityRecord] = []
    rejections: list[Rejection] = []
    for path, kind in zip(paths, kinds):
        recs, rejs = parse_records(path, kind)
        records.extend(recs)
        rejections.extend(rejs)
    return deduplicate(records), rejections

