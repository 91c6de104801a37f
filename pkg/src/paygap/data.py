"""Variable schema, unit-level records, and CSV ingestion.

The on-disk format is a UTF-8 CSV with a header row, one worker per row.
The schema is a separate JSON document declaring every variable, its kind
(continuous or categorical), the reference category for categoricals, and
its role (response, gender, area, weight, or explanatory).
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping

from .errors import DataError, SchemaError

MEN = "men"
WOMEN = "women"
GENDERS = (MEN, WOMEN)

_KINDS = ("continuous", "categorical")
_ROLES = ("response", "explanatory", "gender", "area", "weight")

#: cap on the number of row-level problems reported in one DataError
_MAX_PROBLEMS = 50


@dataclass(frozen=True)
class Variable:
    """One declared survey variable."""

    name: str
    kind: str
    role: str
    categories: tuple[str, ...] = ()
    reference: str | None = None


@dataclass(frozen=True)
class VariableSchema:
    """Declaration of every variable in a survey file.

    Exactly one response, one gender, and one area variable are required.
    The gender variable lists exactly two categories; the first one is the
    men group. Each categorical explanatory variable designates one
    reference category, which is dropped during dummy encoding.
    """

    variables: tuple[Variable, ...]

    def __post_init__(self):
        problems = []
        names = [v.name for v in self.variables]
        if len(set(names)) != len(names):
            problems.append("duplicate variable names in schema")
        for role in ("response", "gender", "area"):
            k = sum(1 for v in self.variables if v.role == role)
            if k != 1:
                problems.append(f"schema must declare exactly one {role} variable, found {k}")
        if sum(1 for v in self.variables if v.role == "weight") > 1:
            problems.append("schema declares more than one weight variable")
        for v in self.variables:
            if v.kind not in _KINDS:
                problems.append(f"variable {v.name!r}: unknown kind {v.kind!r}")
            if v.role not in _ROLES:
                problems.append(f"variable {v.name!r}: unknown role {v.role!r}")
            if v.role in ("response", "weight") and v.kind != "continuous":
                problems.append(f"variable {v.name!r}: role {v.role} must be continuous")
            if v.role == "gender":
                if v.kind != "categorical" or len(v.categories) != 2:
                    problems.append(
                        f"variable {v.name!r}: gender must be categorical with two categories"
                    )
            if v.kind == "categorical" and v.role == "explanatory":
                if len(v.categories) < 2:
                    problems.append(f"variable {v.name!r}: needs at least two categories")
                ref = v.reference if v.reference is not None else (
                    v.categories[0] if v.categories else None
                )
                if ref not in v.categories:
                    problems.append(
                        f"variable {v.name!r}: reference {ref!r} not among its categories"
                    )
            if v.kind == "continuous" and v.categories:
                problems.append(f"variable {v.name!r}: continuous variable lists categories")
        if problems:
            raise SchemaError(problems)

    def _single(self, role: str) -> Variable:
        return next(v for v in self.variables if v.role == role)

    @property
    def response(self) -> Variable:
        return self._single("response")

    @property
    def gender(self) -> Variable:
        return self._single("gender")

    @property
    def area(self) -> Variable:
        return self._single("area")

    @property
    def weight(self) -> Variable | None:
        return next((v for v in self.variables if v.role == "weight"), None)

    @property
    def explanatory(self) -> tuple[Variable, ...]:
        return tuple(v for v in self.variables if v.role == "explanatory")

    def variable(self, name: str) -> Variable:
        for v in self.variables:
            if v.name == name:
                return v
        raise KeyError(name)

    def reference_of(self, var: Variable) -> str:
        if var.reference is not None:
            return var.reference
        return var.categories[0]

    def to_json(self) -> dict:
        out = []
        for v in self.variables:
            entry: dict = {"name": v.name, "kind": v.kind, "role": v.role}
            if v.categories:
                entry["categories"] = list(v.categories)
            if v.reference is not None:
                entry["reference"] = v.reference
            out.append(entry)
        return {"variables": out}

    @classmethod
    def from_json(cls, doc: Mapping) -> "VariableSchema":
        if "variables" not in doc:
            raise SchemaError("schema document lacks a 'variables' list")
        variables = []
        for entry in doc["variables"]:
            try:
                variables.append(
                    Variable(
                        name=entry["name"],
                        kind=entry["kind"],
                        role=entry["role"],
                        categories=tuple(entry.get("categories", ())),
                        reference=entry.get("reference"),
                    )
                )
            except (KeyError, TypeError) as exc:
                raise SchemaError(f"malformed schema entry {entry!r}: {exc}") from exc
        return cls(tuple(variables))

    @classmethod
    def from_file(cls, path) -> "VariableSchema":
        with open(path, "r", encoding="utf-8") as fh:
            try:
                doc = json.load(fh)
            except json.JSONDecodeError as exc:
                raise SchemaError(f"schema file {path}: {exc}") from exc
        return cls.from_json(doc)


@dataclass(frozen=True)
class UnitRecord:
    """One sampled worker.

    ``gender`` is normalized to "men"/"women"; ``values`` holds the raw
    explanatory values (floats for continuous, category labels otherwise).
    """

    wage_per_hour: float
    log_wage: float
    gender: str
    area_id: str
    values: Mapping[str, object]
    sampling_weight: float = 1.0
    row: int = -1


@dataclass(frozen=True)
class Dataset:
    """Immutable collection of unit records plus area bookkeeping."""

    records: tuple[UnitRecord, ...]
    schema: VariableSchema
    areas: tuple[str, ...]
    per_area_counts: Mapping[tuple[str, str], int] = field(default_factory=dict)

    @classmethod
    def from_records(
        cls,
        records: Iterable[UnitRecord],
        schema: VariableSchema,
        areas: Iterable[str] | None = None,
    ) -> "Dataset":
        records = tuple(records)
        if areas is None:
            areas = tuple(sorted({r.area_id for r in records}))
        else:
            areas = tuple(areas)
            known = set(areas)
            for r in records:
                if r.area_id not in known:
                    raise DataError(f"record row {r.row}: area {r.area_id!r} not in area list")
        counts: dict[tuple[str, str], int] = {}
        for r in records:
            key = (r.gender, r.area_id)
            counts[key] = counts.get(key, 0) + 1
        return cls(records, schema, areas, counts)

    def count(self, gender: str, area: str) -> int:
        return self.per_area_counts.get((gender, area), 0)

    def n(self, gender: str | None = None) -> int:
        if gender is None:
            return len(self.records)
        return sum(1 for r in self.records if r.gender == gender)

    def subset(self, indices: Iterable[int]) -> "Dataset":
        recs = tuple(self.records[i] for i in indices)
        ds = Dataset.from_records(recs, self.schema, self.areas)
        return ds

    def write_csv(self, path) -> None:
        """Write the dataset back in its on-disk format (exact round trip)."""
        schema = self.schema
        names = [v.name for v in schema.variables]
        men_label, women_label = schema.gender.categories
        with open(path, "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(names)
            for r in self.records:
                row = []
                for v in schema.variables:
                    if v.role == "response":
                        row.append(repr(r.wage_per_hour))
                    elif v.role == "gender":
                        row.append(men_label if r.gender == MEN else women_label)
                    elif v.role == "area":
                        row.append(r.area_id)
                    elif v.role == "weight":
                        row.append(repr(r.sampling_weight))
                    else:
                        val = r.values[v.name]
                        row.append(repr(val) if isinstance(val, float) else str(val))
                writer.writerow(row)


def load_dataset(path, schema: VariableSchema) -> Dataset:
    """Load a CSV file against a schema.

    Rows are validated one by one; every problem is reported with its row
    number (header is row 1, first data row is row 2). Raises DataError
    listing up to the first 50 problems.
    """
    problems: list[str] = []
    records: list[UnitRecord] = []
    men_label, women_label = schema.gender.categories
    weight_var = schema.weight
    area_cats = set(schema.area.categories)

    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        required = [v.name for v in schema.variables if v.role != "weight"]
        missing = [name for name in required if name not in header]
        if weight_var is not None and weight_var.name not in header:
            weight_var = None  # weight column absent: default weight 1.0
        if missing:
            raise DataError([f"missing column(s): {', '.join(missing)}"])

        for lineno, raw in enumerate(reader, start=2):
            row_problems: list[str] = []

            def fail(msg: str) -> None:
                row_problems.append(f"row {lineno}: {msg}")

            wage = _parse_float(raw[schema.response.name], schema.response.name, fail)
            if wage is not None and wage <= 0:
                fail(f"non-positive wage {wage!r}")
                wage = None

            glabel = raw[schema.gender.name]
            if glabel == men_label:
                gender = MEN
            elif glabel == women_label:
                gender = WOMEN
            else:
                fail(f"unknown category {glabel!r} for variable {schema.gender.name!r}")
                gender = None

            area = raw[schema.area.name]
            if area_cats and area not in area_cats:
                fail(f"unknown category {area!r} for variable {schema.area.name!r}")

            weight = 1.0
            if weight_var is not None:
                weight = _parse_float(raw[weight_var.name], weight_var.name, fail)
                if weight is not None and weight <= 0:
                    fail(f"non-positive sampling weight {weight!r}")

            values: dict[str, object] = {}
            for v in schema.explanatory:
                cell = raw.get(v.name)
                if cell is None or cell == "":
                    fail(f"missing value for {v.name!r}")
                    continue
                if v.kind == "continuous":
                    parsed = _parse_float(cell, v.name, fail)
                    if parsed is not None:
                        values[v.name] = parsed
                else:
                    if cell not in v.categories:
                        fail(f"unknown category {cell!r} for variable {v.name!r}")
                    else:
                        values[v.name] = cell

            if row_problems:
                problems.extend(row_problems)
                if len(problems) >= _MAX_PROBLEMS:
                    break
                continue

            records.append(
                UnitRecord(
                    wage_per_hour=wage,
                    log_wage=math.log(wage),
                    gender=gender,
                    area_id=area,
                    values=values,
                    sampling_weight=weight if weight is not None else 1.0,
                    row=lineno,
                )
            )

    if problems:
        raise DataError(problems[:_MAX_PROBLEMS])

    areas = tuple(sorted(schema.area.categories)) if area_cats else None
    return Dataset.from_records(records, schema, areas)


def _parse_float(cell, name, fail):
    try:
        return float(cell)
    except (TypeError, ValueError):
        fail(f"unparseable value {cell!r} for variable {name!r}")
        return None
