"""Model declarations and design-matrix construction.

Fixed-effect matrices always carry an explicit leading intercept column.
Categorical variables are dummy coded against their declared reference
category. Rows are grouped by area in the dataset's (sorted) area order,
keeping the original record order within each area.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from typing import Iterable, Mapping

import numpy as np

from .data import GENDERS, Dataset, Variable
from .errors import ConfigError, DesignError

INTERCEPT = "intercept"


@dataclass(frozen=True)
class ModelSpec:
    """A candidate model: fixed-effect variables plus per-area random terms.

    Random terms are grouped by area. Each term is either ``"intercept"``
    (a random area intercept) or the name of an explanatory variable: a
    continuous name gives a random slope, a categorical name one random
    component per non-reference category.
    """

    label: str
    fixed_vars: tuple[str, ...]
    random_terms: tuple[str, ...] = ()

    def drop(self, names: Iterable[str]) -> "ModelSpec":
        """Remove variables from the model (omitted-variable scenario).

        A dropped variable disappears from the fixed part; a random slope
        on a dropped variable collapses to a plain area intercept (the
        variable is no longer observed, but the area grouping remains).
        """
        names = set(names)
        random: list[str] = []
        for term in self.random_terms:
            kept = INTERCEPT if term in names else term
            if kept not in random:
                random.append(kept)
        return replace(
            self,
            fixed_vars=tuple(v for v in self.fixed_vars if v not in names),
            random_terms=tuple(random),
        )

    def to_json(self) -> dict:
        return {
            "label": self.label,
            "fixed": list(self.fixed_vars),
            "random": list(self.random_terms),
        }

    @classmethod
    def from_json(cls, doc: Mapping) -> "ModelSpec":
        try:
            return cls(
                label=doc["label"],
                fixed_vars=tuple(doc["fixed"]),
                random_terms=tuple(doc.get("random", ())),
            )
        except (KeyError, TypeError) as exc:
            raise ConfigError(f"malformed model entry {doc!r}: {exc}") from exc


def load_model_specs(path) -> list[ModelSpec]:
    with open(path, "r", encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"model file {path}: {exc}") from exc
    if not isinstance(doc, dict) or "models" not in doc:
        raise ConfigError(f"model file {path}: expected an object with a 'models' list")
    specs = [ModelSpec.from_json(entry) for entry in doc["models"]]
    labels = [s.label for s in specs]
    if len(set(labels)) != len(labels):
        raise ConfigError(f"model file {path}: duplicate labels")
    return specs


@dataclass(frozen=True)
class DesignMatrices:
    """Encoded matrices for one gender, grouped by area.

    ``areas`` lists only areas with at least one record of this gender, in
    the dataset's area order; rows of ``X``/``Z``/``y``/``w`` are contiguous
    per area with boundaries in ``area_starts`` (length D+1).
    """

    spec: ModelSpec
    gender: str
    areas: tuple[str, ...]
    area_starts: np.ndarray
    X: np.ndarray
    Z: np.ndarray
    y: np.ndarray
    w: np.ndarray
    x_names: tuple[str, ...]
    z_names: tuple[str, ...]

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def p(self) -> int:
        return self.X.shape[1]

    @property
    def q(self) -> int:
        return self.Z.shape[1]

    @property
    def n_areas(self) -> int:
        return len(self.areas)

    def area_slice(self, d: int) -> slice:
        return slice(int(self.area_starts[d]), int(self.area_starts[d + 1]))

    def area_index(self) -> np.ndarray:
        """Per-row index into ``areas``."""
        out = np.empty(self.n, dtype=np.intp)
        for d in range(self.n_areas):
            out[self.area_slice(d)] = d
        return out

    def with_response(self, y: np.ndarray) -> "DesignMatrices":
        y = np.asarray(y, dtype=float)
        if y.shape != self.y.shape:
            raise DesignError(f"response length {y.shape} does not match design ({self.y.shape})")
        y = y.copy()
        y.flags.writeable = False
        return replace(self, y=y)


def _columns_for(ds: Dataset, var_name: str) -> tuple[Variable, tuple[str, ...], str | None]:
    """Resolve a variable name to (variable, category list, reference)."""
    schema = ds.schema
    try:
        var = schema.variable(var_name)
    except KeyError:
        raise DesignError(f"model references unknown variable {var_name!r}") from None
    if var.role == "area":
        # area used as a fixed categorical: categories are the dataset areas,
        # reference is the first area in sorted order
        return var, ds.areas, ds.areas[0]
    if var.role != "explanatory":
        raise DesignError(f"variable {var_name!r} has role {var.role!r}, not usable in a model")
    if var.kind == "continuous":
        return var, (), None
    return var, var.categories, schema.reference_of(var)


def _encode_var(ds: Dataset, records, var_name: str) -> tuple[np.ndarray, list[str]]:
    var, categories, reference = _columns_for(ds, var_name)
    n = len(records)
    if var.kind == "continuous":
        col = np.fromiter((r.values[var.name] for r in records), dtype=float, count=n)
        return col[:, None], [var.name]
    levels = [c for c in categories if c != reference]
    cols = np.zeros((n, len(levels)), dtype=float)
    pos = {c: j for j, c in enumerate(levels)}
    if var.role == "area":
        for i, r in enumerate(records):
            j = pos.get(r.area_id)
            if j is not None:
                cols[i, j] = 1.0
    else:
        for i, r in enumerate(records):
            j = pos.get(r.values[var.name])
            if j is not None:
                cols[i, j] = 1.0
    names = [f"{var.name}={c}" for c in levels]
    return cols, names


def encode_design(ds: Dataset, spec: ModelSpec, gender: str) -> DesignMatrices:
    """Build (X, Z, y, w) for one gender, grouped by dataset area order."""
    if gender not in GENDERS:
        raise DesignError(f"unknown gender {gender!r}")
    for name in (*spec.fixed_vars, *(t for t in spec.random_terms if t != INTERCEPT)):
        _columns_for(ds, name)  # raises DesignError on unknown variables

    order: list[int] = []
    starts = [0]
    areas: list[str] = []
    by_area: dict[str, list[int]] = {a: [] for a in ds.areas}
    for i, r in enumerate(ds.records):
        if r.gender == gender:
            by_area[r.area_id].append(i)
    for a in ds.areas:
        idx = by_area[a]
        if idx:
            areas.append(a)
            order.extend(idx)
            starts.append(len(order))
    if not order:
        raise DesignError(f"no records for gender {gender!r}")

    records = [ds.records[i] for i in order]
    n = len(records)

    x_blocks = [np.ones((n, 1))]
    x_names: list[str] = [INTERCEPT]
    for name in spec.fixed_vars:
        cols, names = _encode_var(ds, records, name)
        x_blocks.append(cols)
        x_names.extend(names)

    z_blocks = []
    z_names: list[str] = []
    for term in spec.random_terms:
        if term == INTERCEPT:
            z_blocks.append(np.ones((n, 1)))
            z_names.append(INTERCEPT)
        else:
            cols, names = _encode_var(ds, records, term)
            z_blocks.append(cols)
            z_names.extend(names)

    X = np.hstack(x_blocks)
    Z = np.hstack(z_blocks) if z_blocks else np.zeros((n, 0))
    y = np.fromiter((r.log_wage for r in records), dtype=float, count=n)
    w = np.fromiter((r.sampling_weight for r in records), dtype=float, count=n)
    area_starts = np.asarray(starts, dtype=np.intp)
    for arr in (X, Z, y, w, area_starts):
        arr.flags.writeable = False
    return DesignMatrices(
        spec=spec,
        gender=gender,
        areas=tuple(areas),
        area_starts=area_starts,
        X=X,
        Z=Z,
        y=y,
        w=w,
        x_names=tuple(x_names),
        z_names=tuple(z_names),
    )


@dataclass(frozen=True)
class GroupMeans:
    """Per-(gender, area) means of design rows; empty cells carry NaN."""

    areas: tuple[str, ...]
    x_names: tuple[str, ...]
    z_names: tuple[str, ...]
    xbar: Mapping[str, np.ndarray]  # gender -> (D, p)
    zbar: Mapping[str, np.ndarray]  # gender -> (D, q)
    ybar: Mapping[str, np.ndarray]  # gender -> (D,)
    counts: Mapping[str, np.ndarray]  # gender -> (D,) ints

    def has_cell(self, gender: str, area: str) -> bool:
        return bool(self.counts[gender][self.areas.index(area)] > 0)

    def cell(self, gender: str, area: str) -> tuple[np.ndarray, np.ndarray, float, int]:
        d = self.areas.index(area)
        return (
            self.xbar[gender][d],
            self.zbar[gender][d],
            float(self.ybar[gender][d]),
            int(self.counts[gender][d]),
        )


def group_means(ds: Dataset, spec: ModelSpec) -> GroupMeans:
    """Arithmetic means of encoded design rows per (gender, area) cell."""
    designs = {g: encode_design(ds, spec, g) for g in GENDERS}
    ref = designs[GENDERS[0]]
    D = len(ds.areas)
    pos = {a: d for d, a in enumerate(ds.areas)}
    xbar: dict[str, np.ndarray] = {}
    zbar: dict[str, np.ndarray] = {}
    ybar: dict[str, np.ndarray] = {}
    counts: dict[str, np.ndarray] = {}
    for g, dm in designs.items():
        xb = np.full((D, dm.p), np.nan)
        zb = np.full((D, dm.q), np.nan)
        yb = np.full(D, np.nan)
        ct = np.zeros(D, dtype=int)
        for d, area in enumerate(dm.areas):
            sl = dm.area_slice(d)
            k = pos[area]
            xb[k] = dm.X[sl].mean(axis=0)
            zb[k] = dm.Z[sl].mean(axis=0) if dm.q else np.zeros(0)
            yb[k] = dm.y[sl].mean()
            ct[k] = sl.stop - sl.start
        xbar[g], zbar[g], ybar[g], counts[g] = xb, zb, yb, ct
    return GroupMeans(
        areas=ds.areas,
        x_names=ref.x_names,
        z_names=ref.z_names,
        xbar=xbar,
        zbar=zbar,
        ybar=ybar,
        counts=counts,
    )
