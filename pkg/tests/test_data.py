"""Ingestion: schema validation, CSV loading, round trips, error reporting."""

import json

import numpy as np
import pytest

from paygap.data import (
    MEN,
    WOMEN,
    Dataset,
    Variable,
    VariableSchema,
    load_dataset,
)
from paygap.errors import DataError, SchemaError

from conftest import basic_schema, make_dataset


def test_schema_roundtrip(tmp_path):
    schema = basic_schema(with_weight=True, categorical=True)
    path = tmp_path / "schema.json"
    path.write_text(json.dumps(schema.to_json()))
    again = VariableSchema.from_file(path)
    assert again == schema


def test_schema_requires_single_response():
    with pytest.raises(SchemaError):
        VariableSchema(
            (
                Variable("sex", "categorical", "gender", categories=("men", "women")),
                Variable("act", "categorical", "area"),
            )
        )


def test_schema_gender_needs_two_categories():
    with pytest.raises(SchemaError):
        VariableSchema(
            (
                Variable("wage", "continuous", "response"),
                Variable("sex", "categorical", "gender", categories=("men",)),
                Variable("act", "categorical", "area"),
            )
        )


def test_schema_reference_must_be_a_category():
    with pytest.raises(SchemaError):
        VariableSchema(
            (
                Variable("wage", "continuous", "response"),
                Variable("sex", "categorical", "gender", categories=("men", "women")),
                Variable("act", "categorical", "area"),
                Variable(
                    "edu",
                    "categorical",
                    "explanatory",
                    categories=("a", "b"),
                    reference="c",
                ),
            )
        )


def test_load_dataset_roundtrip(tmp_path, rng):
    ds = make_dataset(rng, areas=3, n_men=5, n_women=4, weights=True,
                      schema=basic_schema(with_weight=True, categorical=True))
    path = tmp_path / "data.csv"
    ds.write_csv(path)
    again = load_dataset(path, ds.schema)
    assert again.areas == ds.areas
    assert again.n() == ds.n()
    for a, b in zip(again.records, ds.records):
        assert a.log_wage == b.log_wage  # exact: repr round trip
        assert a.sampling_weight == b.sampling_weight
        assert a.values == b.values


def test_load_dataset_reports_all_problems(tmp_path):
    schema = basic_schema()
    path = tmp_path / "bad.csv"
    path.write_text(
        "wage,sex,activity,exper\n"
        "10.0,men,a01,5.0\n"
        "-3.0,men,a01,5.0\n"  # non-positive wage
        "8.0,other,a01,5.0\n"  # unknown gender
        "7.0,women,a01,notanumber\n"  # unparseable number
    )
    with pytest.raises(DataError) as err:
        load_dataset(path, schema)
    problems = err.value.problems
    assert len(problems) == 3
    assert any("row 3" in p for p in problems)
    assert any("row 4" in p for p in problems)
    assert any("row 5" in p for p in problems)


def test_load_dataset_missing_column(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("wage,sex,activity\n10.0,men,a01\n")
    with pytest.raises(DataError, match="exper"):
        load_dataset(path, basic_schema())


def test_weight_defaults_to_one(tmp_path):
    path = tmp_path / "data.csv"
    path.write_text("wage,sex,activity,exper\n10.0,men,a01,5.0\n")
    ds = load_dataset(path, basic_schema())
    assert ds.records[0].sampling_weight == 1.0


def test_log_wage_consistency(small_dataset):
    for r in small_dataset.records:
        assert r.log_wage == pytest.approx(np.log(r.wage_per_hour), abs=1e-12)


def test_counts_and_subset(small_dataset):
    ds = small_dataset
    assert ds.n() == ds.n(MEN) + ds.n(WOMEN)
    assert ds.count(MEN, ds.areas[0]) == 12
    assert ds.count(WOMEN, ds.areas[0]) == 10
    sub = ds.subset(range(5))
    assert sub.n() == 5
    assert sub.areas == ds.areas  # area list survives even when emptied


def test_areas_sorted_unique(small_dataset):
    assert list(small_dataset.areas) == sorted(set(small_dataset.areas))


def test_unknown_category_rejected(tmp_path):
    schema = basic_schema(categorical=True)
    path = tmp_path / "bad.csv"
    path.write_text(
        "wage,sex,activity,exper,edu\n10.0,men,a01,5.0,doctorate\n"
    )
    with pytest.raises(DataError, match="doctorate"):
        load_dataset(path, schema)


def test_from_records_rejects_unlisted_area(small_dataset):
    rec = small_dataset.records[0]
    with pytest.raises(DataError):
        Dataset.from_records([rec], small_dataset.schema, areas=("other",))
