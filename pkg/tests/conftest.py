"""Shared builders for synthetic datasets used across the test suite."""

import numpy as np
import pytest

from paygap.data import MEN, WOMEN, Dataset, UnitRecord, Variable, VariableSchema
from paygap.design import ModelSpec


def basic_schema(*, with_weight: bool = False, categorical: bool = False) -> VariableSchema:
    """wage + gender + area + one continuous covariate (optionally more)."""
    variables = [
        Variable("wage", "continuous", "response"),
        Variable("sex", "categorical", "gender", categories=("men", "women")),
        Variable("activity", "categorical", "area"),
        Variable("exper", "continuous", "explanatory"),
    ]
    if categorical:
        variables.append(
            Variable(
                "edu",
                "categorical",
                "explanatory",
                categories=("low", "mid", "high"),
                reference="low",
            )
        )
    if with_weight:
        variables.append(Variable("w", "continuous", "weight"))
    return VariableSchema(tuple(variables))


def make_dataset(
    rng: np.random.Generator,
    *,
    areas: int = 4,
    n_men: int = 12,
    n_women: int = 10,
    schema: VariableSchema | None = None,
    weights: bool = False,
) -> Dataset:
    """Random dataset with log wages drawn from a simple linear model."""
    if schema is None:
        schema = basic_schema(with_weight=weights, categorical=False)
    has_edu = any(v.name == "edu" for v in schema.variables)
    records = []
    row = 0
    for d in range(areas):
        area = f"a{d:02d}"
        effect = rng.normal(0.0, 0.2)
        for gender, count, slope in ((MEN, n_men, 0.03), (WOMEN, n_women, 0.025)):
            for _ in range(count):
                exper = float(rng.gamma(2.0, 5.0))
                values: dict = {"exper": exper}
                mean = 2.0 + slope * exper + effect
                if has_edu:
                    edu = rng.choice(["low", "mid", "high"])
                    values["edu"] = str(edu)
                    mean += {"low": 0.0, "mid": 0.1, "high": 0.25}[str(edu)]
                log_wage = mean + rng.normal(0.0, 0.3)
                weight = float(rng.uniform(0.5, 2.0)) if weights else 1.0
                records.append(
                    UnitRecord(
                        wage_per_hour=float(np.exp(log_wage)),
                        log_wage=float(log_wage),
                        gender=gender,
                        area_id=area,
                        values=values,
                        sampling_weight=weight,
                        row=row,
                    )
                )
                row += 1
    return Dataset.from_records(records, schema)


def intercept_spec(label: str = "ri") -> ModelSpec:
    """Random-intercept model on the continuous covariate."""
    return ModelSpec(label, ("exper",), ("intercept",))


def fixed_spec(label: str = "fx") -> ModelSpec:
    return ModelSpec(label, ("exper",), ())


@pytest.fixture
def rng():
    return np.random.default_rng(20260826)


@pytest.fixture
def small_dataset(rng):
    return make_dataset(rng)
