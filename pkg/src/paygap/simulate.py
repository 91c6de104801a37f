"""Synthetic-data experiment harness.

Generates unit-level wage data from an area-heterogeneous fixed-effect
model (per-area, per-gender coefficient vectors over seven encoded
covariates; Gaussian log-scale noise), computes population truth values
for the gap components, and evaluates the estimator grid (pooled
two-regression baseline "OB", candidates "MS1".."MS8", and the
score-selected model "XG") by empirical MSE and interval coverage.

The true coefficient set is frozen in ``data/sim_coefficients.json``:
per-area heterogeneity lives in the occupation coefficients, while the
gender gap comes from a returns gap on higher education plus uniformly
lower occupation coefficients for women. Education composition is
gender-symmetric within each area but varies across areas on a scrambled
grid, so its contribution to the unexplained component is carried by the
areas rather than by a pooled regression's coefficients.
"""

from __future__ import annotations

import json
import math
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from importlib import resources
from typing import Mapping, Sequence

import numpy as np

from .data import Dataset, MEN, UnitRecord, Variable, VariableSchema, WOMEN
from .decompose import GLOBAL, decompose_gpg
from .design import ModelSpec
from .errors import PaygapError
from .selection import select_model

EDUCATION_LEVELS = ("primary", "secondary", "higher")
OCCUPATION_LEVELS = ("professional", "technic", "operators", "services", "non_skilled")

OB_LABEL = "OB"
SELECTED_LABEL = "XG"

_GENDER_INDEX = {MEN: 0, WOMEN: 1}


def area_ids(D: int) -> tuple[str, ...]:
    return tuple(f"area_{d:02d}" for d in range(D))


def _n_agg_groups(D: int) -> int:
    return max(2, round(D / 3))


def agg_group(d: int, D: int) -> str:
    return f"group_{d * _n_agg_groups(D) // D:02d}"


@dataclass(frozen=True)
class GeneratorConfig:
    """Everything needed to draw one synthetic dataset."""

    areas: tuple[str, ...]
    n_men: tuple[int, ...]
    n_women: tuple[int, ...]
    beta_men: np.ndarray  # (D, 7)
    beta_women: np.ndarray  # (D, 7)
    sigma2: float
    seed: int

    def __post_init__(self):
        D = len(self.areas)
        if not (len(self.n_men) == len(self.n_women) == D):
            raise ValueError("per-area size lists must match the area list")
        if min(*self.n_men, *self.n_women) < 1:
            raise ValueError("per-area sizes must be at least 1")
        if not self.sigma2 > 0:
            raise ValueError("noise variance must be positive")
        if self.beta_men.shape != (D, 7) or self.beta_women.shape != (D, 7):
            raise ValueError("coefficient arrays must have shape (D, 7)")

    @property
    def D(self) -> int:
        return len(self.areas)

    def schema(self) -> VariableSchema:
        D = self.D
        groups = tuple(dict.fromkeys(agg_group(d, D) for d in range(D)))
        return VariableSchema(
            (
                Variable("wage", "continuous", "response"),
                Variable("gender", "categorical", "gender", ("men", "women")),
                Variable("activity", "categorical", "area", self.areas),
                Variable("experience", "continuous", "explanatory"),
                Variable(
                    "education", "categorical", "explanatory", EDUCATION_LEVELS, "primary"
                ),
                Variable(
                    "occupation",
                    "categorical",
                    "explanatory",
                    OCCUPATION_LEVELS,
                    "professional",
                ),
                Variable("agg_activity", "categorical", "explanatory", groups, groups[0]),
            )
        )


def default_generator_config(D: int = 30, seed: int = 20260826) -> GeneratorConfig:
    """Slice the frozen coefficient set down to the first D areas."""
    doc = json.loads(
        resources.files("paygap").joinpath("data/sim_coefficients.json").read_text()
    )
    max_d = len(doc["men"])
    if not 2 <= D <= max_d:
        raise ValueError(f"D must be between 2 and {max_d}")
    return GeneratorConfig(
        areas=area_ids(D),
        n_men=tuple(doc["n_men"][:D]),
        n_women=tuple(doc["n_women"][:D]),
        beta_men=np.asarray(doc["men"][:D], dtype=float),
        beta_women=np.asarray(doc["women"][:D], dtype=float),
        sigma2=float(doc["sigma2"]),
        seed=seed,
    )


def _edu_mix(d: int, D: int) -> float:
    """Area-specific education-mix location, deliberately not aligned with
    the smooth cross-area gradient ``t`` (7 is coprime with the area counts
    used here, so this is a scrambled permutation of the same grid)."""
    return ((7 * d) % D) / (D - 1) if D > 1 else 0.0


def _education_probs(s: float, gender: str) -> np.ndarray:
    higher = 0.10 + 0.50 * s
    secondary = 0.45 - 0.10 * s
    return np.array([1.0 - higher - secondary, secondary, higher])


def _occupation_probs(t: float, gender: str) -> np.ndarray:
    if gender == MEN:
        prof = 0.15 + 0.20 * t
        probs = np.array([prof, 0.20, 0.30 - 0.10 * t, 0.15, 0.0])
    else:
        prof = 0.12 + 0.05 * t
        probs = np.array([prof, 0.15, 0.10, 0.35, 0.0])
    probs[-1] = 1.0 - probs[:-1].sum()
    return probs


def _draw_cell(
    rng: np.random.Generator, n: int, t: float, s: float, gender: str
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Draw covariates for one (area, gender) cell.

    ``t`` drives the smooth cross-area occupation gradient and ``s`` the
    scrambled education mix. Returns (experience, education index,
    occupation index).
    """
    exp = rng.gamma(shape=2.0, scale=5.5, size=n)
    edu = rng.choice(len(EDUCATION_LEVELS), size=n, p=_education_probs(s, gender))
    occ = rng.choice(len(OCCUPATION_LEVELS), size=n, p=_occupation_probs(t, gender))
    return exp, edu, occ


def _encode7(exp: np.ndarray, edu: np.ndarray, occ: np.ndarray) -> np.ndarray:
    """Encode drawn covariates into the generator's 7-column layout."""
    n = exp.shape[0]
    X = np.zeros((n, 7))
    X[:, 0] = exp
    for j in (1, 2):  # education dummies, reference = primary
        X[:, j] = edu == j
    for j in range(1, 5):  # occupation dummies, reference = professional
        X[:, 2 + j] = occ == j
    return X


def generate(cfg: GeneratorConfig, replicate: int) -> Dataset:
    """Draw one synthetic dataset; deterministic given (cfg.seed, replicate)."""
    D = cfg.D
    records: list[UnitRecord] = []
    for d, area in enumerate(cfg.areas):
        t = d / (D - 1) if D > 1 else 0.0
        s = _edu_mix(d, D)
        group = agg_group(d, D)
        for gender, n, beta in (
            (MEN, cfg.n_men[d], cfg.beta_men[d]),
            (WOMEN, cfg.n_women[d], cfg.beta_women[d]),
        ):
            rng = np.random.default_rng(
                [cfg.seed, replicate, d, _GENDER_INDEX[gender]]
            )
            exp, edu, occ = _draw_cell(rng, n, t, s, gender)
            X = _encode7(exp, edu, occ)
            y = X @ beta + rng.normal(size=n) * math.sqrt(cfg.sigma2)
            for i in range(n):
                records.append(
                    UnitRecord(
                        wage_per_hour=float(np.exp(y[i])),
                        log_wage=float(y[i]),
                        gender=gender,
                        area_id=area,
                        values={
                            "experience": float(exp[i]),
                            "education": EDUCATION_LEVELS[edu[i]],
                            "occupation": OCCUPATION_LEVELS[occ[i]],
                            "agg_activity": group,
                        },
                    )
                )
    return Dataset.from_records(records, cfg.schema(), cfg.areas)


@dataclass(frozen=True)
class TruthTable:
    """Population gap components per area, treated as the true values."""

    areas: tuple[str, ...]
    gpg: np.ndarray
    gpg_q: np.ndarray
    gpg_u: np.ndarray

    def __post_init__(self):
        if not np.allclose(self.gpg_q + self.gpg_u, self.gpg, atol=1e-10):
            raise ValueError("truth components must add up to the total gap")


def compute_truth(
    cfg: GeneratorConfig, population_size: int = 100_000, seed: int = 0
) -> TruthTable:
    """Monte Carlo population truth from the generating model.

    Simulates a large population per (area, gender) cell; the explained
    part prices the population covariate-mean difference at the men's true
    coefficients (no random effects enter the truth).
    """
    if population_size < 100_000:
        raise ValueError("population_size must be at least 100000 per cell")
    D = cfg.D
    gap = np.empty(D)
    gap_q = np.empty(D)
    gap_u = np.empty(D)
    for d in range(D):
        t = d / (D - 1) if D > 1 else 0.0
        s = _edu_mix(d, D)
        stats = {}
        for gender, beta in ((MEN, cfg.beta_men[d]), (WOMEN, cfg.beta_women[d])):
            rng = np.random.default_rng(
                [seed, cfg.seed, d, _GENDER_INDEX[gender]]
            )
            X = _encode7(*_draw_cell(rng, population_size, t, s, gender))
            lin = X @ beta
            y = lin + rng.normal(size=population_size) * math.sqrt(cfg.sigma2)
            stats[gender] = (X.mean(axis=0), float(lin.mean()), float(np.exp(y).mean()))
        xm, mu_m, ew_m = stats[MEN]
        xw, mu_w, ew_w = stats[WOMEN]
        delta = mu_m - mu_w
        q = float((xm - xw) @ cfg.beta_men[d])
        g = (ew_m - ew_w) / ew_m
        gap[d] = g
        gap_q[d] = g * q / delta
        gap_u[d] = g * (delta - q) / delta
    return TruthTable(cfg.areas, gap, gap_q, gap_u)


def default_candidates(drop: Sequence[str] = ()) -> list[ModelSpec]:
    """The simulation candidate grid (mixed and fixed-effect variants)."""
    core = ("experience", "education", "occupation")
    with_agg = (*core, "agg_activity")
    with_area = (*core, "activity")
    grid = [
        ModelSpec("MS1", core, ("intercept",)),
        ModelSpec("MS2", core, ("experience",)),
        ModelSpec("MS3", core, ("intercept", "experience")),
        ModelSpec("MS4", core, ("education",)),
        ModelSpec("MS5", core, ("occupation",)),
        ModelSpec("MS6", with_agg, ()),
        ModelSpec("MS7", with_area, ()),
        ModelSpec("MS8", with_area, ("experience",)),
    ]
    return [spec.drop(drop) for spec in grid] if drop else grid


def ob_spec(drop: Sequence[str] = ()) -> ModelSpec:
    core = tuple(v for v in ("experience", "education", "occupation") if v not in drop)
    return ModelSpec(OB_LABEL, core, ())


def emse(estimates: np.ndarray, truth: np.ndarray) -> float:
    """Mean over areas of the mean squared error across replicates.

    NaN estimates (unstable areas) are excluded cell-wise.
    """
    estimates = np.asarray(estimates, dtype=float)
    truth = np.asarray(truth, dtype=float)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        per_area = np.nanmean((estimates - truth[None, :]) ** 2, axis=0)
        return float(np.nanmean(per_area))


def coverage(lo: np.ndarray, hi: np.ndarray, truth: np.ndarray) -> float:
    """Percentage of (replicate, area) intervals containing the truth."""
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    hit = (lo <= truth[None, :]) & (truth[None, :] <= hi)
    valid = ~(np.isnan(lo) | np.isnan(hi))
    return 100.0 * float(hit[valid].mean())


@dataclass(frozen=True)
class ExperimentResult:
    estimators: tuple[str, ...]
    emse_q: Mapping[str, float]
    emse_u: Mapping[str, float]
    coverage_q: Mapping[str, float]
    coverage_u: Mapping[str, float]
    selection_counts: Mapping[str, int]
    replicates: int
    failures: int
    truth: TruthTable

    def to_json(self) -> dict:
        return {
            "estimators": list(self.estimators),
            "emse_q": dict(self.emse_q),
            "emse_u": dict(self.emse_u),
            "coverage_q": dict(self.coverage_q),
            "coverage_u": dict(self.coverage_u),
            "selection_counts": dict(self.selection_counts),
            "replicates": self.replicates,
            "failures": self.failures,
        }


def _replicate_task(args) -> dict | None:
    (cfg, candidates, ob, rep, seed, iterations, sel_reps, alpha, wanted) = args
    try:
        ds = generate(cfg, rep)
        sel = select_model(
            ds, candidates, reps=sel_reps, seed=_derive(seed, rep, 0)
        )
        out: dict = {"selected": sel.winner, "rows": {}}
        # seeds are derived from the position in the full grid so a
        # restricted estimator list reproduces the full run's numbers
        for j, spec in enumerate([ob, *candidates]):
            if wanted is not None:
                needed = spec.label in wanted or (
                    SELECTED_LABEL in wanted and spec.label == sel.winner
                )
                if not needed:
                    continue
            res = decompose_gpg(
                ds,
                spec,
                iterations=iterations,
                seed=_derive(seed, rep, 1 + j),
                alpha=alpha,
            )
            by_area = {e.area: e for e in res.estimates if e.area != GLOBAL}
            D = cfg.D
            row = np.full((6, D), np.nan)
            for d, area in enumerate(cfg.areas):
                e = by_area.get(area)
                if e is None or e.unstable:
                    continue
                row[:, d] = (
                    e.gpg_q, e.gpg_u, e.ci_q[0], e.ci_q[1], e.ci_u[0], e.ci_u[1]
                )
            out["rows"][spec.label] = row
        return out
    except PaygapError as exc:
        warnings.warn(f"replicate {rep} failed: {exc}", RuntimeWarning, stacklevel=2)
        return None


def _derive(seed: int, *path: int) -> int:
    return int(np.random.SeedSequence([seed, *path]).generate_state(1)[0])


def run_experiment(
    cfg: GeneratorConfig,
    candidates: list[ModelSpec] | None = None,
    replicates: int = 100,
    seed: int = 1,
    *,
    iterations: int = 50,
    selection_reps: int = 50,
    alpha: float = 0.05,
    drop: Sequence[str] = (),
    threads: int | None = None,
    truth_population: int = 100_000,
    truth: TruthTable | None = None,
    estimators: Sequence[str] | None = None,
) -> ExperimentResult:
    """Run the full estimator grid over generated replicates.

    ``drop`` removes fixed-effect variables from every working model (the
    omitted-variable scenario); the generating model and the truth are
    unaffected. Results are reduced in replicate order, so the outcome does
    not depend on ``threads``. Aborts if more than 10% of replicates fail.

    ``estimators`` restricts the output rows (and the per-replicate
    decomposition work) to the given labels; the default is the full grid.
    Rows shared between a restricted and a full run are identical because
    per-estimator seeds come from the position in the full grid.
    """
    if replicates < 1:
        raise ValueError("need at least one replicate")
    if candidates is None:
        candidates = default_candidates(drop)
    elif drop:
        candidates = [spec.drop(drop) for spec in candidates]
    ob = ob_spec(drop)
    if truth is None:
        truth = compute_truth(cfg, truth_population, seed=0)

    all_labels = [OB_LABEL, *[c.label for c in candidates], SELECTED_LABEL]
    if estimators is not None:
        unknown = [lab for lab in estimators if lab not in all_labels]
        if unknown:
            raise ValueError(f"unknown estimator labels: {unknown}")
        wanted = frozenset(estimators)
    else:
        wanted = None

    tasks = [
        (cfg, candidates, ob, rep, seed, iterations, selection_reps, alpha, wanted)
        for rep in range(replicates)
    ]
    if threads is not None and threads > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(_replicate_task, tasks))
    else:
        results = [_replicate_task(t) for t in tasks]

    failures = sum(1 for r in results if r is None)
    if failures > 0.1 * replicates:
        raise PaygapError(f"{failures}/{replicates} replicates failed")
    results = [r for r in results if r is not None]

    labels = [
        lab for lab in all_labels if wanted is None or lab in wanted
    ]
    stacks: dict[str, list[np.ndarray]] = {lab: [] for lab in labels}
    counts: dict[str, int] = {c.label: 0 for c in candidates}
    for r in results:
        counts[r["selected"]] = counts.get(r["selected"], 0) + 1
        for lab in labels:
            if lab == SELECTED_LABEL:
                stacks[lab].append(r["rows"][r["selected"]])
            else:
                stacks[lab].append(r["rows"][lab])

    emse_q: dict[str, float] = {}
    emse_u: dict[str, float] = {}
    cov_q: dict[str, float] = {}
    cov_u: dict[str, float] = {}
    for lab in labels:
        rows = np.stack(stacks[lab])  # (R, 6, D)
        emse_q[lab] = emse(rows[:, 0, :], truth.gpg_q)
        emse_u[lab] = emse(rows[:, 1, :], truth.gpg_u)
        cov_q[lab] = coverage(rows[:, 2, :], rows[:, 3, :], truth.gpg_q)
        cov_u[lab] = coverage(rows[:, 4, :], rows[:, 5, :], truth.gpg_u)

    return ExperimentResult(
        estimators=tuple(labels),
        emse_q=emse_q,
        emse_u=emse_u,
        coverage_q=cov_q,
        coverage_u=cov_u,
        selection_counts=counts,
        replicates=replicates,
        failures=failures,
        truth=truth,
    )
