"""Model selection by an AIC-type criterion over candidate mixed models.

The score combines a quasi-loglikelihood focused on area-level prediction
with a bootstrap-estimated generalized-degrees-of-freedom penalty:
score = -2 * quasi_loglik + gdf. The candidate with the lowest score wins;
selection runs on the gender with the larger sample size.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy import linalg as sla

from .data import MEN, WOMEN, Dataset
from .design import DesignMatrices, ModelSpec, encode_design
from .errors import FitError
from .lmm import (
    LOG_2PI,
    FittedLMM,
    fit_reml,
    predict_units,
    simulate_response,
    v_inverse_blocks,
)

#: hard cap on the tolerated fraction of failed bootstrap refits
_MAX_FAILURE_RATE = 0.10


@dataclass(frozen=True)
class CandidateScore:
    label: str
    quasi_loglik: float
    gdf: float
    score: float
    n_params: int


@dataclass(frozen=True)
class SelectionResult:
    candidates: tuple[CandidateScore, ...]
    winner: str
    gender: str
    bootstrap_reps: int
    seed: int
    failed: tuple[str, ...] = ()

    def to_json(self) -> dict:
        return {
            "winner": self.winner,
            "gender": self.gender,
            "bootstrap_reps": self.bootstrap_reps,
            "seed": self.seed,
            "failed": list(self.failed),
            "candidates": [
                {
                    "label": c.label,
                    "quasi_loglik": c.quasi_loglik,
                    "gdf": c.gdf,
                    "score": c.score,
                    "n_params": c.n_params,
                }
                for c in self.candidates
            ],
        }


def quasi_loglikelihood(fit: FittedLMM, design: DesignMatrices) -> float:
    """Gaussian quasi-loglikelihood at the conditional means.

    Evaluates -(1/2) [ D log 2pi + log|V| + (y - mu)' V^-1 (y - mu) ] with
    V block diagonal in the fitted per-area blocks and mu the conditional
    means at the estimated fixed and random effects. The leading constant
    is D (the number of areas), not n.
    """
    if fit.areas != design.areas:
        raise FitError("fit and design areas do not match")
    sizes = tuple(V.shape[0] for V in fit.per_area_V)
    want = tuple(
        design.area_slice(d).stop - design.area_slice(d).start
        for d in range(design.n_areas)
    )
    if sizes != want:
        raise FitError("fit and design block sizes do not match")
    mu = predict_units(fit, design)
    r = design.y - mu
    chols = v_inverse_blocks(fit)
    logdet = 0.0
    quad = 0.0
    for d, c in enumerate(chols):
        sl = design.area_slice(d)
        logdet += 2.0 * float(np.sum(np.log(np.diag(c[0]))))
        quad += float(r[sl] @ sla.cho_solve(c, r[sl]))
    D = design.n_areas
    return -0.5 * (D * LOG_2PI + logdet + quad)


def estimate_gdf(fit: FittedLMM, design: DesignMatrices, reps: int, seed: int) -> float:
    """Bootstrap estimate of the generalized degrees of freedom.

    Simulates responses from the fit, refits the same specification, and
    accumulates sum_d sum_ij [V_d^-1]_ij Cov(mu_hat_di, Y_dj) with the
    covariance estimated empirically across replicates (unbiased divisor).
    Deterministic given seed. Failed refits are skipped; more than 10%
    failures is an error.
    """
    if reps < 50:
        raise ValueError(f"need at least 50 bootstrap replicates, got {reps}")
    n = design.n
    ys = np.empty((reps, n))
    mus = np.empty((reps, n))
    kept = 0
    failed = 0
    for b in range(reps):
        y_star = simulate_response(fit, design, seed=[seed, b])
        try:
            refit = fit_reml(design.with_response(y_star))
        except FitError:
            failed += 1
            continue
        if not refit.converged:
            failed += 1
            continue
        ys[kept] = y_star
        mus[kept] = predict_units(refit, design)
        kept += 1
    if failed > _MAX_FAILURE_RATE * reps:
        raise FitError(
            f"{failed}/{reps} bootstrap refits failed for {fit.spec.label!r}"
        )
    if failed:
        warnings.warn(
            f"dropped {failed} failed bootstrap refits for {fit.spec.label!r}",
            RuntimeWarning,
            stacklevel=2,
        )
    ys = ys[:kept]
    mus = mus[:kept]
    yc = ys - ys.mean(axis=0)
    mc = mus - mus.mean(axis=0)
    chols = v_inverse_blocks(fit)
    total = 0.0
    for d, c in enumerate(chols):
        sl = design.area_slice(d)
        # trace(V_d^-1 Cov(mu_d, Y_d)) without forming the covariance block
        A = sla.cho_solve(c, mc[:, sl].T)  # (n_d, kept)
        total += float(np.sum(A * yc[:, sl].T))
    return total / (kept - 1)


def score_candidate(
    ds: Dataset, spec: ModelSpec, gender: str, reps: int, seed: int
) -> tuple[CandidateScore, FittedLMM, DesignMatrices]:
    design = encode_design(ds, spec, gender)
    fit = fit_reml(design)
    ql = quasi_loglikelihood(fit, design)
    gdf = estimate_gdf(fit, design, reps, seed)
    return (
        CandidateScore(
            label=spec.label,
            quasi_loglik=ql,
            gdf=gdf,
            score=-2.0 * ql + gdf,
            n_params=design.p + design.q,
        ),
        fit,
        design,
    )


def select_model(
    ds: Dataset, candidates: list[ModelSpec], reps: int, seed: int
) -> SelectionResult:
    """Score every candidate on the larger-sample gender, pick the minimum.

    Ties break toward fewer total parameters, then label order. Candidates
    that fail to fit are recorded and skipped; if all fail, raises FitError.
    """
    if not candidates:
        raise ValueError("need at least one candidate model")
    gender = MEN if ds.n(MEN) >= ds.n(WOMEN) else WOMEN
    scores: list[CandidateScore] = []
    failed: list[str] = []
    for i, spec in enumerate(candidates):
        try:
            score, _, _ = score_candidate(ds, spec, gender, reps, seed=_derive(seed, i))
        except FitError as exc:
            warnings.warn(
                f"candidate {spec.label!r} failed: {exc}", RuntimeWarning, stacklevel=2
            )
            failed.append(spec.label)
            continue
        scores.append(score)
    if not scores:
        raise FitError("all candidate models failed to fit")
    winner = min(scores, key=lambda c: (c.score, c.n_params, c.label))
    return SelectionResult(
        candidates=tuple(scores),
        winner=winner.label,
        gender=gender,
        bootstrap_reps=reps,
        seed=seed,
        failed=tuple(failed),
    )


def _derive(seed: int, index: int) -> int:
    """Stable per-candidate sub-seed."""
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])
