"""Pay-gap decomposition: explained/unexplained split per area, a
sample-splitting correction for omitted-variable bias, and Monte Carlo
confidence intervals.

Per-area quantities, with m = men, w = women and d an area:

    delta_d = mean log-wage difference (men minus women, conditional means)
    q_d     = (xbar_md - xbar_wd) . beta_m + (zbar_md - zbar_wd) . u_md
    u_d     = delta_d - q_d

The relative pay gap (ew_m - ew_w) / ew_m is split proportionally to the
(bias-corrected) q and u shares of delta.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np
from scipy import stats

from .data import GENDERS, MEN, WOMEN, Dataset
from .design import DesignMatrices, GroupMeans, ModelSpec, encode_design, group_means
from .errors import DesignError, FitError, SparseDataError
from .lmm import FittedLMM, fit_reml, predict_units

GLOBAL = "global"

#: area gaps below this magnitude are flagged unstable and ratios suppressed
UNSTABLE_DELTA = 1e-6

#: attempts allowed per requested split iteration before giving up
_MAX_ATTEMPT_FACTOR = 5


@dataclass(frozen=True)
class AreaDecomposition:
    area: str
    delta: float
    q_raw: float
    u_raw: float
    bias: float
    q_corrected: float
    u_corrected: float
    n_m: int
    n_w: int


@dataclass(frozen=True)
class GpgEstimate:
    area: str
    gpg: float
    gpg_q: float
    gpg_u: float
    ci_q: tuple[float, float]
    ci_u: tuple[float, float]
    iterations_used: int
    unstable: bool


@dataclass(frozen=True)
class DecomposeResult:
    estimates: tuple[GpgEstimate, ...]  # per area plus a final "global" entry
    components: tuple[AreaDecomposition, ...]
    skipped_areas: tuple[str, ...]
    attempts: int
    trace: tuple["SplitStats", ...] = ()


def _beta_of(fit) -> np.ndarray:
    return np.asarray(getattr(fit, "beta", fit), dtype=float)


def ob_decompose(men_fit, women_fit, xbar_m, xbar_w) -> tuple[float, float, float]:
    """Classic two-regression mean decomposition (men's coefficients price
    the characteristics gap).

    Returns (delta, q, u) with delta = q + u by construction; for
    least-squares fits with an intercept, delta equals the raw mean
    log-wage difference.
    """
    beta_m = _beta_of(men_fit)
    beta_w = _beta_of(women_fit)
    xbar_m = np.asarray(xbar_m, dtype=float)
    xbar_w = np.asarray(xbar_w, dtype=float)
    if not (beta_m.shape == beta_w.shape == xbar_m.shape == xbar_w.shape):
        raise DesignError("coefficient/mean vectors do not share one column layout")
    q = float((xbar_m - xbar_w) @ beta_m)
    u = float(xbar_w @ (beta_m - beta_w))
    return q + u, q, u


@dataclass(frozen=True)
class _AreaTerms:
    delta: float
    q: float


def _area_terms(
    men_fit: FittedLMM, women_fit: FittedLMM, means: GroupMeans, area: str
) -> _AreaTerms:
    xm, zm, _, _ = means.cell(MEN, area)
    xw, zw, _, _ = means.cell(WOMEN, area)
    um = men_fit.u_for(area) if area in men_fit.areas else np.zeros(men_fit.u_hat.shape[1])
    uw = (
        women_fit.u_for(area)
        if area in women_fit.areas
        else np.zeros(women_fit.u_hat.shape[1])
    )
    mu_m = float(xm @ men_fit.beta + zm @ um)
    mu_w = float(xw @ women_fit.beta + zw @ uw)
    q = float((xm - xw) @ men_fit.beta + (zm - zw) @ um)
    return _AreaTerms(delta=mu_m - mu_w, q=q)


def area_components(
    men_fit: FittedLMM, women_fit: FittedLMM, means: GroupMeans
) -> tuple[list[AreaDecomposition], list[str]]:
    """Raw per-area decomposition (bias zero); areas missing either gender
    are excluded and reported back."""
    out: list[AreaDecomposition] = []
    skipped: list[str] = []
    for area in means.areas:
        if not (means.has_cell(MEN, area) and means.has_cell(WOMEN, area)):
            skipped.append(area)
            continue
        terms = _area_terms(men_fit, women_fit, means, area)
        _, _, _, n_m = means.cell(MEN, area)
        _, _, _, n_w = means.cell(WOMEN, area)
        out.append(
            AreaDecomposition(
                area=area,
                delta=terms.delta,
                q_raw=terms.q,
                u_raw=terms.delta - terms.q,
                bias=0.0,
                q_corrected=terms.q,
                u_corrected=terms.delta - terms.q,
                n_m=n_m,
                n_w=n_w,
            )
        )
    return out, skipped


def expected_wage(fit: FittedLMM, design: DesignMatrices, area: str) -> float:
    """Back-transformed wage level: mean of exp(fitted log wage) over the
    sampled units of one area."""
    if area not in design.areas:
        raise DesignError(f"area {area!r} has no units in this design")
    yhat = predict_units(fit, design)
    sl = design.area_slice(design.areas.index(area))
    return float(np.mean(np.exp(yhat[sl])))


def gpg(ew_m: float, ew_w: float) -> float:
    """Relative pay gap (ew_m - ew_w) / ew_m."""
    if not ew_m > 0:
        raise ValueError(f"men's expected wage must be positive, got {ew_m!r}")
    return (ew_m - ew_w) / ew_m


@dataclass(frozen=True)
class SplitStats:
    """Quantities computed from one retained half-sample iteration.

    Mappings are keyed by area id, with the whole-region entry under
    ``"global"`` (bias and q/delta/gap computed from all units at once).
    """

    bias: Mapping[str, float]
    q1: Mapping[str, float]
    delta1: Mapping[str, float]
    gap1: Mapping[str, float]


@dataclass(frozen=True)
class BiasResult:
    bias: Mapping[str, float]  # per-area mean of the per-iteration terms
    iterations: tuple[SplitStats, ...]
    attempts: int


def _global_zu_mean(design: DesignMatrices, fit: FittedLMM) -> float:
    """Mean over this design's units of Z_i . u_{d(i)} using ``fit``'s
    random effects (zero for areas the fit has not seen)."""
    if design.q == 0:
        return 0.0
    u_map = {a: fit.u_hat[i] for i, a in enumerate(fit.areas)}
    zero = np.zeros(design.q)
    U = np.vstack([u_map.get(a, zero) for a in design.areas])
    return float(np.mean(np.einsum("ij,ij->i", design.Z, U[design.area_index()])))


def _gender_mean(design: DesignMatrices) -> np.ndarray:
    return design.X.mean(axis=0)


def _split_stats(
    ds: Dataset,
    spec: ModelSpec,
    s1_idx: Sequence[int],
    s2_idx: Sequence[int],
    areas: Sequence[str],
) -> SplitStats:
    """Fit the spec on the first half and compute per-area bias and
    half-sample decomposition terms. Raises FitError/DesignError when the
    half-sample fit is not possible (caller discards the iteration)."""
    ds1 = ds.subset(s1_idx)
    ds2 = ds.subset(s2_idx)
    enc1 = {g: encode_design(ds1, spec, g) for g in GENDERS}
    fit1_m = fit_reml(enc1[MEN])
    fit1_w = fit_reml(enc1[WOMEN])
    means1 = group_means(ds1, spec)
    means2_m = encode_design(ds2, spec, MEN)

    # per-area means of the second half's men
    m2_xbar: dict[str, np.ndarray] = {}
    m2_zbar: dict[str, np.ndarray] = {}
    for d, area in enumerate(means2_m.areas):
        sl = means2_m.area_slice(d)
        m2_xbar[area] = means2_m.X[sl].mean(axis=0)
        m2_zbar[area] = means2_m.Z[sl].mean(axis=0)

    bias: dict[str, float] = {}
    q1: dict[str, float] = {}
    delta1: dict[str, float] = {}
    gap1: dict[str, float] = {}
    yhat_m = np.exp(predict_units(fit1_m, enc1[MEN]))
    yhat_w = np.exp(predict_units(fit1_w, enc1[WOMEN]))
    for area in areas:
        x1, z1, _, _ = means1.cell(MEN, area)
        u1 = fit1_m.u_for(area)
        bias[area] = float(
            (x1 - m2_xbar[area]) @ fit1_m.beta + (z1 - m2_zbar[area]) @ u1
        )
        terms = _area_terms(fit1_m, fit1_w, means1, area)
        q1[area] = terms.q
        delta1[area] = terms.delta
        d_m = enc1[MEN].areas.index(area)
        d_w = enc1[WOMEN].areas.index(area)
        ew_m = float(np.mean(yhat_m[enc1[MEN].area_slice(d_m)]))
        ew_w = float(np.mean(yhat_w[enc1[WOMEN].area_slice(d_w)]))
        gap1[area] = gpg(ew_m, ew_w)

    # whole-region versions (all units pooled as one area)
    x1m, x1w = _gender_mean(enc1[MEN]), _gender_mean(enc1[WOMEN])
    zu1_m = _global_zu_mean(enc1[MEN], fit1_m)
    zu1_m_at_w = _global_zu_mean(enc1[WOMEN], fit1_m)
    zu1_w = _global_zu_mean(enc1[WOMEN], fit1_w)
    x2m = _gender_mean(means2_m)
    zu2_m = _global_zu_mean(means2_m, fit1_m)
    bias[GLOBAL] = float((x1m - x2m) @ fit1_m.beta) + (zu1_m - zu2_m)
    q1[GLOBAL] = float((x1m - x1w) @ fit1_m.beta) + (zu1_m - zu1_m_at_w)
    delta1[GLOBAL] = (float(x1m @ fit1_m.beta) + zu1_m) - (
        float(x1w @ fit1_w.beta) + zu1_w
    )
    gap1[GLOBAL] = gpg(float(np.mean(yhat_m)), float(np.mean(yhat_w)))
    return SplitStats(bias=bias, q1=q1, delta1=delta1, gap1=gap1)


def _retainable(ds: Dataset, s1_idx, s2_idx, areas) -> bool:
    c1: dict[tuple[str, str], int] = {}
    for i in s1_idx:
        r = ds.records[i]
        c1[(r.gender, r.area_id)] = c1.get((r.gender, r.area_id), 0) + 1
    c2_men = {a: 0 for a in areas}
    for i in s2_idx:
        r = ds.records[i]
        if r.gender == MEN and r.area_id in c2_men:
            c2_men[r.area_id] += 1
    for a in areas:
        if c1.get((MEN, a), 0) == 0 or c1.get((WOMEN, a), 0) == 0:
            return False
        if c2_men[a] == 0:
            return False
    return True


def estimate_bias(
    ds: Dataset, spec: ModelSpec, iterations: int, seed: int
) -> BiasResult:
    """Average per-area bias term over random half-sample splits.

    Each iteration splits the full sample in half at random, fits the spec
    on the first half, and measures the men's characteristics drift between
    halves priced at the first half's coefficients. Iterations leaving any
    area without men or women in the first half (or without men in the
    second) are discarded and redrawn, up to five attempts per requested
    iteration; if under half of the attempts are retainable the data is
    considered too sparse.
    """
    if iterations < 1:
        raise ValueError("need at least one split iteration")
    areas = [
        a for a in ds.areas if ds.count(MEN, a) > 0 and ds.count(WOMEN, a) > 0
    ]
    for a in areas:
        if ds.count(MEN, a) < 2:
            raise SparseDataError(f"area {a!r} has fewer than 2 men")
    n = len(ds.records)
    n1 = -(-n // 2)  # ceil
    retained: list[SplitStats] = []
    attempts = 0
    max_attempts = _MAX_ATTEMPT_FACTOR * iterations
    while len(retained) < iterations and attempts < max_attempts:
        rng = np.random.default_rng([seed, attempts])
        attempts += 1
        perm = rng.permutation(n)
        s1_idx, s2_idx = perm[:n1], perm[n1:]
        if not _retainable(ds, s1_idx, s2_idx, areas):
            continue
        try:
            retained.append(_split_stats(ds, spec, s1_idx, s2_idx, areas))
        except (FitError, DesignError, np.linalg.LinAlgError):
            continue
    if len(retained) < iterations:
        if len(retained) < 0.5 * attempts or not retained:
            raise SparseDataError(
                f"only {len(retained)}/{attempts} split attempts were retainable"
            )
        warnings.warn(
            f"retained {len(retained)} of {iterations} requested split iterations",
            RuntimeWarning,
            stacklevel=2,
        )
    keys = [*areas, GLOBAL]
    bias = {
        k: float(np.mean([it.bias[k] for it in retained])) for k in keys
    }
    return BiasResult(bias=bias, iterations=tuple(retained), attempts=attempts)


def decompose_gpg(
    ds: Dataset,
    spec: ModelSpec,
    iterations: int,
    seed: int,
    alpha: float = 0.05,
    *,
    keep_trace: bool = False,
) -> DecomposeResult:
    """Full pipeline: raw split, bias correction, gap ratios and intervals.

    Returns per-area estimates plus a whole-region entry (area ``"global"``,
    computed from all units pooled). Intervals are centered at the
    full-sample corrected estimates with the half-sample Monte Carlo
    variance (divisor = number of retained iterations).
    """
    if not 0 < alpha < 1:
        raise ValueError(f"alpha must be in (0, 1), got {alpha}")
    enc = {g: encode_design(ds, spec, g) for g in GENDERS}
    fit_m = fit_reml(enc[MEN])
    fit_w = fit_reml(enc[WOMEN])
    means = group_means(ds, spec)
    comps, skipped = area_components(fit_m, fit_w, means)

    bias_res = estimate_bias(ds, spec, iterations, seed)
    used = len(bias_res.iterations)
    z = float(stats.norm.ppf(1.0 - alpha / 2.0))

    # whole-region raw terms
    x_m, x_w = _gender_mean(enc[MEN]), _gender_mean(enc[WOMEN])
    zu_m = _global_zu_mean(enc[MEN], fit_m)
    zu_m_at_w = _global_zu_mean(enc[WOMEN], fit_m)
    zu_w = _global_zu_mean(enc[WOMEN], fit_w)
    g_delta = (float(x_m @ fit_m.beta) + zu_m) - (float(x_w @ fit_w.beta) + zu_w)
    g_q = float((x_m - x_w) @ fit_m.beta) + (zu_m - zu_m_at_w)
    comps = [
        *comps,
        AreaDecomposition(
            area=GLOBAL,
            delta=g_delta,
            q_raw=g_q,
            u_raw=g_delta - g_q,
            bias=0.0,
            q_corrected=g_q,
            u_corrected=g_delta - g_q,
            n_m=ds.n(MEN),
            n_w=ds.n(WOMEN),
        ),
    ]

    yhat_m = np.exp(predict_units(fit_m, enc[MEN]))
    yhat_w = np.exp(predict_units(fit_w, enc[WOMEN]))

    out_comps: list[AreaDecomposition] = []
    estimates: list[GpgEstimate] = []
    for comp in comps:
        area = comp.area
        b = bias_res.bias[area]
        q_corr = comp.q_raw + b
        u_corr = comp.delta - q_corr
        comp = AreaDecomposition(
            area=area,
            delta=comp.delta,
            q_raw=comp.q_raw,
            u_raw=comp.u_raw,
            bias=b,
            q_corrected=q_corr,
            u_corrected=u_corr,
            n_m=comp.n_m,
            n_w=comp.n_w,
        )
        out_comps.append(comp)

        if area == GLOBAL:
            ew_m = float(np.mean(yhat_m))
            ew_w = float(np.mean(yhat_w))
        else:
            ew_m = expected_wage(fit_m, enc[MEN], area)
            ew_w = expected_wage(fit_w, enc[WOMEN], area)
        gap = gpg(ew_m, ew_w)

        unstable = abs(comp.delta) < UNSTABLE_DELTA
        if unstable:
            estimates.append(
                GpgEstimate(
                    area=area,
                    gpg=gap,
                    gpg_q=math.nan,
                    gpg_u=math.nan,
                    ci_q=(math.nan, math.nan),
                    ci_u=(math.nan, math.nan),
                    iterations_used=used,
                    unstable=True,
                )
            )
            continue

        gap_q = gap * q_corr / comp.delta
        gap_u = gap * u_corr / comp.delta

        qi = np.empty(used)
        ui = np.empty(used)
        for i, it in enumerate(bias_res.iterations):
            q_bi = it.q1[area] + b
            u_bi = it.delta1[area] - q_bi
            qi[i] = it.gap1[area] * q_bi / it.delta1[area]
            ui[i] = it.gap1[area] * u_bi / it.delta1[area]
        var_q = float(np.mean((qi - qi.mean()) ** 2))
        var_u = float(np.mean((ui - ui.mean()) ** 2))
        estimates.append(
            GpgEstimate(
                area=area,
                gpg=gap,
                gpg_q=gap_q,
                gpg_u=gap_u,
                ci_q=(gap_q - z * math.sqrt(var_q), gap_q + z * math.sqrt(var_q)),
                ci_u=(gap_u - z * math.sqrt(var_u), gap_u + z * math.sqrt(var_u)),
                iterations_used=used,
                unstable=False,
            )
        )

    return DecomposeResult(
        estimates=tuple(estimates),
        components=tuple(out_comps),
        skipped_areas=tuple(skipped),
        attempts=bias_res.attempts,
        trace=bias_res.iterations if keep_trace else (),
    )
