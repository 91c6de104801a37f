"""Nested-error linear mixed model with sampling weights, fitted by REML.

The random-effect covariance is diagonal (independent variance per random
design column). The REML criterion is optimized over log variance ratios
gamma_k = sigma_uk^2 / sigma_e^2 with sigma_e^2 profiled out analytically;
a log-variance parameterization handles boundary (zero-variance) optima.
Per-area covariance blocks V_d = Z_d Sigma_u Z_d' + sigma_e^2 W_d^{-1} are
exposed for downstream likelihood and bootstrap computations.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy import linalg as sla
from scipy import optimize

from .design import DesignMatrices, ModelSpec
from .errors import FitError

LOG_2PI = float(np.log(2.0 * np.pi))

# bounds for log gamma (variance ratio); the lower bound acts as the
# "component is zero" boundary
_LOG_GAMMA_LO = -30.0
_LOG_GAMMA_HI = 15.0
# the likelihood is flat near the lower bound, so the optimizer can stall
# well before reaching it; any ratio this small is a zero component
_BOUNDARY_EPS = 10.0

# floor used only inside linear solves so that degenerate (zero-noise)
# fits remain computable; reported components are not floored
_SOLVE_FLOOR = 1e-12


@dataclass(frozen=True)
class VarianceComponents:
    """REML variance components: diagonal Sigma_u and the unit error variance."""

    sigma_u: np.ndarray  # (q, q) diagonal, log-wage^2 units
    sigma_e2: float

    def __post_init__(self):
        su = np.asarray(self.sigma_u, dtype=float)
        if su.ndim != 2 or su.shape[0] != su.shape[1]:
            raise FitError(f"Sigma_u must be square, got shape {su.shape}")
        if not np.allclose(su, su.T):
            raise FitError("Sigma_u must be symmetric")
        if su.size and np.min(np.linalg.eigvalsh(su)) < -1e-10:
            raise FitError("Sigma_u must be positive semidefinite")
        if self.sigma_e2 < 0:
            raise FitError("sigma_e^2 must be nonnegative")

    @property
    def sigma_u_diag(self) -> np.ndarray:
        return np.diag(self.sigma_u)


@dataclass(frozen=True)
class FittedLMM:
    """A fitted model: GLS fixed effects, BLUP random effects, V_d blocks."""

    spec: ModelSpec
    gender: str
    x_names: tuple[str, ...]
    z_names: tuple[str, ...]
    areas: tuple[str, ...]
    beta: np.ndarray
    u_hat: np.ndarray  # (D, q)
    vc: VarianceComponents
    per_area_V: tuple[np.ndarray, ...]
    loglik_restricted: float
    converged: bool
    iterations: int

    def u_for(self, area: str) -> np.ndarray:
        try:
            return self.u_hat[self.areas.index(area)]
        except ValueError:
            raise KeyError(f"unknown area {area!r}") from None

    def to_json(self) -> dict:
        return {
            "label": self.spec.label,
            "gender": self.gender,
            "beta": {name: float(b) for name, b in zip(self.x_names, self.beta)},
            "variance_components": {
                "sigma_u": {
                    name: float(s)
                    for name, s in zip(self.z_names, self.vc.sigma_u_diag)
                },
                "sigma_e2": float(self.vc.sigma_e2),
            },
            "random_effects": {
                area: [float(v) for v in u] for area, u in zip(self.areas, self.u_hat)
            },
            "loglik_restricted": float(self.loglik_restricted),
            "converged": bool(self.converged),
            "iterations": int(self.iterations),
        }


def _check_rank(design: DesignMatrices) -> None:
    X = design.X
    _, R, piv = sla.qr(X, mode="economic", pivoting=True)
    diag = np.abs(np.diag(R))
    tol = max(X.shape) * np.finfo(float).eps * (diag[0] if diag.size else 0.0)
    rank = int(np.sum(diag > tol))
    if rank < X.shape[1]:
        offending = [design.x_names[j] for j in piv[rank:]]
        raise FitError(
            f"rank-deficient fixed-effect matrix for {design.spec.label!r} "
            f"({design.gender}): offending column(s) {', '.join(sorted(offending))}"
        )


class _Workspace:
    """Per-area cross products reused across likelihood evaluations."""

    def __init__(self, design: DesignMatrices):
        X, Z, y, w = design.X, design.Z, design.y, design.w
        D = design.n_areas
        p, q = design.p, design.q
        self.design = design
        self.n, self.p, self.q, self.D = design.n, p, q, D
        self.sum_log_w = float(np.sum(np.log(w)))
        Xw = X * w[:, None]
        self.XtWX = X.T @ Xw
        self.XtWy = Xw.T @ y
        self.ytWy = float(y @ (w * y))
        self.ZtWZ = np.empty((D, q, q))
        self.XtWZ = np.empty((D, p, q))
        self.ZtWy = np.empty((D, q))
        for d in range(D):
            sl = design.area_slice(d)
            Zd, wd = Z[sl], w[sl]
            Zw = Zd * wd[:, None]
            self.ZtWZ[d] = Zd.T @ Zw
            self.XtWZ[d] = X[sl].T @ Zw
            self.ZtWy[d] = Zw.T @ y[sl]

    def neg_profiled_reml(self, log_gamma: np.ndarray) -> tuple[float, np.ndarray]:
        """Negative profiled restricted log-likelihood and its gradient.

        sigma_e^2 is profiled out; the argument is log of the variance
        ratios gamma = sigma_u^2 / sigma_e^2 per random column.
        """
        n, p, q = self.n, self.p, self.q
        gamma = np.exp(np.clip(log_gamma, _LOG_GAMMA_LO, _LOG_GAMMA_HI))
        Ginv = np.diag(1.0 / gamma)
        M = self.ZtWZ + Ginv[None, :, :]  # (D, q, q)
        try:
            L = np.linalg.cholesky(M)
        except np.linalg.LinAlgError as exc:
            raise FitError("singular inner system in REML evaluation") from exc
        logdet_M = 2.0 * np.sum(np.log(np.diagonal(L, axis1=1, axis2=2)))
        logdet_V = -self.sum_log_w + logdet_M + self.D * float(np.sum(np.log(gamma)))

        Minv_ZtWX = np.linalg.solve(M, np.transpose(self.XtWZ, (0, 2, 1)))  # (D,q,p)
        Minv_ZtWy = np.linalg.solve(M, self.ZtWy[:, :, None])[:, :, 0]  # (D,q)

        XtVX = self.XtWX - np.einsum("dpq,dqr->pr", self.XtWZ, Minv_ZtWX)
        XtVy = self.XtWy - np.einsum("dpq,dq->p", self.XtWZ, Minv_ZtWy)
        yVy = self.ytWy - float(np.einsum("dq,dq->", self.ZtWy, Minv_ZtWy))

        try:
            cF = sla.cho_factor(XtVX)
        except sla.LinAlgError as exc:
            raise FitError("singular X'V^-1 X in REML evaluation") from exc
        beta = sla.cho_solve(cF, XtVy)
        logdet_XtVX = 2.0 * float(np.sum(np.log(np.diag(cF[0]))))
        rss = max(yVy - float(XtVy @ beta), 1e-300)
        sigma_e2 = rss / (n - p)

        value = 0.5 * (
            (n - p) * (LOG_2PI + 1.0 + np.log(sigma_e2)) + logdet_V + logdet_XtVX
        )

        # gradient wrt log gamma
        ZtVZ_diag = np.einsum(
            "dkk->k",
            self.ZtWZ - np.einsum("dij,djk->dik", self.ZtWZ, np.linalg.solve(M, self.ZtWZ)),
        )
        # dV/dgamma_k is block diagonal (one z_dk z_dk' block per area), so the
        # quadratic-form terms accumulate per area before squaring
        XtVZ = self.XtWZ - np.einsum(
            "dpj,djq->dpq", self.XtWZ, np.linalg.solve(M, self.ZtWZ)
        )  # (D, p, q), per-area X'V^-1 Z
        ZtVy = self.ZtWy - np.einsum("dqj,dj->dq", self.ZtWZ, Minv_ZtWy)  # (D, q)
        a = ZtVy - np.einsum("dpq,p->dq", XtVZ, beta)  # per-area Z'V^-1 (y - X beta)
        t1 = -(n - p) * np.einsum("dq,dq->q", a, a) / rss
        t2 = ZtVZ_diag
        B = sla.cho_solve(cF, XtVZ.transpose(1, 0, 2).reshape(p, -1)).reshape(
            p, self.D, q
        )
        t3 = -np.einsum("dpq,pdq->q", XtVZ, B)
        grad = 0.5 * (t1 + t2 + t3) * gamma
        return float(value), grad


def _block_V(design: DesignMatrices, sigma_u: np.ndarray, sigma_e2: float) -> list[np.ndarray]:
    """Per-area V_d = Z_d diag(sigma_u) Z_d' + sigma_e^2 W_d^{-1}."""
    blocks = []
    for d in range(design.n_areas):
        sl = design.area_slice(d)
        Zd = design.Z[sl]
        Vd = (Zd * sigma_u[None, :]) @ Zd.T if design.q else np.zeros((sl.stop - sl.start,) * 2)
        Vd = Vd + np.diag(sigma_e2 / design.w[sl])
        blocks.append(Vd)
    return blocks


def _solvable_blocks(
    design: DesignMatrices, sigma_u: np.ndarray, sigma_e2: float
) -> list[np.ndarray]:
    return _block_V(design, sigma_u, max(float(sigma_e2), _SOLVE_FLOOR))


def _gls(design: DesignMatrices, chols) -> tuple[np.ndarray, np.ndarray]:
    """GLS coefficients given per-area Cholesky factors of V_d."""
    p = design.p
    XtVX = np.zeros((p, p))
    XtVy = np.zeros(p)
    for d, c in enumerate(chols):
        sl = design.area_slice(d)
        Xd, yd = design.X[sl], design.y[sl]
        Vx = sla.cho_solve(c, Xd)
        XtVX += Xd.T @ Vx
        XtVy += Vx.T @ yd
    beta = np.linalg.solve(XtVX, XtVy)
    return beta, XtVX


def restricted_loglik(
    design: DesignMatrices, sigma_u: Sequence[float], sigma_e2: float
) -> float:
    """Restricted log-likelihood at arbitrary (diagonal) variance components.

    Returns -inf when the implied covariance is numerically singular.
    Useful as an independent check of the optimizer (e.g. grid search).
    """
    sigma_u = np.asarray(sigma_u, dtype=float)
    n, p = design.n, design.p
    blocks = _block_V(design, sigma_u, float(sigma_e2))
    try:
        chols = [sla.cho_factor(V) for V in blocks]
    except (sla.LinAlgError, ValueError):
        return -np.inf
    logdet_V = sum(2.0 * float(np.sum(np.log(np.diag(c[0])))) for c in chols)
    beta, XtVX = _gls(design, chols)
    sign, logdet_XtVX = np.linalg.slogdet(XtVX)
    if sign <= 0:
        return -np.inf
    quad = 0.0
    for d, c in enumerate(chols):
        sl = design.area_slice(d)
        r = design.y[sl] - design.X[sl] @ beta
        quad += float(r @ sla.cho_solve(c, r))
    return -0.5 * ((n - p) * LOG_2PI + logdet_V + logdet_XtVX + quad)


def _finalize(
    design: DesignMatrices,
    sigma_u: np.ndarray,
    sigma_e2: float,
    converged: bool,
    iterations: int,
    beta: np.ndarray | None = None,
    u_hat: np.ndarray | None = None,
) -> FittedLMM:
    D, q = design.n_areas, design.q
    chols = [sla.cho_factor(V) for V in _solvable_blocks(design, sigma_u, sigma_e2)]
    if beta is None:
        beta, _ = _gls(design, chols)
    else:
        beta = np.asarray(beta, dtype=float)
    if u_hat is None:
        u_hat = np.zeros((D, q))
        for d, c in enumerate(chols):
            sl = design.area_slice(d)
            r = design.y[sl] - design.X[sl] @ beta
            if q:
                u_hat[d] = sigma_u * (design.Z[sl].T @ sla.cho_solve(c, r))
    else:
        u_hat = np.asarray(u_hat, dtype=float).reshape(D, q)
    blocks = tuple(_block_V(design, sigma_u, sigma_e2))
    for b in blocks:
        b.flags.writeable = False
    beta = beta.copy()
    beta.flags.writeable = False
    u_hat = u_hat.copy()
    u_hat.flags.writeable = False
    return FittedLMM(
        spec=design.spec,
        gender=design.gender,
        x_names=design.x_names,
        z_names=design.z_names,
        areas=design.areas,
        beta=beta,
        u_hat=u_hat,
        vc=VarianceComponents(np.diag(sigma_u), float(sigma_e2)),
        per_area_V=blocks,
        loglik_restricted=restricted_loglik(design, sigma_u, sigma_e2),
        converged=converged,
        iterations=iterations,
    )


def fit_at(
    design: DesignMatrices,
    sigma_u: Sequence[float],
    sigma_e2: float,
    *,
    beta: np.ndarray | None = None,
    u_hat: np.ndarray | None = None,
) -> FittedLMM:
    """Build a FittedLMM at caller-chosen components (fixtures, oracles).

    ``beta`` defaults to the GLS estimate and ``u_hat`` to the BLUP at the
    given variance components.
    """
    return _finalize(
        design,
        np.asarray(sigma_u, dtype=float),
        float(sigma_e2),
        converged=True,
        iterations=0,
        beta=beta,
        u_hat=u_hat,
    )


def _projected_grad_norm(x: np.ndarray, grad: np.ndarray) -> float:
    """Sup-norm of the gradient projected onto the box constraints."""
    g = np.asarray(grad, dtype=float).copy()
    x = np.asarray(x, dtype=float)
    g[(x <= _LOG_GAMMA_LO + 1e-10) & (g > 0)] = 0.0
    g[(x >= _LOG_GAMMA_HI - 1e-10) & (g < 0)] = 0.0
    return float(np.max(np.abs(g))) if g.size else 0.0


def fit_reml(design: DesignMatrices, *, max_iter: int = 200) -> FittedLMM:
    """Fit the mixed model by REML.

    Raises FitError on a rank-deficient fixed-effect matrix. On optimizer
    non-convergence the result is still returned with ``converged`` False.
    """
    _check_rank(design)
    n, p, q = design.n, design.p, design.q
    if n <= p:
        raise FitError(f"need n > p, got n={n}, p={p}")

    if q == 0:
        Xw = design.X * design.w[:, None]
        beta = np.linalg.solve(design.X.T @ Xw, Xw.T @ design.y)
        r = design.y - design.X @ beta
        sigma_e2 = float(r @ (design.w * r)) / (n - p)
        return _finalize(design, np.zeros(0), sigma_e2, converged=True, iterations=0)

    ws = _Workspace(design)
    x0 = np.full(q, np.log(0.2))
    res = optimize.minimize(
        ws.neg_profiled_reml,
        x0,
        jac=True,
        method="L-BFGS-B",
        bounds=[(_LOG_GAMMA_LO, _LOG_GAMMA_HI)] * q,
        options={"maxiter": max_iter, "ftol": 1e-14, "gtol": 1e-10},
    )
    if not res.success:
        # retry once from a different start before reporting non-convergence
        res2 = optimize.minimize(
            ws.neg_profiled_reml,
            np.zeros(q),
            jac=True,
            method="L-BFGS-B",
            bounds=[(_LOG_GAMMA_LO, _LOG_GAMMA_HI)] * q,
            options={"maxiter": max_iter, "ftol": 1e-14, "gtol": 1e-10},
        )
        if res2.fun < res.fun:
            res = res2
    converged = bool(res.success) and res.nit < max_iter
    if not converged and _projected_grad_norm(res.x, res.jac) < 1e-4:
        # line-search breakdown at a flat optimum or a variance boundary;
        # the solution itself is stationary
        converged = True

    log_gamma = np.asarray(res.x, dtype=float)
    gamma = np.exp(log_gamma)
    at_boundary = log_gamma <= _LOG_GAMMA_LO + _BOUNDARY_EPS
    gamma[at_boundary] = 0.0

    # recover sigma_e^2 at the optimum (profile formula, Woodbury-free path)
    sigma_e2 = _profiled_sigma_e2(design, gamma)
    sigma_u = gamma * sigma_e2
    fit = _finalize(design, sigma_u, sigma_e2, converged=converged, iterations=int(res.nit))
    if not converged:
        warnings.warn(
            f"REML did not converge for {design.spec.label!r} ({design.gender}): {res.message}",
            RuntimeWarning,
            stacklevel=2,
        )
    return fit


def _profiled_sigma_e2(design: DesignMatrices, gamma: np.ndarray) -> float:
    n, p = design.n, design.p
    blocks = _block_V(design, gamma, 1.0)
    chols = [sla.cho_factor(V) for V in blocks]
    beta, _ = _gls(design, chols)
    rss = 0.0
    for d, c in enumerate(chols):
        sl = design.area_slice(d)
        r = design.y[sl] - design.X[sl] @ beta
        rss += float(r @ sla.cho_solve(c, r))
    return max(rss, 1e-300) / (n - p)


def conditional_mean(fit: FittedLMM, xbar: np.ndarray, zbar: np.ndarray, area: str) -> float:
    """Area-level conditional mean: xbar . beta + zbar . u_hat[area]."""
    u = fit.u_for(area)
    xbar = np.asarray(xbar, dtype=float)
    zbar = np.asarray(zbar, dtype=float)
    if xbar.shape != fit.beta.shape or zbar.shape != u.shape:
        raise FitError("mean vector dimensions do not match the fit")
    return float(xbar @ fit.beta + zbar @ u)


def predict_units(fit: FittedLMM, design: DesignMatrices) -> np.ndarray:
    """Per-unit fitted values X beta + Z u_hat; unseen areas use u = 0."""
    if design.x_names != fit.x_names or design.z_names != fit.z_names:
        raise FitError(
            f"design columns do not match fit {fit.spec.label!r}: "
            f"{design.x_names}/{design.z_names} vs {fit.x_names}/{fit.z_names}"
        )
    yhat = design.X @ fit.beta
    if design.q:
        u_map = {a: fit.u_hat[i] for i, a in enumerate(fit.areas)}
        zero = np.zeros(design.q)
        U = np.vstack([u_map.get(a, zero) for a in design.areas])
        yhat = yhat + np.einsum("ij,ij->i", design.Z, U[design.area_index()])
    return yhat


def simulate_response(fit: FittedLMM, design: DesignMatrices, seed) -> np.ndarray:
    """Draw a new response from the fitted model; deterministic given seed."""
    rng = np.random.default_rng(seed)
    su = np.sqrt(np.clip(fit.vc.sigma_u_diag, 0.0, None))
    mu = design.X @ fit.beta
    if design.q:
        u_star = rng.normal(size=(design.n_areas, design.q)) * su[None, :]
        mu = mu + np.einsum("ij,ij->i", design.Z, u_star[design.area_index()])
    eps = rng.normal(size=design.n) * np.sqrt(fit.vc.sigma_e2 / design.w)
    return mu + eps


def v_inverse_blocks(fit: FittedLMM):
    """Cholesky factors of the stored V_d blocks (jittered if degenerate)."""
    chols = []
    for V in fit.per_area_V:
        try:
            chols.append(sla.cho_factor(V))
        except sla.LinAlgError:
            chols.append(sla.cho_factor(V + _SOLVE_FLOOR * np.eye(V.shape[0])))
    return chols
