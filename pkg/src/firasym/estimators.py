"""Kernel matrices, least-squares and regularized estimators, and the
marginal-likelihood hyper-parameter search.

The hyper-parameter cost is evaluated in its reduced n x n form

    cost(eta) = theta_ls' S(eta)^-1 theta_ls + logdet S(eta),
    S(eta)    = P(eta) + sigma2_hat * (Phi' Phi)^-1,

which differs from the full N x N marginal-likelihood objective only by an
eta-independent constant, so both have the same minimizer.  The search runs
in transformed coordinates (log for positive parameters, logit for decay
rates, atanh for correlations): a multi-start simplex stage followed by a
bound-constrained gradient polish.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve
from scipy.optimize import minimize
from scipy.special import expit

from .errors import NotPositiveDefiniteError, OutOfBoxError, RankDeficientError
from .signals import Dataset

_FAMILIES = ("ridge", "tc", "dc", "ss")

# Per-coordinate transforms used by the optimizer.
_COORD_KINDS = {
    "ridge": ("log",),
    "tc": ("log", "logit"),
    "ss": ("log", "logit"),
    "dc": ("log", "logit", "atanh"),
}

# Default search boxes: strictly interior so P(eta) stays positive definite.
_DEFAULT_BOXES = {
    "ridge": ((1e-9, 1e9),),
    "tc": ((1e-9, 1e9), (1e-6, 1.0 - 1e-6)),
    "ss": ((1e-9, 1e9), (1e-6, 1.0 - 1e-6)),
    "dc": ((1e-9, 1e9), (1e-6, 1.0 - 1e-6), (-1.0 + 1e-6, 1.0 - 1e-6)),
}

_COST_ON_FAILURE = 1e100

_EYE_CACHE: dict[int, np.ndarray] = {}


def _eye(n: int) -> np.ndarray:
    """Shared read-only identity; the hot cost path asks for it constantly."""
    mat = _EYE_CACHE.get(n)
    if mat is None:
        mat = np.eye(n)
        mat.setflags(write=False)
        _EYE_CACHE[n] = mat
    return mat


@dataclass
class KernelSpec:
    """Kernel family plus the closed hyper-parameter box Omega.

    Coordinates are (scale,), (scale, decay) or (scale, decay, correlation)
    depending on the family; ``omega`` is a (p, 2) array of [lo, hi] bounds.
    """

    family: str
    omega: np.ndarray = None

    def __post_init__(self) -> None:
        if self.family not in _FAMILIES:
            raise ValueError(f"unknown kernel family {self.family!r}")
        if self.omega is None:
            self.omega = np.array(_DEFAULT_BOXES[self.family], dtype=float)
        self.omega = np.asarray(self.omega, dtype=float)
        expected = len(_COORD_KINDS[self.family])
        if self.omega.shape != (expected, 2):
            raise ValueError(
                f"omega must have shape ({expected}, 2) for family {self.family!r}"
            )
        if np.any(self.omega[:, 0] >= self.omega[:, 1]):
            raise ValueError("each omega row must satisfy lo < hi")

    @property
    def p(self) -> int:
        return self.omega.shape[0]

    @property
    def coord_kinds(self) -> tuple[str, ...]:
        return _COORD_KINDS[self.family]

    def contains(self, eta: np.ndarray) -> bool:
        eta = np.asarray(eta, dtype=float)
        if eta.shape != (self.p,):
            return False
        box = self.omega
        return all(box[k, 0] <= eta[k] <= box[k, 1] for k in range(self.p))

    @classmethod
    def ridge(cls, omega=None) -> "KernelSpec":
        return cls("ridge", omega)

    @classmethod
    def tc(cls, omega=None) -> "KernelSpec":
        return cls("tc", omega)

    @classmethod
    def dc(cls, omega=None) -> "KernelSpec":
        return cls("dc", omega)

    @classmethod
    def ss(cls, omega=None) -> "KernelSpec":
        return cls("ss", omega)


@dataclass
class OptimizerOptions:
    """Knobs for the multi-start box-constrained search."""

    starts: int = 8
    max_iters: int = 400
    tol_cost: float = 1e-12
    tol_step: float = 1e-10


@dataclass
class OptimizerStats:
    starts: int
    iterations: int
    converged: bool
    at_boundary: bool


@dataclass
class EbFit:
    """Result of one marginal-likelihood fit on a single record."""

    eta_hat: np.ndarray
    sigma2_hat: float
    theta_ls: np.ndarray
    theta_tr: np.ndarray
    cost: float
    kernel: KernelSpec
    stats: OptimizerStats


def _pow(base: np.ndarray | float, expo: np.ndarray) -> np.ndarray:
    """base**expo with negative exponents clamped to zero.

    Callers multiply by a polynomial coefficient that vanishes exactly where
    the exponent was clamped, so the clamp never changes a value.
    """
    return np.asarray(base) ** np.maximum(expo, 0.0)


def kernel_matrix(
    spec: KernelSpec, eta: np.ndarray, n: int
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Kernel matrix P(eta) with analytic first and second derivatives.

    Returns (P, dP, d2P) with shapes (n, n), (p, n, n) and (p, p, n, n);
    d2P is symmetric in its first two axes.  Raises OutOfBoxError when eta
    is outside the configured box.
    """
    eta = np.asarray(eta, dtype=float)
    if not spec.contains(eta):
        raise OutOfBoxError(f"eta {eta} outside box {spec.omega.tolist()}")
    p = spec.p
    dP = np.zeros((p, n, n))
    d2P = np.zeros((p, p, n, n))
    idx = np.arange(1, n + 1, dtype=float)
    i = idx[:, None]
    j = idx[None, :]

    if spec.family == "ridge":
        P = eta[0] * np.eye(n)
        dP[0] = np.eye(n)
        return P, dP, d2P

    if spec.family == "tc":
        c, al = eta
        m = np.maximum(i, j)
        P = c * al**m
        dP[0] = al**m
        dP[1] = c * m * _pow(al, m - 1)
        d2P[0, 1] = d2P[1, 0] = m * _pow(al, m - 1)
        d2P[1, 1] = c * m * (m - 1) * _pow(al, m - 2)
        return P, dP, d2P

    if spec.family == "ss":
        c, al = eta
        m = np.maximum(i, j)
        e1 = i + j + m
        e2 = 3.0 * m
        base = al**e1 / 2.0 - al**e2 / 6.0
        P = c * base
        dP[0] = base
        dP[1] = c * (e1 * al ** (e1 - 1) / 2.0 - e2 * al ** (e2 - 1) / 6.0)
        d2P[0, 1] = d2P[1, 0] = dP[1] / c
        d2P[1, 1] = c * (
            e1 * (e1 - 1) * al ** (e1 - 2) / 2.0
            - e2 * (e2 - 1) * al ** (e2 - 2) / 6.0
        )
        return P, dP, d2P

    # dc; alpha is strictly positive so its (possibly negative) powers are
    # taken directly, while integer rho exponents are clamped
    c, al, rho = eta
    s = (i + j) / 2.0
    d = np.abs(i - j)
    rd = _pow(rho, d)
    rd1 = d * _pow(rho, d - 1)
    rd2 = d * (d - 1) * _pow(rho, d - 2)
    als = al**s
    als1 = s * al ** (s - 1)
    P = c * als * rd
    dP[0] = als * rd
    dP[1] = c * als1 * rd
    dP[2] = c * als * rd1
    d2P[0, 1] = d2P[1, 0] = als1 * rd
    d2P[0, 2] = d2P[2, 0] = als * rd1
    d2P[1, 1] = c * s * (s - 1) * al ** (s - 2) * rd
    d2P[1, 2] = d2P[2, 1] = c * als1 * rd1
    d2P[2, 2] = c * als * rd2
    return P, dP, d2P


def ls_estimate(data: Dataset) -> np.ndarray:
    """Least-squares coefficients via an orthogonal factorization of Phi."""
    theta, _, rank, _ = np.linalg.lstsq(data.phi, data.y, rcond=None)
    if rank < data.order:
        raise RankDeficientError("regression matrix is rank deficient")
    return theta


def noise_variance_estimate(data: Dataset) -> float:
    """Unbiased residual-based noise variance ||Y - Phi theta_ls||^2 / (N - n)."""
    resid = data.y - data.phi @ ls_estimate(data)
    return float(resid @ resid) / (data.n_samples - data.order)


def rls_estimate(data: Dataset, p_mat: np.ndarray, sigma2: float) -> np.ndarray:
    """Regularized least squares (Phi'Phi + sigma2 * P^-1)^-1 Phi'Y.

    Solved through the Cholesky factor L of P as L (L'GL + sigma2 I)^-1 L'b,
    which keeps the system positive definite without forming P^-1.
    """
    try:
        chol_p = np.linalg.cholesky(p_mat)
    except np.linalg.LinAlgError:
        raise NotPositiveDefiniteError("kernel matrix is not positive definite") from None
    gram = data.phi.T @ data.phi
    b = data.phi.T @ data.y
    inner = chol_p.T @ gram @ chol_p + sigma2 * np.eye(data.order)
    try:
        w = cho_solve(cho_factor(inner), chol_p.T @ b)
    except np.linalg.LinAlgError:
        raise NotPositiveDefiniteError("regularized normal equations not PD") from None
    return chol_p @ w


def _chol_inverse(mat: np.ndarray) -> np.ndarray:
    """Symmetrized inverse of a PD matrix via Cholesky."""
    inv = cho_solve(cho_factor(mat), np.eye(mat.shape[0]))
    return 0.5 * (inv + inv.T)


def _kernel_value(spec: KernelSpec, eta: np.ndarray, n: int) -> np.ndarray:
    """P(eta) alone; the simplex stage evaluates thousands of points and
    has no use for the derivative stacks."""
    eta = np.asarray(eta, dtype=float)
    if not spec.contains(eta):
        raise OutOfBoxError(f"eta {eta} outside box {spec.omega.tolist()}")
    if spec.family == "ridge":
        return eta[0] * _eye(n)
    idx = np.arange(1, n + 1, dtype=float)
    i = idx[:, None]
    j = idx[None, :]
    if spec.family == "tc":
        return eta[0] * eta[1] ** np.maximum(i, j)
    if spec.family == "ss":
        m = np.maximum(i, j)
        return eta[0] * (eta[1] ** (i + j + m) / 2.0 - eta[1] ** (3.0 * m) / 6.0)
    c, al, rho = eta
    return c * al ** ((i + j) / 2.0) * _pow(rho, np.abs(i - j))


def _reduced_cost_value(
    eta: np.ndarray,
    theta: np.ndarray,
    ridge_term: np.ndarray,
    spec: KernelSpec,
) -> float:
    """Value of theta' S^-1 theta + logdet S, S = P(eta) + ridge_term."""
    S = _kernel_value(spec, eta, theta.size) + ridge_term
    try:
        factor = cho_factor(S, lower=True, check_finite=False)
    except np.linalg.LinAlgError:
        raise NotPositiveDefiniteError(
            "S(eta) factorization failed; check the hyper-parameter box"
        ) from None
    z = cho_solve(factor, theta, check_finite=False)
    logdet = 2.0 * float(np.sum(np.log(np.diag(factor[0]))))
    return float(theta @ z) + logdet


def _reduced_cost_grad(
    eta: np.ndarray,
    theta: np.ndarray,
    ridge_term: np.ndarray,
    spec: KernelSpec,
) -> tuple[float, np.ndarray]:
    """Value and gradient of theta' S^-1 theta + logdet S, S = P(eta) + ridge_term."""
    n = theta.size
    P, dP, _ = kernel_matrix(spec, eta, n)
    S = P + ridge_term
    try:
        factor = cho_factor(S, lower=True, check_finite=False)
    except np.linalg.LinAlgError:
        raise NotPositiveDefiniteError(
            "S(eta) factorization failed; check the hyper-parameter box"
        ) from None
    z = cho_solve(factor, theta, check_finite=False)
    logdet = 2.0 * float(np.sum(np.log(np.diag(factor[0]))))
    value = float(theta @ z) + logdet
    s_inv = cho_solve(factor, _eye(n), check_finite=False)
    grad = np.array([-z @ dP[k] @ z + np.sum(s_inv * dP[k]) for k in range(spec.p)])
    return value, grad


def eb_cost(
    eta: np.ndarray,
    theta_ls: np.ndarray,
    gram: np.ndarray,
    sigma2_hat: float,
    spec: KernelSpec,
) -> tuple[float, np.ndarray]:
    """Reduced marginal-likelihood cost and its analytic gradient."""
    try:
        ginv = _chol_inverse(gram)
    except np.linalg.LinAlgError:
        raise RankDeficientError("gram matrix is not positive definite") from None
    return _reduced_cost_grad(np.asarray(eta, float), theta_ls, sigma2_hat * ginv, spec)


def _to_internal(spec: KernelSpec, eta: np.ndarray) -> np.ndarray:
    out = np.empty(spec.p)
    for k, kind in enumerate(spec.coord_kinds):
        v = eta[k]
        if kind == "log":
            out[k] = math.log(v)
        elif kind == "logit":
            out[k] = math.log(v / (1.0 - v))
        else:
            out[k] = math.atanh(v)
    return out


def _from_internal(spec: KernelSpec, x: np.ndarray) -> np.ndarray:
    out = np.empty(spec.p)
    for k, kind in enumerate(spec.coord_kinds):
        if kind == "log":
            out[k] = math.exp(x[k])
        elif kind == "logit":
            out[k] = float(expit(x[k]))
        else:
            out[k] = math.tanh(x[k])
    return out


def _chain_factor(spec: KernelSpec, eta: np.ndarray) -> np.ndarray:
    """d(eta)/d(internal coordinate), per coordinate."""
    fac = np.empty(spec.p)
    for k, kind in enumerate(spec.coord_kinds):
        if kind == "log":
            fac[k] = eta[k]
        elif kind == "logit":
            fac[k] = eta[k] * (1.0 - eta[k])
        else:
            fac[k] = 1.0 - eta[k] ** 2
    return fac


def _start_lattice(lo: np.ndarray, hi: np.ndarray, starts: int) -> np.ndarray:
    """Deterministic per-coordinate lattice of start points, box interior."""
    p = lo.size
    m = max(2, math.ceil(starts ** (1.0 / p)))
    margin = 0.1 * (hi - lo)
    axes = [np.linspace(lo[k] + margin[k], hi[k] - margin[k], m) for k in range(p)]
    grids = np.meshgrid(*axes, indexing="ij")
    points = np.stack([g.ravel() for g in grids], axis=-1)
    take = np.round(np.linspace(0, points.shape[0] - 1, starts)).astype(int)
    return points[take]


def _newton_polish(eval_internal, x, lo, hi, max_iters=30, grad_tol=1e-9):
    """Damped Newton steps on the analytic gradient (Hessian by central
    differences of the gradient), projected into the box.

    The quasi-Newton stage stops once cost changes fall below its relative
    floor, which can leave a gradient around 1e-6; this drives it further
    down so returned minima satisfy tight first-order optimality.
    """
    value, grad = eval_internal(x)
    iters = 0
    p = x.size
    for _ in range(max_iters):
        gnorm = np.linalg.norm(grad)
        if gnorm <= grad_tol or value >= _COST_ON_FAILURE:
            break
        hess = np.empty((p, p))
        for k in range(p):
            h = 1e-6 * max(1.0, abs(x[k]))
            xp, xm = x.copy(), x.copy()
            xp[k] = min(x[k] + h, hi[k])
            xm[k] = max(x[k] - h, lo[k])
            gp = eval_internal(xp)[1]
            gm = eval_internal(xm)[1]
            hess[:, k] = (gp - gm) / (xp[k] - xm[k])
        hess = 0.5 * (hess + hess.T)
        try:
            step = np.linalg.solve(hess, -grad)
        except np.linalg.LinAlgError:
            break
        if not np.all(np.isfinite(step)) or step @ grad >= 0.0:
            step = -grad
        # near the optimum the cost sits at its floating-point floor, so
        # progress is judged by the gradient norm, with the value pinned
        value_cap = value + 64.0 * np.finfo(float).eps * (1.0 + abs(value))
        improved = False
        for damp in (1.0, 0.5, 0.25, 0.1, 0.01):
            cand = np.clip(x + damp * step, lo, hi)
            cand_value, cand_grad = eval_internal(cand)
            iters += 1
            if cand_value < value or (
                cand_value <= value_cap and np.linalg.norm(cand_grad) < gnorm
            ):
                x, value, grad = cand, min(cand_value, value), cand_grad
                improved = True
                break
        if not improved:
            break
    return x, value, iters


def minimize_box(
    fun_grad,
    spec: KernelSpec,
    opts: OptimizerOptions | None = None,
    fun_value=None,
):
    """Multi-start minimization of fun_grad over the kernel box.

    ``fun_grad(eta) -> (value, gradient)`` is evaluated in original
    coordinates; the search itself runs in transformed coordinates.  The
    gradient-free simplex stage uses ``fun_value`` when supplied (a cheaper
    value-only evaluation).  Returns (eta, value, OptimizerStats).
    Equal-cost minima are broken towards the lexicographically smallest
    transformed point, so results are reproducible across platforms and
    start orderings.
    """
    opts = opts or OptimizerOptions()
    lo = _to_internal(spec, spec.omega[:, 0])
    hi = _to_internal(spec, spec.omega[:, 1])
    if fun_value is None:
        fun_value = lambda eta: fun_grad(eta)[0]

    def eval_internal(x: np.ndarray) -> tuple[float, np.ndarray]:
        eta = _from_internal(spec, x)
        try:
            value, grad = fun_grad(eta)
        except NotPositiveDefiniteError:
            return _COST_ON_FAILURE, np.zeros(spec.p)
        if not math.isfinite(value):
            return _COST_ON_FAILURE, np.zeros(spec.p)
        return value, grad * _chain_factor(spec, eta)

    def simplex_objective(x: np.ndarray) -> float:
        xc = np.clip(x, lo, hi)
        try:
            value = fun_value(_from_internal(spec, xc))
        except NotPositiveDefiniteError:
            return _COST_ON_FAILURE
        if not math.isfinite(value):
            return _COST_ON_FAILURE
        return value + float(np.sum((x - xc) ** 2))

    candidates: list[tuple[float, tuple[float, ...]]] = []
    iterations = 0
    any_success = False
    for x0 in _start_lattice(lo, hi, opts.starts):
        res_nm = minimize(
            simplex_objective,
            x0,
            method="Nelder-Mead",
            options={
                "maxiter": opts.max_iters,
                "xatol": opts.tol_step,
                "fatol": opts.tol_cost,
            },
        )
        iterations += res_nm.nit
        x_nm = np.clip(res_nm.x, lo, hi)
        res_pol = minimize(
            eval_internal,
            x_nm,
            jac=True,
            method="L-BFGS-B",
            bounds=list(zip(lo, hi)),
            options={"maxiter": opts.max_iters, "ftol": 1e-14, "gtol": 1e-10},
        )
        iterations += res_pol.nit
        x_lb = np.clip(res_pol.x, lo, hi)
        seed = x_lb if eval_internal(x_lb)[0] <= eval_internal(x_nm)[0] else x_nm
        x_pol, value_pol, newton_iters = _newton_polish(eval_internal, seed, lo, hi)
        iterations += newton_iters
        candidates.append((value_pol, tuple(x_pol)))
        any_success = any_success or res_nm.success or res_pol.success

    best_value = min(v for v, _ in candidates)
    slack = opts.tol_cost * (1.0 + abs(best_value))
    best_x = min(x for v, x in candidates if v <= best_value + slack)
    x_arr = np.array(best_x)
    value = eval_internal(x_arr)[0]
    at_boundary = bool(
        np.any(x_arr - lo <= 1e-6 * (hi - lo)) or np.any(hi - x_arr <= 1e-6 * (hi - lo))
    )
    stats = OptimizerStats(
        starts=opts.starts,
        iterations=int(iterations),
        converged=bool(any_success and value < _COST_ON_FAILURE),
        at_boundary=at_boundary,
    )
    return _from_internal(spec, x_arr), float(value), stats


def eb_estimate(
    data: Dataset, spec: KernelSpec, opts: OptimizerOptions | None = None
) -> EbFit:
    """Fit the hyper-parameters by marginal likelihood and return the
    regularized estimate computed at the winner."""
    theta_ls = ls_estimate(data)
    resid = data.y - data.phi @ theta_ls
    sigma2_hat = float(resid @ resid) / (data.n_samples - data.order)
    gram = data.phi.T @ data.phi
    try:
        ginv = _chol_inverse(gram)
    except np.linalg.LinAlgError:
        raise RankDeficientError("gram matrix is not positive definite") from None
    ridge_term = sigma2_hat * ginv

    def cost(eta: np.ndarray) -> tuple[float, np.ndarray]:
        return _reduced_cost_grad(eta, theta_ls, ridge_term, spec)

    def cost_value(eta: np.ndarray) -> float:
        return _reduced_cost_value(eta, theta_ls, ridge_term, spec)

    eta_hat, value, stats = minimize_box(cost, spec, opts, fun_value=cost_value)
    p_mat = kernel_matrix(spec, eta_hat, data.order)[0]
    theta_tr = rls_estimate(data, p_mat, sigma2_hat)
    return EbFit(
        eta_hat=eta_hat,
        sigma2_hat=sigma2_hat,
        theta_ls=theta_ls,
        theta_tr=theta_tr,
        cost=value,
        kernel=spec,
        stats=stats,
    )
