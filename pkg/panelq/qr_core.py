"""Single-equation quantile regression.

The solver is a Frisch-Newton primal-dual interior point method on the dual of the
check-loss linear program, followed by a crossover that moves to an optimal vertex
(a basis of p+1 interpolated observations). A brute-force vertex enumerator and a
subgradient certificate are provided for verification.
"""
from dataclasses import dataclass, field
from itertools import combinations
from typing import List, Optional, Tuple
import logging

import numpy as np
from scipy import linalg
from scipy.optimize import linprog

from .errors import (
    DegenerateDesignError,
    InsufficientDataError,
    OracleSizeError,
    ParameterError,
    SolverConvergenceError,
    BandwidthError,
)

logger = logging.getLogger(__name__)

STEP_FRACTION = 0.9995
ZERO_RESIDUAL_TOL = 1e-8
# interior point result is handed to the crossover unless the gap is still this large
LOOSE_GAP = 1e-4


def _check_tau(tau: float) -> float:
    tau = float(tau)
    if not 0.0 < tau < 1.0:
        raise ParameterError(f"quantile level must lie in (0, 1), got {tau}")
    return tau


@dataclass(frozen=True)
class DesignMatrix:
    """Rows Z_t' = (1, X_t'); the first column is the intercept."""
    values: np.ndarray

    def __post_init__(self):
        z = np.asarray(self.values, dtype=np.float64)
        if z.ndim == 1:
            z = z[:, None]
        if z.ndim != 2 or z.shape[1] < 1:
            raise ParameterError(f"design must be a 2-d array, got shape {z.shape}")
        if not np.all(np.isfinite(z)):
            raise ParameterError("design contains non-finite entries")
        if not np.all(z[:, 0] == 1.0):
            raise ParameterError("first design column must be the intercept (all ones)")
        if z.shape[0] < z.shape[1]:
            raise InsufficientDataError(
                f"{z.shape[0]} observations cannot identify {z.shape[1]} coefficients")
        z.setflags(write=False)
        object.__setattr__(self, 'values', z)

    @classmethod
    def from_regressors(cls, x) -> 'DesignMatrix':
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 1:
            x = x[:, None]
        return cls(np.column_stack([np.ones(x.shape[0]), x]))

    @property
    def T(self) -> int:
        return self.values.shape[0]

    @property
    def p(self) -> int:
        return self.values.shape[1] - 1

    @property
    def n_coef(self) -> int:
        return self.values.shape[1]

    def is_full_rank(self) -> bool:
        return np.linalg.matrix_rank(self.values) == self.n_coef


@dataclass
class QuantileFit:
    tau: float
    gamma: np.ndarray
    residuals: np.ndarray
    objective: float
    n_zero_residuals: int
    basis: Tuple[int, ...] = ()
    iterations: int = 0
    pivots: int = 0

    @property
    def intercept(self) -> float:
        return float(self.gamma[0])

    @property
    def slopes(self) -> np.ndarray:
        return self.gamma[1:]


@dataclass
class OptimalityReport:
    optimal: bool
    direction: Optional[np.ndarray] = None  # coordinate direction with the worst derivative
    derivative: float = 0.0
    multipliers: Optional[np.ndarray] = field(default=None, repr=False)

    def __bool__(self) -> bool:
        return self.optimal


def check_loss(u, tau: float):
    """rho_tau(u) = (tau - 1(u <= 0)) * u, elementwise for arrays."""
    tau = _check_tau(tau)
    u = np.asarray(u, dtype=np.float64)
    out = np.where(u > 0, tau * u, (tau - 1.0) * u)
    return float(out) if out.ndim == 0 else out


def mean_check_loss(design: DesignMatrix, response, gamma, tau: float) -> float:
    r = np.asarray(response, dtype=np.float64) - design.values @ np.asarray(gamma, dtype=np.float64)
    return float(np.mean(check_loss(r, tau)))


def _zero_mask(residuals: np.ndarray, response: np.ndarray) -> np.ndarray:
    return np.abs(residuals) <= ZERO_RESIDUAL_TOL * (1.0 + np.abs(response))


def _max_step(v: np.ndarray, dv: np.ndarray) -> float:
    neg = dv < 0
    if not np.any(neg):
        return 1e20
    return float(np.min(-v[neg] / dv[neg]))


class QuantileRegression:
    """Quantile regression of one response on one design.

    The design is validated once; ``fit`` can then be called for several levels.
    """

    def __init__(self, design: DesignMatrix, response, tol: float = 1e-9, max_iter: int = 100):
        y = np.asarray(response, dtype=np.float64).ravel()
        if y.shape[0] != design.T:
            raise ParameterError(f"response has {y.shape[0]} rows, design has {design.T}")
        if not np.all(np.isfinite(y)):
            raise ParameterError("response contains non-finite entries")
        if not design.is_full_rank():
            raise DegenerateDesignError(
                f"design of shape {design.values.shape} is rank deficient")
        self.design = design
        self.y = y
        self.tol = tol
        self.max_iter = max_iter

    def fit(self, tau: float) -> QuantileFit:
        tau = _check_tau(tau)
        gamma0, iterations, gap = self._interior_point(tau)
        basis, gamma, pivots = self._crossover(tau, gamma0)
        residuals = self.y - self.design.values @ gamma
        residuals[list(basis)] = 0.0
        objective = float(np.mean(check_loss(residuals, tau)))
        logger.debug("tau=%.4f: %d interior iterations (gap %.3g), %d crossover pivots",
                     tau, iterations, gap, pivots)
        return QuantileFit(
            tau=tau,
            gamma=gamma,
            residuals=residuals,
            objective=objective,
            n_zero_residuals=int(np.sum(_zero_mask(residuals, self.y))),
            basis=tuple(int(b) for b in basis),
            iterations=iterations,
            pivots=pivots,
        )

    # Interior point on the dual: max y'a s.t. Z'a = (1-tau) Z'1, 0 <= a <= 1
    def _interior_point(self, tau: float) -> Tuple[np.ndarray, int, float]:
        Z, y = self.design.values, self.y
        T = Z.shape[0]
        c = -y
        b = (1.0 - tau) * Z.sum(axis=0)
        x = np.full(T, 1.0 - tau)
        s = 1.0 - x
        dual = np.linalg.lstsq(Z, c, rcond=None)[0]
        r = c - Z @ dual
        r = r + 0.001 * (r == 0)
        z = np.where(r > 0, r, 0.0)
        w = z - r
        gap = float(c @ x - dual @ b + w.sum())
        scale = 1.0 + float(np.abs(y).sum())

        it = 0
        while gap > self.tol * scale and it < self.max_iter:
            it += 1
            q = 1.0 / (z / x + w / s)
            r = z - w
            try:
                factor = linalg.cho_factor(Z.T @ (Z * q[:, None]))
            except linalg.LinAlgError:
                raise SolverConvergenceError(
                    "normal equations lost positive definiteness",
                    {"iterations": it, "gap": gap})
            rhs = q * r
            dy = linalg.cho_solve(factor, Z.T @ rhs)
            dx = q * (Z @ dy - r)
            ds = -dx
            dz = -z * (dx / x + 1.0)
            dw = -w * (ds / s + 1.0)
            fp = min(STEP_FRACTION * min(_max_step(x, dx), _max_step(s, ds)), 1.0)
            fd = min(STEP_FRACTION * min(_max_step(w, dw), _max_step(z, dz)), 1.0)

            if min(fp, fd) < 1.0:
                # Mehrotra corrector
                mu = z @ x + w @ s
                g = (z + fd * dz) @ (x + fp * dx) + (w + fd * dw) @ (s + fp * ds)
                mu = mu * (g / mu) ** 3 / (2.0 * T)
                dxdz = dx * dz
                dsdw = ds * dw
                xinv = 1.0 / x
                sinv = 1.0 / s
                xi = mu * (xinv - sinv)
                rhs = rhs + q * (dxdz - dsdw - xi)
                dy = linalg.cho_solve(factor, Z.T @ rhs)
                dx = q * (Z @ dy + xi - r - dxdz + dsdw)
                ds = -dx
                dz = mu * xinv - z - xinv * z * dx - dxdz
                dw = mu * sinv - w - sinv * w * ds - dsdw
                fp = min(STEP_FRACTION * min(_max_step(x, dx), _max_step(s, ds)), 1.0)
                fd = min(STEP_FRACTION * min(_max_step(w, dw), _max_step(z, dz)), 1.0)

            x = x + fp * dx
            s = s + fp * ds
            dual = dual + fd * dy
            w = w + fd * dw
            z = z + fd * dz
            gap = float(c @ x - dual @ b + w.sum())

        if not np.isfinite(gap) or gap > LOOSE_GAP * scale:
            raise SolverConvergenceError(
                f"interior point stopped after {it} iterations with duality gap {gap:.3g}",
                {"iterations": it, "gap": gap, "tau": tau})
        return -dual, it, gap

    def _initial_basis(self, gamma0: np.ndarray) -> List[int]:
        Z = self.design.values
        K = Z.shape[1]
        order = np.argsort(np.abs(self.y - Z @ gamma0), kind='stable')
        basis: List[int] = []
        for t in order:
            trial = basis + [int(t)]
            if np.linalg.matrix_rank(Z[trial]) == len(trial):
                basis = trial
                if len(basis) == K:
                    return basis
        raise DegenerateDesignError("no invertible basis found for crossover")

    def _crossover(self, tau: float, gamma0: np.ndarray) -> Tuple[List[int], np.ndarray, int]:
        """Exchange basis rows until no edge direction decreases the loss."""
        Z, y = self.design.values, self.y
        T, K = Z.shape
        basis = self._initial_basis(gamma0)
        zero_tol = ZERO_RESIDUAL_TOL * (1.0 + np.abs(y))
        max_pivots = 50 * T + 100

        for pivot in range(max_pivots + 1):
            lu = linalg.lu_factor(Z[basis])
            gamma = linalg.lu_solve(lu, y[basis])
            r = y - Z @ gamma
            r[basis] = 0.0
            nonbasic = np.ones(T, dtype=bool)
            nonbasic[basis] = False

            # column k: change of fitted values when the k-th basis fit moves by +1
            C = Z @ linalg.lu_solve(lu, np.eye(K))
            C[basis] = 0.0
            pos = nonbasic & (r > zero_tol)
            neg = nonbasic & (r < -zero_tol)
            deg = nonbasic & ~pos & ~neg

            base = -(tau * C[pos].sum(axis=0)) + (1.0 - tau) * C[neg].sum(axis=0)
            # degenerate rows always count with the sign that makes their loss grow
            deg_up = (tau * np.maximum(-C[deg], 0) + (1 - tau) * np.maximum(C[deg], 0)).sum(axis=0)
            deg_down = (tau * np.maximum(C[deg], 0) + (1 - tau) * np.maximum(-C[deg], 0)).sum(axis=0)
            slope_up = base + deg_up + (1.0 - tau)
            slope_down = -base + deg_down + tau
            slopes = np.concatenate([slope_up, slope_down])
            scale = 1.0 + np.abs(C).sum(axis=0)
            scale = np.concatenate([scale, scale])
            j = int(np.argmin(slopes / scale))
            if slopes[j] >= -1e-10 * scale[j]:
                return basis, gamma, pivot
            if pivot == max_pivots:
                break

            k = j % K
            sign = 1.0 if j < K else -1.0
            c = sign * C[:, k]
            movable = (pos | neg) & (c != 0)
            idx = np.flatnonzero(movable)
            steps = r[idx] / c[idx]
            ahead = steps > 0
            idx, steps = idx[ahead], steps[ahead]
            order = np.lexsort((idx, steps))
            slope = slopes[j]
            entering = None
            for o in order:
                slope += abs(c[idx[o]])
                if slope >= 0:
                    entering = int(idx[o])
                    break
            if entering is None:
                raise SolverConvergenceError("check loss unbounded along an edge",
                                             {"pivots": pivot, "tau": tau})
            basis[k] = entering

        raise SolverConvergenceError(f"crossover did not terminate in {max_pivots} pivots",
                                     {"pivots": max_pivots, "tau": tau})


def fit_qr(design: DesignMatrix, response, tau: float, tol: float = 1e-9,
           max_iter: int = 100) -> QuantileFit:
    return QuantileRegression(design, response, tol=tol, max_iter=max_iter).fit(tau)


def fit_qr_triple(design: DesignMatrix, response, tau: float, d_T: float,
                  tol: float = 1e-9, max_iter: int = 100) -> Tuple[QuantileFit, QuantileFit, QuantileFit]:
    """Fits at tau - d_T, tau and tau + d_T on one validated problem."""
    tau = _check_tau(tau)
    if not 0.0 < d_T < min(tau, 1.0 - tau):
        raise BandwidthError(
            f"bandwidth d_T={d_T} must lie in (0, {min(tau, 1.0 - tau):.6g}) at tau={tau}")
    problem = QuantileRegression(design, response, tol=tol, max_iter=max_iter)
    return problem.fit(tau - d_T), problem.fit(tau), problem.fit(tau + d_T)


def qr_oracle(design: DesignMatrix, response, tau: float, cap: int = 15) -> QuantileFit:
    """Enumerate every exactly interpolating basis and keep the best one."""
    tau = _check_tau(tau)
    Z = design.values
    y = np.asarray(response, dtype=np.float64).ravel()
    T, K = Z.shape
    if T > cap:
        raise OracleSizeError(f"oracle refuses T={T} above the cap of {cap}")
    if y.shape[0] != T:
        raise ParameterError(f"response has {y.shape[0]} rows, design has {T}")

    best = None
    for subset in combinations(range(T), K):
        sub = Z[list(subset)]
        if np.linalg.matrix_rank(sub) < K:
            continue
        gamma = np.linalg.solve(sub, y[list(subset)])
        r = y - Z @ gamma
        r[list(subset)] = 0.0
        obj = float(np.mean(check_loss(r, tau)))
        if best is None or obj < best[0]:
            best = (obj, gamma, r, subset)
    if best is None:
        raise DegenerateDesignError("every subset of observations is singular")

    obj, gamma, r, subset = best
    return QuantileFit(
        tau=tau,
        gamma=gamma,
        residuals=r,
        objective=obj,
        n_zero_residuals=int(np.sum(_zero_mask(r, y))),
        basis=tuple(subset),
    )


def _coordinate_derivatives(Z: np.ndarray, r: np.ndarray, zero: np.ndarray, tau: float) -> np.ndarray:
    """One-sided derivatives of the mean loss along +e_j (first K) and -e_j (last K)."""
    T = Z.shape[0]
    pos, neg = (r > 0) & ~zero, (r < 0) & ~zero
    moving = -tau * Z[pos].sum(axis=0) + (1 - tau) * Z[neg].sum(axis=0)
    kink_up = (tau * np.maximum(-Z[zero], 0) + (1 - tau) * np.maximum(Z[zero], 0)).sum(axis=0)
    kink_down = (tau * np.maximum(Z[zero], 0) + (1 - tau) * np.maximum(-Z[zero], 0)).sum(axis=0)
    return np.concatenate([moving + kink_up, -moving + kink_down]) / T


def verify_optimality(design: DesignMatrix, fit: QuantileFit, tol: float = 1e-7) -> OptimalityReport:
    """Subgradient certificate: zero must be a subgradient of the loss at fit.gamma.

    Zero-residual rows may take any weight in [tau-1, tau]; the remaining rows contribute
    tau (positive residual) or tau-1 (negative residual).
    """
    Z = design.values
    tau = fit.tau
    r = np.asarray(fit.residuals, dtype=np.float64)
    y = Z @ fit.gamma + r
    zero = _zero_mask(r, y)
    pos, neg = (r > 0) & ~zero, (r < 0) & ~zero
    g = tau * Z[pos].sum(axis=0) - (1 - tau) * Z[neg].sum(axis=0)
    scale = 1.0 + np.abs(Z).sum()

    multipliers = None
    n_zero = int(zero.sum())
    if n_zero == 0:
        ok = bool(np.max(np.abs(g)) <= 1e-9 * scale)
    elif n_zero == Z.shape[1] and np.linalg.matrix_rank(Z[zero]) == n_zero:
        multipliers = np.linalg.solve(Z[zero].T, -g)
        ok = bool(np.all(multipliers >= tau - 1 - tol) and np.all(multipliers <= tau + tol))
    else:
        res = linprog(np.zeros(n_zero), A_eq=Z[zero].T, b_eq=-g,
                      bounds=[(tau - 1 - tol, tau + tol)] * n_zero, method='highs')
        ok = bool(res.success)
        if ok:
            multipliers = res.x

    derivs = _coordinate_derivatives(Z, r, zero, tau)
    j = int(np.argmin(derivs))
    K = Z.shape[1]
    direction = np.zeros(K)
    direction[j % K] = 1.0 if j < K else -1.0
    return OptimalityReport(optimal=ok, direction=None if ok else direction,
                            derivative=float(derivs[j]), multipliers=multipliers)
