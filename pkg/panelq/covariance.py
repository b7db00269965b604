"""Per-individual covariance of the quantile regression coefficients.

Independent data use the Hendricks-Koenker sandwich B^-1 A B^-1 with difference-quotient
density weights; dependent data add truncated lag covariances of the quantile scores to A.
"""
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple
import logging

import numpy as np
from scipy import linalg
from scipy.stats import norm

from .errors import BandwidthError, ParameterError, SingularSandwichError
from .qr_core import DesignMatrix, QuantileFit, ZERO_RESIDUAL_TOL, _check_tau

logger = logging.getLogger(__name__)

MODES = ("iid", "dependent")
PSD_FLOOR = 1e-8


@dataclass
class CovarianceEstimate:
    a_hat: np.ndarray
    b_hat: np.ndarray
    v_hat: np.ndarray
    w_hat: np.ndarray
    mode: str
    d_T: float
    m_T: int = 0
    n_truncated_densities: int = 0
    psd_repaired: bool = False


@dataclass
class DensityWeights:
    weights: np.ndarray
    n_truncated: int


def _clamp_bandwidth(d_T: float, tau: float, T: int) -> float:
    edge = 1.0 / (2.0 * T)
    limit = min(tau, 1.0 - tau) - edge
    if limit <= 0:
        raise BandwidthError(
            f"no admissible bandwidth at tau={tau}, T={T}: tau +/- d_T must stay inside "
            f"({edge:.4g}, {1 - edge:.4g})")
    if d_T > limit:
        logger.warning("bandwidth %.4g clamped to %.4g (tau=%.3f, T=%d)", d_T, limit, tau, T)
        return limit
    return d_T


def hall_sheather_bandwidth(tau: float, T: int, alpha: float = 0.05) -> float:
    tau = _check_tau(tau)
    if T < 2:
        raise ParameterError(f"bandwidth needs T >= 2, got {T}")
    z = norm.ppf(tau)
    num = 1.5 * norm.pdf(z) ** 2
    den = 2.0 * z ** 2 + 1.0
    h = T ** (-1.0 / 3) * norm.ppf(1.0 - alpha / 2.0) ** (2.0 / 3) * (num / den) ** (1.0 / 3)
    return _clamp_bandwidth(float(h), tau, T)


def bofinger_bandwidth(tau: float, T: int) -> float:
    tau = _check_tau(tau)
    if T < 2:
        raise ParameterError(f"bandwidth needs T >= 2, got {T}")
    z = norm.ppf(tau)
    num = 4.5 * norm.pdf(z) ** 4
    den = (2.0 * z ** 2 + 1.0) ** 2
    h = T ** (-1.0 / 5) * (num / den) ** (1.0 / 5)
    return _clamp_bandwidth(float(h), tau, T)


def select_bandwidth(tau: float, T: int, rule: str = "hall_sheather", alpha: float = 0.05,
                     override: Optional[float] = None) -> float:
    if override is not None:
        return float(override)
    if rule == "hall_sheather":
        return hall_sheather_bandwidth(tau, T, alpha)
    if rule == "bofinger":
        return bofinger_bandwidth(tau, T)
    raise ParameterError(f"Unknown bandwidth rule: {rule}")


def default_lag(T: int) -> int:
    """ceil(T^(1/5)), clamped to T - 1."""
    if T < 2:
        raise ParameterError(f"lag rule needs T >= 2, got {T}")
    m = max(1, int(round(T ** 0.2)))
    while m ** 5 < T:
        m += 1
    while m > 1 and (m - 1) ** 5 >= T:
        m -= 1
    return min(m, T - 1)


def density_weights(design: DesignMatrix, fit_minus: QuantileFit, fit_plus: QuantileFit,
                    d_T: float, floor: float = 1e-6) -> DensityWeights:
    """f_t = 2 d_T / Z_t'(gamma(tau + d_T) - gamma(tau - d_T)), denominator floored."""
    eps = floor * 2.0 * d_T
    spacing = design.values @ (fit_plus.gamma - fit_minus.gamma)
    clipped = spacing < eps
    n_truncated = int(clipped.sum())
    if n_truncated:
        logger.debug("%d of %d density denominators floored", n_truncated, design.T)
    return DensityWeights(weights=2.0 * d_T / np.maximum(spacing, eps), n_truncated=n_truncated)


def residual_scores(design: DesignMatrix, response, fit: QuantileFit, tau: float) -> np.ndarray:
    """Rows Z_t (tau - 1(Y_t <= Z_t' gamma)); interpolated rows count as Y_t <= fit."""
    tau = _check_tau(tau)
    y = np.asarray(response, dtype=np.float64)
    r = y - design.values @ fit.gamma
    r[np.abs(r) <= ZERO_RESIDUAL_TOL * (1.0 + np.abs(y))] = 0.0
    return design.values * (tau - (r <= 0))[:, None]


def _iid_a(Z: np.ndarray, tau: float) -> np.ndarray:
    return tau * (1.0 - tau) * (Z.T @ Z) / Z.shape[0]


def _b_hat(Z: np.ndarray, f: np.ndarray) -> np.ndarray:
    return (Z * f[:, None]).T @ Z / Z.shape[0]


def _check_condition(m: np.ndarray, label: str, condition_limit: float, individual=None) -> None:
    cond = np.linalg.cond(m)
    if not np.isfinite(cond) or cond > condition_limit:
        raise SingularSandwichError(
            f"{label} matrix numerically singular (condition number {cond:.3g})"
            + (f" for individual {individual}" if individual is not None else ""),
            individual=individual)


def _sandwich(a_hat: np.ndarray, b_hat: np.ndarray, condition_limit: float,
              individual=None) -> Tuple[np.ndarray, np.ndarray]:
    """V = B^-1 A B^-1 and the slope block of V^-1 = B A^-1 B."""
    _check_condition(b_hat, "B", condition_limit, individual)
    _check_condition(a_hat, "A", condition_limit, individual)
    binv_a = linalg.solve(b_hat, a_hat, assume_a='sym')
    v_hat = linalg.solve(b_hat, binv_a.T, assume_a='sym').T
    v_hat = 0.5 * (v_hat + v_hat.T)

    p = v_hat.shape[0] - 1
    if p == 0:
        return v_hat, np.empty((0, 0))
    # V^-1 = B A^-1 B; V itself is conditioned like B squared
    v_inv = b_hat @ linalg.solve(a_hat, b_hat, assume_a='sym')
    v_inv = 0.5 * (v_inv + v_inv.T)
    return v_hat, v_inv[1:, 1:]


def sandwich_iid(design: DesignMatrix, response, fits: Sequence[QuantileFit], tau: float,
                 d_T: float, floor: float = 1e-6, condition_limit: float = 1e12,
                 individual=None) -> CovarianceEstimate:
    fit_minus, _, fit_plus = fits
    dens = density_weights(design, fit_minus, fit_plus, d_T, floor)
    Z = design.values
    a_hat = _iid_a(Z, tau)
    b_hat = _b_hat(Z, dens.weights)
    v_hat, w_hat = _sandwich(a_hat, b_hat, condition_limit, individual)
    return CovarianceEstimate(a_hat=a_hat, b_hat=b_hat, v_hat=v_hat, w_hat=w_hat, mode="iid",
                              d_T=d_T, m_T=0, n_truncated_densities=dens.n_truncated)


def _project_psd(a: np.ndarray) -> Tuple[np.ndarray, bool]:
    """Floor the eigenvalues at PSD_FLOOR times the largest one."""
    vals, vecs = np.linalg.eigh(a)
    floor = PSD_FLOOR * max(float(vals.max()), 0.0)
    if vals.min() >= floor:
        return a, False
    vals = np.clip(vals, floor, None)
    repaired = (vecs * vals) @ vecs.T
    return 0.5 * (repaired + repaired.T), True


def sandwich_dependent(design: DesignMatrix, response, fits: Sequence[QuantileFit], tau: float,
                       d_T: float, m_T: int, floor: float = 1e-6, condition_limit: float = 1e12,
                       individual=None) -> CovarianceEstimate:
    T = design.T
    if not 0 <= m_T <= T - 1:
        raise ParameterError(f"truncation lag m_T={m_T} must lie in [0, {T - 1}]")
    fit_minus, fit_tau, fit_plus = fits
    dens = density_weights(design, fit_minus, fit_plus, d_T, floor)
    Z = design.values
    a_hat = _iid_a(Z, tau)
    repaired = False
    if m_T > 0:
        scores = residual_scores(design, response, fit_tau, tau)
        for j in range(1, m_T + 1):
            cross = scores[:-j].T @ scores[j:] / T
            a_hat = a_hat + (1.0 - j / T) * (cross + cross.T)
        a_hat, repaired = _project_psd(a_hat)
        if repaired:
            logger.warning("lag-augmented A matrix projected onto the PSD cone%s",
                           f" (individual {individual})" if individual is not None else "")
    b_hat = _b_hat(Z, dens.weights)
    v_hat, w_hat = _sandwich(a_hat, b_hat, condition_limit, individual)
    return CovarianceEstimate(a_hat=a_hat, b_hat=b_hat, v_hat=v_hat, w_hat=w_hat,
                              mode="dependent", d_T=d_T, m_T=m_T,
                              n_truncated_densities=dens.n_truncated, psd_repaired=repaired)
