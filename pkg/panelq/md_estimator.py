"""Minimum-distance aggregation of per-individual quantile regression slopes."""
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence
import logging

import numpy as np
from scipy import linalg
from scipy.stats import chi2, norm

from .config import EstimatorSettings
from .covariance import (
    CovarianceEstimate,
    MODES,
    default_lag,
    sandwich_dependent,
    sandwich_iid,
    select_bandwidth,
)
from .errors import (
    AggregationError,
    EstimationError,
    InferenceError,
    InsufficientDataError,
    ParameterError,
)
from .panel_io import PanelDataset
from .qr_core import QuantileRegression, _check_tau, fit_qr_triple

logger = logging.getLogger(__name__)


@dataclass
class IndividualResult:
    """gamma = (alpha_i, beta_i')' at tau and the weight block W_i."""
    id: str
    gamma: np.ndarray
    w_hat: np.ndarray
    d_T: float = 0.0
    m_T: int = 0
    n_truncated_densities: int = 0
    psd_repaired: bool = False
    covariance: Optional[CovarianceEstimate] = field(default=None, repr=False, compare=False)

    @property
    def alpha(self) -> float:
        return float(self.gamma[0])

    @property
    def beta(self) -> np.ndarray:
        return self.gamma[1:]

    def to_dict(self) -> Dict:
        return {
            'id': self.id,
            'alpha': float(self.gamma[0]),
            'gamma': self.gamma.tolist(),
            'w_hat': self.w_hat.tolist(),
            'd_T': self.d_T,
            'm_T': self.m_T,
            'n_truncated_densities': self.n_truncated_densities,
            'psd_repaired': self.psd_repaired,
        }

    @classmethod
    def from_dict(cls, data: Dict) -> 'IndividualResult':
        p = len(data['gamma']) - 1
        return cls(
            id=data['id'],
            gamma=np.asarray(data['gamma'], dtype=np.float64),
            w_hat=np.asarray(data['w_hat'], dtype=np.float64).reshape(p, p),
            d_T=data.get('d_T', 0.0),
            m_T=data.get('m_T', 0),
            n_truncated_densities=data.get('n_truncated_densities', 0),
            psd_repaired=data.get('psd_repaired', False),
        )


@dataclass
class MDEstimate:
    tau: float
    beta_md: np.ndarray
    sigma_hat: np.ndarray
    std_errors: np.ndarray
    n: int
    T: int
    mode: str
    weight_sum: np.ndarray
    per_individual: List[IndividualResult]
    excluded: List[str] = field(default_factory=list)

    @property
    def p(self) -> int:
        return self.beta_md.shape[0]

    def to_dict(self) -> Dict:
        return {
            'tau': self.tau,
            'mode': self.mode,
            'n': self.n,
            'T': self.T,
            'beta_md': self.beta_md.tolist(),
            'std_errors': self.std_errors.tolist(),
            'sigma_hat': self.sigma_hat.tolist(),
            'weight_sum': self.weight_sum.tolist(),
            'bandwidths': {
                'd_T': sorted({r.d_T for r in self.per_individual}),
                'm_T': sorted({r.m_T for r in self.per_individual}),
            },
            'per_individual': [r.to_dict() for r in self.per_individual],
            'excluded': list(self.excluded),
        }

    @classmethod
    def from_dict(cls, data: Dict) -> 'MDEstimate':
        p = len(data['beta_md'])
        return cls(
            tau=data['tau'],
            beta_md=np.asarray(data['beta_md'], dtype=np.float64),
            sigma_hat=np.asarray(data['sigma_hat'], dtype=np.float64).reshape(p, p),
            std_errors=np.asarray(data['std_errors'], dtype=np.float64),
            n=data['n'],
            T=data['T'],
            mode=data['mode'],
            weight_sum=np.asarray(data['weight_sum'], dtype=np.float64).reshape(p, p),
            per_individual=[IndividualResult.from_dict(r) for r in data['per_individual']],
            excluded=list(data.get('excluded', [])),
        )


@dataclass
class WaldResult:
    statistic: float
    p_value: float
    df: int


def _combine(results: Sequence[IndividualResult], T: int, condition_limit: float):
    """beta = (sum W_i)^-1 sum W_i beta_i, Sigma = ((1/n) sum W_i)^-1, in index order."""
    n = len(results)
    if n == 0:
        raise AggregationError("no individuals left to aggregate")
    p = results[0].w_hat.shape[0]
    weight_sum = np.zeros((p, p))
    weighted = np.zeros(p)
    for r in results:
        weight_sum = weight_sum + r.w_hat
        weighted = weighted + r.w_hat @ r.beta
    weight_sum = 0.5 * (weight_sum + weight_sum.T)
    cond = np.linalg.cond(weight_sum)
    if not np.isfinite(cond) or cond > condition_limit:
        raise AggregationError(f"sum of weight matrices is singular (condition number {cond:.3g})")
    beta_md = linalg.solve(weight_sum, weighted, assume_a='sym')
    sigma_hat = n * linalg.inv(weight_sum)
    sigma_hat = 0.5 * (sigma_hat + sigma_hat.T)
    std_errors = np.sqrt(np.diag(sigma_hat) / (n * T))
    return beta_md, sigma_hat, std_errors, weight_sum


def _check_panel(panel: PanelDataset) -> None:
    if panel.n < 1:
        raise InsufficientDataError("panel has no individuals")
    if panel.T < panel.p + 2:
        raise InsufficientDataError(
            f"T={panel.T} is too short for p={panel.p} regressors (need T >= p + 2)")


def _fit_individual(panel: PanelDataset, i: int, tau: float, mode: str, d_T: float, m_T: int,
                    settings: EstimatorSettings) -> IndividualResult:
    design, y = panel.design(i), panel.response(i)
    fits = fit_qr_triple(design, y, tau, d_T, tol=settings.qr_tol, max_iter=settings.qr_max_iter)
    if mode == "iid":
        cov = sandwich_iid(design, y, fits, tau, d_T, settings.density_floor,
                           settings.condition_limit, individual=panel.ids[i])
    else:
        cov = sandwich_dependent(design, y, fits, tau, d_T, m_T, settings.density_floor,
                                 settings.condition_limit, individual=panel.ids[i])
    if cov.n_truncated_densities:
        logger.warning("individual %s: %d density weights floored", panel.ids[i],
                       cov.n_truncated_densities)
    return IndividualResult(
        id=panel.ids[i],
        gamma=fits[1].gamma,
        w_hat=cov.w_hat,
        d_T=d_T,
        m_T=cov.m_T,
        n_truncated_densities=cov.n_truncated_densities,
        psd_repaired=cov.psd_repaired,
        covariance=cov,
    )


def _tag_individual(error: EstimationError, individual: str) -> EstimationError:
    """Attach the id to the original exception, keeping its diagnostics."""
    error.individual = individual
    if f"individual {individual}" not in str(error):
        error.args = (f"individual {individual}: {error}",) + error.args[1:]
    return error


def _run_individuals(panel: PanelDataset, work, drop_failed: bool, threads: int):
    def guarded(i):
        try:
            return work(i)
        except EstimationError as e:
            return e

    if threads > 1 and panel.n > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            outcomes = list(pool.map(guarded, range(panel.n)))
    else:
        outcomes = [guarded(i) for i in range(panel.n)]

    results, excluded = [], []
    for i, outcome in enumerate(outcomes):
        if isinstance(outcome, EstimationError):
            if not drop_failed:
                raise _tag_individual(outcome, panel.ids[i])
            logger.warning("dropping individual %s: %s", panel.ids[i], outcome)
            excluded.append(panel.ids[i])
        else:
            results.append(outcome)
    return results, excluded


def estimate_md(panel: PanelDataset, tau: float, mode: str = "iid",
                settings: Optional[EstimatorSettings] = None, d_T: Optional[float] = None,
                m_T: Optional[int] = None, drop_failed: Optional[bool] = None,
                threads: int = 1) -> MDEstimate:
    """Feasible MD-QR estimate with Hendricks-Koenker (iid) or lag-augmented (dependent) weights."""
    tau = _check_tau(tau)
    if mode not in MODES:
        raise ParameterError(f"mode must be one of {MODES}, got {mode!r}")
    settings = settings or EstimatorSettings()
    _check_panel(panel)
    drop_failed = settings.drop_failed if drop_failed is None else drop_failed

    d_T = select_bandwidth(tau, panel.T, settings.bandwidth_rule, settings.alpha,
                           d_T if d_T is not None else settings.d_T)
    if mode == "dependent":
        m_T = m_T if m_T is not None else settings.m_T
        m_T = default_lag(panel.T) if m_T is None else int(m_T)
    else:
        m_T = 0

    logger.info("MD-QR: tau=%.3f mode=%s n=%d T=%d d_T=%.4g m_T=%d",
                tau, mode, panel.n, panel.T, d_T, m_T)
    results, excluded = _run_individuals(
        panel, lambda i: _fit_individual(panel, i, tau, mode, d_T, m_T, settings),
        drop_failed, threads)
    beta_md, sigma_hat, std_errors, weight_sum = _combine(results, panel.T, settings.condition_limit)
    return MDEstimate(tau=tau, beta_md=beta_md, sigma_hat=sigma_hat, std_errors=std_errors,
                      n=len(results), T=panel.T, mode=mode, weight_sum=weight_sum,
                      per_individual=results, excluded=excluded)


def estimate_md_infeasible(panel: PanelDataset, tau: float, true_weights: Sequence,
                           settings: Optional[EstimatorSettings] = None,
                           threads: int = 1) -> MDEstimate:
    """Same combination rule with externally supplied p x p weights (e.g. population W_i)."""
    tau = _check_tau(tau)
    settings = settings or EstimatorSettings()
    _check_panel(panel)
    if len(true_weights) != panel.n:
        raise ParameterError(f"{len(true_weights)} weight matrices for {panel.n} individuals")
    weights = [np.asarray(w, dtype=np.float64) for w in true_weights]
    for w in weights:
        if w.shape != (panel.p, panel.p):
            raise ParameterError(f"weight matrix of shape {w.shape}, expected {(panel.p, panel.p)}")

    def work(i):
        fit = QuantileRegression(panel.design(i), panel.response(i), tol=settings.qr_tol,
                                 max_iter=settings.qr_max_iter).fit(tau)
        return IndividualResult(id=panel.ids[i], gamma=fit.gamma, w_hat=weights[i])

    results, _ = _run_individuals(panel, work, False, threads)
    beta_md, sigma_hat, std_errors, weight_sum = _combine(results, panel.T, settings.condition_limit)
    return MDEstimate(tau=tau, beta_md=beta_md, sigma_hat=sigma_hat, std_errors=std_errors,
                      n=len(results), T=panel.T, mode="fixed_weights", weight_sum=weight_sum,
                      per_individual=results)


def wald_test(est: MDEstimate, R, r) -> WaldResult:
    """nT (R b - r)' [R Sigma R']^-1 (R b - r), chi-square with q degrees of freedom."""
    R = np.atleast_2d(np.asarray(R, dtype=np.float64))
    r = np.atleast_1d(np.asarray(r, dtype=np.float64))
    q, p = R.shape
    if p != est.p or r.shape != (q,):
        raise ParameterError(f"restriction shapes R{R.shape}, r{r.shape} do not match p={est.p}")
    if q > p or np.linalg.matrix_rank(R) < q:
        raise ParameterError("restriction matrix must have full row rank q <= p")
    diff = R @ est.beta_md - r
    middle = R @ est.sigma_hat @ R.T
    cond = np.linalg.cond(middle)
    if not np.isfinite(cond) or cond > 1e12:
        raise InferenceError(f"R Sigma R' is singular (condition number {cond:.3g})")
    statistic = float(est.n * est.T * diff @ linalg.solve(middle, diff, assume_a='sym'))
    statistic = max(statistic, 0.0)
    return WaldResult(statistic=statistic, p_value=float(chi2.sf(statistic, q)), df=q)


def confidence_interval(est: MDEstimate, j: int, level: float = 0.95):
    """Normal interval for slope coordinate j, counted from 1 as in beta_1..beta_p."""
    if not 1 <= j <= est.p:
        raise ParameterError(f"coordinate {j} outside [1, {est.p}]")
    if not 0.0 < level <= 1.0:
        raise ParameterError(f"confidence level must lie in (0, 1], got {level}")
    center = float(est.beta_md[j - 1])
    se = float(est.std_errors[j - 1])
    if se == 0.0:
        return center, center
    half = norm.ppf(0.5 * (1.0 + level)) * se
    return center - half, center + half
