"""Location-scale-shift panel designs used by the Monte Carlo engine.

    y_it = alpha_i + beta x_it + (1 + lambda x_it) u_it,  alpha_i = i/n,
    x_it = 0.3 alpha_i + v_it,  v_it ~ U[0, 10].

Errors are used exactly as named (chi2_3 is not centred), so the conditional tau-quantile
slope is beta + lambda F^-1(tau) for the same law.
"""
from dataclasses import dataclass
from typing import List, Optional
import logging

import numpy as np
from numpy.polynomial.legendre import leggauss
from scipy import linalg
from scipy.stats import chi2, norm, t

from .errors import DGPError, ParameterError
from .panel_io import PanelDataset
from .qr_core import _check_tau

logger = logging.getLogger(__name__)

ERROR_LAWS = {
    'normal': norm(),
    't3': t(3),
    'chi2_3': chi2(3),
}
X_SHIFT = 0.3
V_WIDTH = 10.0
QUADRATURE_TOL = 1e-8
_UNIT_EPS = np.finfo(np.float64).eps


def error_law(dist: str):
    try:
        return ERROR_LAWS[dist]
    except KeyError:
        raise DGPError(f"Unknown error distribution: {dist} (choose from {', '.join(ERROR_LAWS)})")


def true_beta(tau: float, beta: float = 1.0, lam: float = 0.0, dist: str = "normal") -> float:
    """beta_0(tau) = beta + lambda F^-1(tau)."""
    tau = _check_tau(tau)
    return float(beta + lam * error_law(dist).ppf(tau))


def fixed_effects(n: int) -> np.ndarray:
    return np.arange(1, n + 1, dtype=np.float64) / n


@dataclass
class GeneratedPanel:
    panel: PanelDataset
    alpha: np.ndarray
    beta: float
    lam: float
    dist: str
    rho: Optional[float] = None

    def beta_at(self, tau: float) -> float:
        return true_beta(tau, self.beta, self.lam, self.dist)


def _draw_errors(law, shape, rng: np.random.Generator) -> np.ndarray:
    u = rng.random(shape)
    np.clip(u, _UNIT_EPS, 1.0 - _UNIT_EPS, out=u)
    return law.ppf(u)


def _ar1_errors(law, n: int, T: int, rho: float, rng: np.random.Generator) -> np.ndarray:
    """Stationary AR(1) in standardized units, mapped back to the law's mean and scale."""
    mean, sd = float(law.mean()), float(law.std())
    eps = (_draw_errors(law, (n, T), rng) - mean) / sd
    scale = np.sqrt(1.0 - rho ** 2)
    u = np.empty((n, T))
    u[:, 0] = eps[:, 0]
    for s in range(1, T):
        u[:, s] = rho * u[:, s - 1] + scale * eps[:, s]
    return mean + sd * u


def generate_panel(n: int, T: int, lam: float, dist: str, rng: np.random.Generator,
                   beta: float = 1.0, rho: Optional[float] = None,
                   noise_scale: float = 1.0) -> GeneratedPanel:
    """Draw one panel. ``rho`` switches on AR(1) errors; ``noise_scale=0`` gives noiseless data."""
    if n < 1 or T < 1:
        raise ParameterError(f"panel dimensions must be positive, got n={n}, T={T}")
    law = error_law(dist)
    if rho is not None:
        if not -1.0 < rho < 1.0:
            raise DGPError(f"AR(1) coefficient must lie in (-1, 1), got {rho}")
        if lam != 0.0 and dist != "normal":
            # the marginal of a non-Gaussian AR(1) is no longer the named law
            raise DGPError("AR(1) errors with lambda != 0 are only available for normal errors")

    alpha = fixed_effects(n)
    v = rng.uniform(0.0, V_WIDTH, size=(n, T))
    x = X_SHIFT * alpha[:, None] + v
    if (1.0 + lam * x).min() <= 0.0:
        raise DGPError(f"scale 1 + lambda x is not positive on the support (lambda={lam})")
    if rho is None:
        u = _draw_errors(law, (n, T), rng)
    else:
        u = _ar1_errors(law, n, T, rho, rng)
    y = alpha[:, None] + beta * x + noise_scale * (1.0 + lam * x) * u
    panel = PanelDataset.from_arrays(y, x)
    return GeneratedPanel(panel=panel, alpha=alpha, beta=beta, lam=lam, dist=dist, rho=rho)


@dataclass
class PopulationMoments:
    """Population A_i, B_i, V_i = B_i^-1 A_i B_i^-1 and the slope block W_i of V_i^-1."""
    a: List[np.ndarray]
    b: List[np.ndarray]
    v: List[np.ndarray]
    w: List[np.ndarray]
    nodes: int


def _moments(lo: float, lam: float, f0: float, tau: float, k: int):
    nodes, weights = leggauss(k)
    x = lo + 0.5 * V_WIDTH * (nodes + 1.0)
    # uniform density 1/width times the Jacobian width/2
    w = 0.5 * weights
    zz = np.stack([np.ones_like(x), x, x, x * x], axis=1)
    ezz = (w[:, None] * zz).sum(axis=0).reshape(2, 2)
    dens = f0 / (1.0 + lam * x)
    b = (w[:, None] * dens[:, None] * zz).sum(axis=0).reshape(2, 2)
    return tau * (1.0 - tau) * ezz, b


def population_oracle(lam: float, dist: str, tau: float, n: int) -> PopulationMoments:
    """Quadrature over x in [0.3 alpha_i, 0.3 alpha_i + 10] for the iid design."""
    tau = _check_tau(tau)
    if n < 1:
        raise ParameterError(f"n must be positive, got {n}")
    law = error_law(dist)
    alpha = fixed_effects(n)
    lows = X_SHIFT * alpha
    edges = np.concatenate([1.0 + lam * lows, 1.0 + lam * (lows + V_WIDTH)])
    if edges.min() <= 0.0:
        raise DGPError(f"lambda={lam} makes 1 + lambda x non-positive on the regressor support")
    f0 = float(law.pdf(law.ppf(tau)))

    out = PopulationMoments(a=[], b=[], v=[], w=[], nodes=0)
    for lo in lows:
        k = 8
        a_prev, b_prev = _moments(lo, lam, f0, tau, k)
        while True:
            k *= 2
            a_cur, b_cur = _moments(lo, lam, f0, tau, k)
            change = max(np.abs(a_cur - a_prev).max(), np.abs(b_cur - b_prev).max())
            a_prev, b_prev = a_cur, b_cur
            if change < QUADRATURE_TOL or k >= 4096:
                break
        v = linalg.solve(b_cur, linalg.solve(b_cur, a_cur).T).T
        v = 0.5 * (v + v.T)
        out.a.append(a_cur)
        out.b.append(b_cur)
        out.v.append(v)
        out.w.append(linalg.inv(v)[1:, 1:])
        out.nodes = max(out.nodes, k)
    logger.debug("population oracle: lambda=%s dist=%s tau=%s, %d nodes", lam, dist, tau, out.nodes)
    return out
