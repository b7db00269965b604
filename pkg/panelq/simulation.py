"""Seeded Monte Carlo experiments for the MD-QR estimator.

Every replication is a pure function of its key (seed, design cell, replication index):
the key selects a Philox stream, so results do not depend on the worker count.
"""
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, asdict, fields
from typing import Dict, List, Optional, Tuple
from pathlib import Path
import hashlib
import json
import logging
import math
import time

import numpy as np
import pandas as pd

from . import __version__
from .config import EstimatorSettings, load_json
from .covariance import MODES
from .dgp import ERROR_LAWS, generate_panel, true_beta
from .errors import ConfigError, DiagnosticError, DGPError, EstimationError, RecordFormatError
from .md_estimator import estimate_md
from .panel_io import RECORD_VERSION, check_record_header, read_record, write_record

logger = logging.getLogger(__name__)

SIMULATION_FORMAT = "panelq.simulation"
STATISTICS = ("t_times_bias", "sqrt_nT_times_se")
MAX_FAILURE_SHARE = 0.01
DEFAULT_AR1_RHO = 0.5
PUBLISHED_GRID = [25, 50, 100, 250]
PUBLISHED_TAUS = [0.25, 0.5, 0.75]
PUBLISHED_DISTS = ["normal", "t3", "chi2_3"]
_Z95 = 1.959963984540054


@dataclass
class SimulationConfig:
    n_grid: List[int]
    T_grid: List[int]
    taus: List[float]
    lam: float = 0.0
    error_dists: List[str] = field(default_factory=lambda: ["normal"])
    beta: float = 1.0
    replications: int = 500
    seed: int = 1
    rho: Optional[float] = None  # None: iid errors, otherwise AR(1) coefficient
    estimator_mode: str = "iid"
    name: str = "custom"
    statistic: str = "t_times_bias"
    reference_table: Optional[str] = None

    def __post_init__(self):
        self.n_grid = [int(n) for n in self.n_grid]
        self.T_grid = [int(T) for T in self.T_grid]
        self.taus = [float(tau) for tau in self.taus]
        self.error_dists = list(self.error_dists)
        self.lam = float(self.lam)
        self.beta = float(self.beta)
        self.rho = None if self.rho is None else float(self.rho)
        if not (self.n_grid and self.T_grid and self.taus and self.error_dists):
            raise ConfigError("n_grid, T_grid, taus and error_dists must all be non-empty")
        if self.replications < 1:
            raise ConfigError(f"replications must be >= 1, got {self.replications}")
        if min(self.n_grid) < 1:
            raise ConfigError(f"every n must be >= 1, got {self.n_grid}")
        if min(self.T_grid) < 4:
            raise ConfigError(f"every T must be >= 4, got {self.T_grid}")
        bad = [tau for tau in self.taus if not 0.0 < tau < 1.0]
        if bad:
            raise ConfigError(f"quantile levels must lie in (0, 1): {bad}")
        unknown = [d for d in self.error_dists if d not in ERROR_LAWS]
        if unknown:
            raise ConfigError(f"Unknown error distributions: {unknown}")
        if self.estimator_mode not in MODES:
            raise ConfigError(f"estimator_mode must be one of {MODES}, got {self.estimator_mode!r}")
        if self.statistic not in STATISTICS:
            raise ConfigError(f"statistic must be one of {STATISTICS}, got {self.statistic!r}")
        if self.rho is not None and not -1.0 < self.rho < 1.0:
            raise ConfigError(f"AR(1) coefficient must lie in (-1, 1), got {self.rho}")
        if self.seed < 0:
            raise ConfigError(f"seed must be non-negative, got {self.seed}")

    @property
    def dependence(self):
        return "none" if self.rho is None else {"ar1": self.rho}

    def to_dict(self) -> Dict:
        data = asdict(self)
        data['lambda'] = data.pop('lam')
        data.pop('rho')
        data['dependence'] = self.dependence
        return data

    @classmethod
    def from_dict(cls, data: Dict) -> 'SimulationConfig':
        data = dict(data)
        if 'lambda' in data:
            data['lam'] = data.pop('lambda')
        if 'error_dist' in data:
            data['error_dists'] = [data.pop('error_dist')]
        dependence = data.pop('dependence', "none")
        if dependence in (None, "none"):
            data['rho'] = None
        elif dependence == "ar1":
            data['rho'] = DEFAULT_AR1_RHO
        elif isinstance(dependence, dict) and set(dependence) == {"ar1"}:
            data['rho'] = float(dependence["ar1"])
        else:
            raise ConfigError(f"dependence must be 'none', 'ar1' or {{'ar1': rho}}, got {dependence!r}")
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"Unknown simulation settings: {sorted(unknown)}")
        try:
            return cls(**data)
        except TypeError as e:
            raise ConfigError(f"incomplete simulation config: {e}")

    @classmethod
    def from_file(cls, path) -> 'SimulationConfig':
        return cls.from_dict(load_json(path))


class PresetLibrary:
    """Built-in grids of the six published tables plus user presets from ~/.panelq/presets."""

    def __init__(self, custom_dir: Optional[Path] = None):
        self.custom_dir = custom_dir
        self.presets: Dict[str, SimulationConfig] = {}
        self._init_presets()
        self._load_custom_presets()

    def _init_presets(self):
        for lam, label in ((0.0, "table1"), (0.5, "table2"), (1.0, "table3")):
            for statistic, suffix in (("t_times_bias", ""), ("sqrt_nT_times_se", "_se")):
                name = label + suffix
                self.presets[name] = SimulationConfig(
                    n_grid=list(PUBLISHED_GRID),
                    T_grid=list(PUBLISHED_GRID),
                    taus=list(PUBLISHED_TAUS),
                    lam=lam,
                    error_dists=list(PUBLISHED_DISTS),
                    name=name,
                    statistic=statistic,
                    reference_table=name,
                )

    def _get_custom_presets_path(self) -> Path:
        if self.custom_dir is not None:
            return Path(self.custom_dir)
        return Path.home() / '.panelq' / 'presets'

    def _load_custom_presets(self):
        presets_dir = self._get_custom_presets_path()
        if not presets_dir.is_dir():
            return
        for file_path in sorted(presets_dir.glob('*.json')):
            try:
                config = SimulationConfig.from_dict(load_json(file_path))
            except (ConfigError, OSError) as e:
                logger.warning("Failed to load preset from %s: %s", file_path, e)
                continue
            if config.name == "custom":
                config.name = file_path.stem
            self.presets[config.name] = config

    def save_preset(self, config: SimulationConfig) -> Path:
        presets_dir = self._get_custom_presets_path()
        presets_dir.mkdir(parents=True, exist_ok=True)
        filename = "".join(c for c in config.name if c.isalnum() or c in ('_', '-')) or "preset"
        file_path = presets_dir / f"{filename}.json"
        with open(file_path, 'w', encoding='utf-8') as f:
            json.dump(config.to_dict(), f, indent=2)
        self.presets[config.name] = config
        return file_path

    def get_preset_names(self) -> List[str]:
        return list(self.presets)

    def get_preset(self, name: str) -> SimulationConfig:
        try:
            return self.presets[name]
        except KeyError:
            raise ConfigError(f"Unknown preset: {name} (available: {', '.join(self.presets)})")


def cell_key(config: SimulationConfig, n: int, T: int, dist: str) -> int:
    """64-bit hash of the design cell; tau is left out since all taus share one panel."""
    label = f"{config.lam!r}|{dist}|{n}|{T}|{config.rho!r}|{config.beta!r}"
    digest = hashlib.blake2b(label.encode('utf-8'), digest_size=8).digest()
    return int.from_bytes(digest, 'little')


def replication_rng(seed: int, key: int, rep: int) -> np.random.Generator:
    """Philox keyed by (seed, cell); the replication index occupies a high counter word.

    Each replication owns a 2^128-block slice of the counter space, so streams never overlap.
    """
    bitgen = np.random.Philox(
        key=np.array([seed % 2 ** 64, key], dtype=np.uint64),
        counter=np.array([0, 0, rep, 0], dtype=np.uint64),
    )
    return np.random.Generator(bitgen)


@dataclass
class _Job:
    n: int
    T: int
    dist: str
    rep: int
    lam: float
    beta: float
    rho: Optional[float]
    taus: Tuple[float, ...]
    mode: str
    seed: int
    key: int


def _replicate(job: _Job) -> List[Tuple[float, float, Optional[str]]]:
    """One panel, every tau: (beta_hat, reported se) or the failure message."""
    rng = replication_rng(job.seed, job.key, job.rep)
    draw = generate_panel(job.n, job.T, job.lam, job.dist, rng, beta=job.beta, rho=job.rho)
    out = []
    for tau in job.taus:
        try:
            est = estimate_md(draw.panel, tau, mode=job.mode, settings=EstimatorSettings())
            out.append((float(est.beta_md[0]), float(est.std_errors[0]), None))
        except EstimationError as e:
            out.append((math.nan, math.nan, f"{type(e).__name__}: {e}"))
    return out


@dataclass
class SimulationCell:
    n: int
    T: int
    tau: float
    lam: float
    dist: str
    t_times_bias: float
    sqrt_nT_times_se: float
    mc_std_error_of_bias: float
    replications_used: int
    mean_reported_se: float = math.nan
    ci_coverage: float = math.nan
    failures: int = 0
    failed: bool = False

    def to_dict(self) -> Dict:
        return {('lambda' if k == 'lam' else k): v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, data: Dict) -> 'SimulationCell':
        data = dict(data)
        data['lam'] = data.pop('lambda')
        return cls(**data)


def summarize_cell(n: int, T: int, tau: float, lam: float, dist: str, beta0: float,
                   estimates: np.ndarray, std_errors: np.ndarray, replications: int) -> SimulationCell:
    ok = np.isfinite(estimates)
    used = int(ok.sum())
    failures = replications - used
    failed = failures > MAX_FAILURE_SHARE * replications or used == 0
    if failed:
        logger.warning("cell n=%d T=%d tau=%s lambda=%s %s failed: %d of %d replications",
                       n, T, tau, lam, dist, failures, replications)
        return SimulationCell(n, T, tau, lam, dist, math.nan, math.nan, math.nan, used,
                              failures=failures, failed=True)
    b = estimates[ok]
    se = std_errors[ok]
    err = b - beta0
    if used >= 2:
        sd = float(np.std(b, ddof=1))
        mcse = T * sd / math.sqrt(used)
    else:
        sd = mcse = math.nan
    return SimulationCell(
        n=n, T=T, tau=tau, lam=lam, dist=dist,
        t_times_bias=float(T * err.mean()),
        sqrt_nT_times_se=math.sqrt(n * T) * sd,
        mc_std_error_of_bias=mcse,
        replications_used=used,
        mean_reported_se=float(math.sqrt(n * T) * se.mean()),
        ci_coverage=float(np.mean(np.abs(err) <= _Z95 * se)),
        failures=failures,
    )


@dataclass
class SimulationReport:
    config: SimulationConfig
    cells: List[SimulationCell]
    build: str = f"panelq {__version__}"
    wall_time: float = field(default=0.0, compare=False)

    def to_dict(self) -> Dict:
        # wall time stays out so records are byte-identical across runs
        return {
            'format': SIMULATION_FORMAT,
            'format_version': RECORD_VERSION,
            'build': self.build,
            'config': self.config.to_dict(),
            'cells': [c.to_dict() for c in self.cells],
        }

    @classmethod
    def from_dict(cls, data: Dict) -> 'SimulationReport':
        check_record_header(data, SIMULATION_FORMAT)
        try:
            return cls(
                config=SimulationConfig.from_dict(data['config']),
                cells=[SimulationCell.from_dict(c) for c in data['cells']],
                build=data.get('build', ''),
            )
        except (KeyError, TypeError) as e:
            raise RecordFormatError(f"malformed {SIMULATION_FORMAT} record: {e!r}")

    def to_frame(self) -> pd.DataFrame:
        """Full (n, T, tau, lambda, dist) grid of the cell statistics."""
        frame = pd.DataFrame([c.to_dict() for c in self.cells])
        if frame.empty:
            return frame
        frame['n_over_T'] = frame['n'] / frame['T']
        return frame

    def cell(self, n: int, T: int, tau: float, dist: str, lam: Optional[float] = None) -> SimulationCell:
        lam = self.config.lam if lam is None else lam
        for c in self.cells:
            if (c.n, c.T, c.dist) == (n, T, dist) and math.isclose(c.tau, tau) \
                    and math.isclose(c.lam, lam):
                return c
        raise KeyError((n, T, tau, dist, lam))


def _jobs(config: SimulationConfig):
    for dist in config.error_dists:
        for n in config.n_grid:
            for T in config.T_grid:
                key = cell_key(config, n, T, dist)
                for rep in range(config.replications):
                    yield _Job(n=n, T=T, dist=dist, rep=rep, lam=config.lam, beta=config.beta,
                               rho=config.rho, taus=tuple(config.taus),
                               mode=config.estimator_mode, seed=config.seed, key=key)


def run_monte_carlo(config: SimulationConfig, threads: int = 1) -> SimulationReport:
    if config.rho is not None and config.lam != 0.0 and any(d != "normal" for d in config.error_dists):
        raise DGPError("AR(1) errors with lambda != 0 are only available for normal errors")
    started = time.perf_counter()
    jobs = list(_jobs(config))
    logger.info("Monte Carlo '%s': %d replications x %d design cells on %d worker(s)",
                config.name, config.replications, len(jobs) // config.replications, threads)
    if threads > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            outcomes = list(pool.map(_replicate, jobs, chunksize=max(1, len(jobs) // (8 * threads))))
    else:
        outcomes = [_replicate(job) for job in jobs]

    reps = config.replications
    cells = []
    for start in range(0, len(jobs), reps):
        job = jobs[start]
        block = outcomes[start:start + reps]
        for k, tau in enumerate(config.taus):
            estimates = np.array([o[k][0] for o in block])
            std_errors = np.array([o[k][1] for o in block])
            for r, o in enumerate(block):
                if o[k][2] is not None:
                    logger.warning("replication %d (n=%d T=%d tau=%s %s) failed: %s",
                                   r, job.n, job.T, tau, job.dist, o[k][2])
            beta0 = true_beta(tau, config.beta, config.lam, job.dist)
            cells.append(summarize_cell(job.n, job.T, tau, config.lam, job.dist, beta0,
                                        estimates, std_errors, reps))
    wall = time.perf_counter() - started
    logger.info("Monte Carlo '%s' finished in %.1f s", config.name, wall)
    return SimulationReport(config=config, cells=cells, wall_time=wall)


def bias_constancy_check(report: SimulationReport) -> pd.DataFrame:
    """Is T x bias flat in T for each (n, lambda, dist, tau)?

    Returns one row per group with the max/min ratio of |T x bias| and a pass flag. For
    lambda = 0 each value must be within 3 MC standard errors of zero instead.
    """
    frame = report.to_frame()
    if frame.empty:
        raise DiagnosticError("report has no cells")
    frame = frame[~frame['failed']]
    rows = []
    for (n, lam, dist, tau), group in frame.groupby(['n', 'lambda', 'dist', 'tau'], sort=False):
        if group['T'].nunique() < 3:
            continue
        group = group.sort_values('T')
        values = group['t_times_bias'].to_numpy()
        mcse = group['mc_std_error_of_bias'].to_numpy()
        magnitude = np.abs(values)
        ratio = float(magnitude.max() / magnitude.min()) if magnitude.min() > 0 else math.inf
        if not np.all(np.isfinite(mcse)):
            passed = None
        elif lam == 0.0:
            passed = bool(np.all(magnitude <= 3.0 * mcse))
        else:
            mean = values.mean()
            mean_se = math.sqrt(np.sum(mcse ** 2)) / len(mcse)
            passed = bool(np.all(np.abs(values - mean) <= 3.0 * np.sqrt(mcse ** 2 + mean_se ** 2)))
        rows.append({
            'n': n, 'lambda': lam, 'dist': dist, 'tau': tau,
            'T_values': tuple(int(T) for T in group['T']),
            'ratio': ratio,
            'branch': 'near_zero' if lam == 0.0 else 'constant',
            'passed': passed,
        })
    if not rows:
        raise DiagnosticError("bias constancy needs at least 3 values of T at fixed (n, lambda, dist, tau)")
    return pd.DataFrame(rows)


def write_report(report: SimulationReport, sink) -> None:
    write_record(report.to_dict(), sink)


def read_report(source) -> SimulationReport:
    return SimulationReport.from_dict(read_record(source))
