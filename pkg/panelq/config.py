from dataclasses import dataclass, asdict, fields
from typing import Dict, Optional
from pathlib import Path
import json
import logging
import os

from .errors import ConfigError

logger = logging.getLogger(__name__)

THREADS_ENV = "PANELQ_THREADS"


@dataclass
class EstimatorSettings:
    """Tuning knobs shared by the per-individual pipeline."""
    bandwidth_rule: str = "hall_sheather"  # 'hall_sheather' or 'bofinger'
    alpha: float = 0.05
    d_T: Optional[float] = None  # overrides the bandwidth rule
    m_T: Optional[int] = None  # overrides default_lag
    density_floor: float = 1e-6
    condition_limit: float = 1e12
    qr_tol: float = 1e-9
    qr_max_iter: int = 100
    drop_failed: bool = False

    def __post_init__(self):
        if self.bandwidth_rule not in ("hall_sheather", "bofinger"):
            raise ConfigError(f"Unknown bandwidth rule: {self.bandwidth_rule}")
        if not 0.0 < self.alpha < 1.0:
            raise ConfigError(f"alpha must lie in (0, 1), got {self.alpha}")
        if self.d_T is not None and self.d_T <= 0:
            raise ConfigError(f"d_T override must be positive, got {self.d_T}")
        if self.m_T is not None and self.m_T < 0:
            raise ConfigError(f"m_T override must be non-negative, got {self.m_T}")

    def to_dict(self) -> Dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict) -> 'EstimatorSettings':
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"Unknown estimator settings: {sorted(unknown)}")
        return cls(**data)


def resolve_threads(threads: int | None = None) -> int:
    """Explicit value, then $PANELQ_THREADS, then the CPU count."""
    if threads is None:
        raw = os.environ.get(THREADS_ENV)
        if raw:
            try:
                threads = int(raw)
            except ValueError:
                raise ConfigError(f"{THREADS_ENV} must be an integer, got {raw!r}")
        else:
            threads = os.cpu_count() or 1
    if threads < 1:
        raise ConfigError(f"thread count must be >= 1, got {threads}")
    return threads


def load_json(path: str | Path) -> Dict:
    path = Path(path)
    try:
        with open(path, 'r', encoding='utf-8') as f:
            return json.load(f)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON ({e})")
