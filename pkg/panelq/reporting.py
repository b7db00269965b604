"""Published-layout tables: rows (n, T, n/T), column blocks per error law x tau."""
from typing import Iterable, List, Optional
from importlib import resources
import logging
import math

import numpy as np
import pandas as pd

from .errors import ConfigError
from .simulation import STATISTICS, SimulationReport

logger = logging.getLogger(__name__)

DIST_LABELS = {'normal': 'Normal', 't3': 't3', 'chi2_3': 'chi2_3'}
STAT_LABELS = {
    't_times_bias': 'T x Bias',
    'sqrt_nT_times_se': 'sqrt(nT) x SE',
}
_KEYS = ['lambda', 'n', 'T', 'dist', 'tau']


def load_reference_tables() -> pd.DataFrame:
    """Transcribed published values, one row per (table, statistic, lambda, n, T, dist, tau)."""
    with resources.files('panelq').joinpath('data/published_tables.csv').open('r', encoding='utf-8') as f:
        frame = pd.read_csv(f)
    return frame.rename(columns={'value': 'reference'})


def merge_reports(reports: Iterable[SimulationReport]) -> pd.DataFrame:
    """Union of cell grids; a later record wins where two records share a cell."""
    frames = [r.to_frame() for r in reports]
    frames = [f for f in frames if not f.empty]
    if not frames:
        raise ConfigError("no simulation cells to report")
    merged = pd.concat(frames, ignore_index=True)
    dup = merged.duplicated(_KEYS, keep='last')
    if dup.any():
        logger.warning("%d cells appear in more than one record; keeping the last", int(dup.sum()))
    return merged[~dup].reset_index(drop=True)


def attach_reference(cells: pd.DataFrame, statistic: str,
                     reference: Optional[pd.DataFrame] = None) -> pd.DataFrame:
    reference = load_reference_tables() if reference is None else reference
    ref = reference[reference['statistic'] == statistic][_KEYS + ['reference']]
    out = cells.merge(ref, on=_KEYS, how='left')
    out['deviation'] = out[statistic] - out['reference']
    with np.errstate(divide='ignore', invalid='ignore'):
        out['relative_deviation'] = out['deviation'] / out['reference'].abs()
    return out


def flag_outside(frame: pd.DataFrame, tolerance: float) -> pd.Series:
    """Relative deviation above tolerance; cells without a reference are never flagged."""
    return frame['relative_deviation'].abs() > tolerance


def _fmt(value) -> str:
    if value is None or (isinstance(value, float) and math.isnan(value)):
        return '--'
    return f"{value:.3f}"


def layout_table(cells: pd.DataFrame, column: str) -> pd.DataFrame:
    """Pivot one statistic into the published layout; missing cells stay NaN."""
    pivot = cells.set_index(['n', 'T', 'dist', 'tau'])[column].astype(float).unstack(['dist', 'tau'])
    dists = [d for d in DIST_LABELS if d in pivot.columns.get_level_values(0)]
    taus = sorted(set(pivot.columns.get_level_values(1)))
    pivot = pivot.reindex(columns=pd.MultiIndex.from_product([dists, taus], names=['dist', 'tau']))
    n_values = sorted(set(cells['n']))
    T_values = sorted(set(cells['T']))
    pivot = pivot.reindex(pd.MultiIndex.from_product([n_values, T_values], names=['n', 'T']))
    return pivot


def render_table(cells: pd.DataFrame, statistic: str, lam: float,
                 tolerance: Optional[float] = None) -> str:
    """Text rendering of one (lambda, statistic) table; gaps show as '--'.

    If the frame carries a reference column, every cell is shown as ``value (reference)``
    and cells outside ``tolerance`` are marked with ``*``.
    """
    if statistic not in STATISTICS:
        raise ConfigError(f"statistic must be one of {STATISTICS}, got {statistic!r}")
    cells = cells[cells['lambda'] == lam]
    values = layout_table(cells, statistic)
    has_ref = 'reference' in cells.columns
    if has_ref:
        refs = layout_table(cells, 'reference')
        flags = layout_table(cells.assign(flag=flag_outside(cells, tolerance).astype(float)
                                          if tolerance is not None else 0.0), 'flag')

    header = ["n", "T", "n/T"] + [f"{DIST_LABELS[d]} {tau:.2f}" for d, tau in values.columns]
    rows = []
    for (n, T), row in values.iterrows():
        line = [str(n), str(T), f"{n / T:.2f}"]
        for col, value in row.items():
            text = _fmt(value)
            if has_ref:
                text = f"{text} ({_fmt(refs.loc[(n, T), col])})"
                if flags.loc[(n, T), col] == 1.0:
                    text += '*'
            line.append(text)
        rows.append(line)

    widths = [max(len(header[k]), *(len(r[k]) for r in rows)) for k in range(len(header))]
    title = f"{STAT_LABELS[statistic]}, lambda = {lam:g}"
    out = [title, "  ".join(h.rjust(w) for h, w in zip(header, widths))]
    out.append("  ".join('-' * w for w in widths))
    out += ["  ".join(c.rjust(w) for c, w in zip(r, widths)) for r in rows]
    return "\n".join(out)


def render_report(reports: List[SimulationReport], statistics: Optional[List[str]] = None,
                  reference: bool = False, tolerance: Optional[float] = None) -> str:
    cells = merge_reports(reports)
    if statistics is None:
        statistics = list(dict.fromkeys(r.config.statistic for r in reports))
    blocks = []
    for lam in sorted(set(cells['lambda'])):
        for statistic in statistics:
            frame = attach_reference(cells, statistic) if reference else cells
            blocks.append(render_table(frame, statistic, lam, tolerance))
            if reference and tolerance is not None:
                sub = frame[frame['lambda'] == lam]
                n_flagged = int(flag_outside(sub, tolerance).sum())
                blocks.append(f"{n_flagged} cell(s) outside {tolerance:.0%} of the reference")
    return "\n\n".join(blocks)


def summary_frame(reports: List[SimulationReport], statistic: str) -> pd.DataFrame:
    """Long-format comparison with deviation columns, for record-level inspection."""
    return attach_reference(merge_reports(reports), statistic)

