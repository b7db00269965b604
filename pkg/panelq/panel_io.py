"""Panel ingestion and record serialization.

Panels arrive in CSV long format with header ``id,time,y,x1,...,xp``. Estimates are
stored as versioned JSON records; floats use the shortest round-trip representation.
"""
from dataclasses import dataclass
from typing import Dict, List, Tuple
from pathlib import Path
import io
import json
import logging

import numpy as np
import pandas as pd

from .errors import PanelFormatError, RecordFormatError, RecordVersionError
from .qr_core import DesignMatrix

logger = logging.getLogger(__name__)

ESTIMATE_FORMAT = "panelq.estimate"
RECORD_VERSION = 1


@dataclass(frozen=True)
class PanelDataset:
    """Balanced panel: y is n x T, x is n x T x p. Immutable after construction."""
    ids: Tuple[str, ...]
    times: Tuple[int, ...]
    y: np.ndarray
    x: np.ndarray

    def __post_init__(self):
        y = np.asarray(self.y, dtype=np.float64)
        x = np.asarray(self.x, dtype=np.float64)
        if x.ndim == 2:
            x = x[:, :, None]
        if y.ndim != 2 or x.ndim != 3 or x.shape[:2] != y.shape:
            raise PanelFormatError(f"inconsistent panel shapes y{y.shape}, x{x.shape}")
        if x.shape[2] < 1:
            raise PanelFormatError("panel needs at least one regressor")
        if len(self.ids) != y.shape[0] or len(self.times) != y.shape[1]:
            raise PanelFormatError("id or time labels do not match the array shapes")
        if not (np.all(np.isfinite(y)) and np.all(np.isfinite(x))):
            raise PanelFormatError("panel contains non-finite values")
        y.setflags(write=False)
        x.setflags(write=False)
        object.__setattr__(self, 'y', y)
        object.__setattr__(self, 'x', x)
        object.__setattr__(self, 'ids', tuple(str(i) for i in self.ids))
        object.__setattr__(self, 'times', tuple(int(t) for t in self.times))

    @classmethod
    def from_arrays(cls, y, x, ids=None) -> 'PanelDataset':
        y = np.asarray(y, dtype=np.float64)
        n, T = y.shape
        ids = ids if ids is not None else [str(i + 1) for i in range(n)]
        return cls(ids=tuple(ids), times=tuple(range(1, T + 1)), y=y, x=x)

    @property
    def n(self) -> int:
        return self.y.shape[0]

    @property
    def T(self) -> int:
        return self.y.shape[1]

    @property
    def p(self) -> int:
        return self.x.shape[2]

    def z(self, i: int) -> np.ndarray:
        """Rows (1, x_it') for individual i."""
        return np.column_stack([np.ones(self.T), self.x[i]])

    def design(self, i: int) -> DesignMatrix:
        return DesignMatrix(self.z(i))

    def response(self, i: int) -> np.ndarray:
        return self.y[i]

    def rank_deficient_ids(self) -> List[str]:
        """Eager version of the per-individual full-rank check."""
        return [self.ids[i] for i in range(self.n) if not self.design(i).is_full_rank()]

    def to_frame(self) -> pd.DataFrame:
        data = {
            'id': np.repeat(np.array(self.ids, dtype=object), self.T),
            'time': np.tile(np.array(self.times, dtype=np.int64), self.n),
            'y': self.y.ravel(),
        }
        for k in range(self.p):
            data[f'x{k + 1}'] = self.x[:, :, k].ravel()
        return pd.DataFrame(data)


def _numeric_column(df: pd.DataFrame, column: str) -> np.ndarray:
    try:
        # float() parsing keeps the shortest-repr round trip exact
        values = df[column].astype(np.float64).to_numpy()
    except ValueError:
        values = pd.to_numeric(df[column], errors='coerce').to_numpy(dtype=np.float64)
    bad = ~np.isfinite(values)
    if bad.any():
        first = int(np.flatnonzero(bad)[0])
        # header is line 1
        raise PanelFormatError(
            f"non-numeric or missing value {df[column].iloc[first]!r} in column "
            f"'{column}' at row {first + 2}", row=first + 2)
    return values


def load_panel(source, format: str = "csv_long") -> PanelDataset:
    if format != "csv_long":
        raise PanelFormatError(f"unsupported panel format: {format}")
    if isinstance(source, (bytes, bytearray)):
        source = io.BytesIO(source)
    try:
        df = pd.read_csv(source, dtype=str, keep_default_na=False, skipinitialspace=True)
    except pd.errors.EmptyDataError:
        raise PanelFormatError("panel file is empty")
    except pd.errors.ParserError as e:
        raise PanelFormatError(f"invalid CSV: {e}")

    columns = [c.strip() for c in df.columns]
    df.columns = columns
    if columns[:3] != ['id', 'time', 'y']:
        raise PanelFormatError(f"header must start with id,time,y; got {','.join(columns)}")
    regressors = columns[3:]
    if not regressors:
        raise PanelFormatError("panel has no regressors (need at least x1)")
    expected = [f'x{k + 1}' for k in range(len(regressors))]
    if regressors != expected:
        raise PanelFormatError(f"regressor columns must be {','.join(expected)}")
    if df.empty:
        raise PanelFormatError("panel file has a header but no rows")

    times = _numeric_column(df, 'time')
    if np.any(times != np.round(times)):
        first = int(np.flatnonzero(times != np.round(times))[0])
        raise PanelFormatError(f"time index must be an integer at row {first + 2}", row=first + 2)
    y = _numeric_column(df, 'y')
    x = np.column_stack([_numeric_column(df, c) for c in regressors])

    ids = list(pd.unique(df['id']))
    codes = pd.Categorical(df['id'], categories=ids).codes
    frame = pd.DataFrame({'code': codes, 'time': times.astype(np.int64)})
    dup = frame.duplicated(keep='first')
    if dup.any():
        first = int(np.flatnonzero(dup.to_numpy())[0])
        raise PanelFormatError(
            f"duplicate (id, time) = ({df['id'].iloc[first]}, {int(times[first])}) at row {first + 2}",
            row=first + 2, ids=[df['id'].iloc[first]])

    counts = np.bincount(codes, minlength=len(ids))
    values, freq = np.unique(counts, return_counts=True)
    T = int(values[freq == freq.max()].max())
    offenders = [ids[i] for i in np.flatnonzero(counts != T)]
    if offenders:
        detail = ", ".join(f"{ids[i]} ({counts[i]} rows)" for i in np.flatnonzero(counts != T))
        raise PanelFormatError(f"unbalanced panel: expected {T} rows per id; offending ids: {detail}",
                               ids=offenders)

    order = np.lexsort((frame['time'].to_numpy(), codes))
    t_sorted = frame['time'].to_numpy()[order].reshape(len(ids), T)
    gaps = np.flatnonzero(np.any(np.diff(t_sorted, axis=1) != 1, axis=1)) if T > 1 else []
    if len(gaps):
        bad = [ids[i] for i in gaps]
        raise PanelFormatError(f"time indices are not consecutive for ids: {', '.join(bad)}", ids=bad)

    panel = PanelDataset(
        ids=tuple(ids),
        times=tuple(int(t) for t in t_sorted[0]),
        y=y[order].reshape(len(ids), T),
        x=x[order].reshape(len(ids), T, len(regressors)),
    )
    logger.info("loaded panel: n=%d, T=%d, p=%d", panel.n, panel.T, panel.p)
    return panel


def write_panel(panel: PanelDataset, sink) -> None:
    panel.to_frame().to_csv(sink, index=False)


def read_panel(source) -> PanelDataset:
    return load_panel(source)


def _dump(record: Dict, sink, indent: int | None = 2) -> None:
    text = json.dumps(record, indent=indent, allow_nan=True)
    if isinstance(sink, (str, Path)):
        with open(sink, 'w', encoding='utf-8') as f:
            f.write(text + "\n")
    else:
        sink.write(text + "\n")


def _load(source) -> Dict:
    try:
        if isinstance(source, (str, Path)):
            with open(source, 'r', encoding='utf-8') as f:
                record = json.load(f)
        else:
            record = json.load(source)
    except json.JSONDecodeError as e:
        raise RecordFormatError(f"record is not valid JSON: {e}")
    if not isinstance(record, dict):
        raise RecordFormatError(f"record must be a JSON object, found {type(record).__name__}")
    return record


def check_record_header(record: Dict, expected_format: str) -> None:
    if record.get('format') != expected_format:
        raise RecordFormatError(
            f"expected a {expected_format} record, found {record.get('format')!r}")
    if record.get('format_version') != RECORD_VERSION:
        raise RecordVersionError(
            f"{expected_format} record version {record.get('format_version')!r} is not "
            f"supported (expected {RECORD_VERSION})")


def write_estimate(est, sink, config: Dict | None = None, indent: int | None = 2) -> Dict:
    """``indent=None`` writes the record on a single line."""
    record = {'format': ESTIMATE_FORMAT, 'format_version': RECORD_VERSION}
    record.update(est.to_dict())
    record['config'] = dict(config or {})
    _dump(record, sink, indent)
    return record


def read_estimate(source):
    from .md_estimator import MDEstimate

    record = _load(source)
    check_record_header(record, ESTIMATE_FORMAT)
    try:
        return MDEstimate.from_dict(record)
    except (KeyError, TypeError, ValueError) as e:
        raise RecordFormatError(f"malformed {ESTIMATE_FORMAT} record: {e!r}")


def write_record(record: Dict, sink) -> None:
    _dump(record, sink)


def read_record(source) -> Dict:
    return _load(source)
