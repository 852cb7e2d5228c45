"""Long-format CSV ingestion and design construction.

Input files carry one row per observation with a cluster identifier, an
integer time index, a non-negative response and numeric covariate columns.
Design matrices are built from a small term language:

``"1"``
    intercept
``"x"``
    a numeric column
``"x^2"``
    a power of a column
``"x:g"``, ``"x^2:g"``
    elementwise products of the above
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from .estimating import ClusterData

__all__ = [
    "DataError",
    "Columns",
    "Filters",
    "Formula",
    "read_long_csv",
    "validate_long",
    "find_gaps",
    "apply_filters",
    "to_clusters",
    "write_long_csv",
]

_FACTOR = re.compile(r"^\s*([A-Za-z_][A-Za-z0-9_.]*)\s*(?:\^\s*(\d+))?\s*$")


class DataError(ValueError):
    """Input data violate the long-format schema."""


@dataclass(frozen=True)
class Columns:
    """Names of the structural columns in a long-format file."""

    cluster: str = "cluster_id"
    time: str = "time"
    response: str = "y"
    group: str | None = None


@dataclass(frozen=True)
class Filters:
    """Preprocessing applied per cluster, in this order.

    Parameters
    ----------
    drop_first : int
        Discard the first ``drop_first`` observations of every cluster.
    every : int
        Keep every ``every``-th remaining observation; times are renumbered
        ``0, 1, ...`` afterwards.
    truncate : bool
        Cut every cluster to the shortest cluster length within its group
        (the whole file when no group column is set).
    """

    drop_first: int = 0
    every: int = 1
    truncate: bool = False

    def __post_init__(self):
        if self.drop_first < 0:
            raise ValueError("drop_first must be >= 0")
        if self.every < 1:
            raise ValueError("every must be >= 1")


@dataclass
class Formula:
    """Additive design built from column terms."""

    terms: list = field(default_factory=lambda: ["1"])

    def __post_init__(self):
        if isinstance(self.terms, str):
            self.terms = [t for t in self.terms.split("+")]
        self.terms = [t.strip() for t in self.terms if t.strip()]
        if not self.terms:
            raise ValueError("formula has no terms")
        self._parsed = [self._parse(t) for t in self.terms]

    @staticmethod
    def _parse(term):
        if term == "1":
            return []
        factors = []
        for part in term.split(":"):
            m = _FACTOR.match(part)
            if m is None:
                raise ValueError(f"cannot parse formula term {term!r}")
            factors.append((m.group(1), int(m.group(2) or 1)))
        return factors

    @property
    def columns(self) -> list[str]:
        """Data columns the formula refers to."""
        seen = []
        for factors in self._parsed:
            for name, _ in factors:
                if name not in seen:
                    seen.append(name)
        return seen

    def design(self, df: pd.DataFrame) -> np.ndarray:
        missing = [c for c in self.columns if c not in df.columns]
        if missing:
            raise DataError(f"formula refers to missing column(s) {missing}")
        X = np.ones((len(df), len(self.terms)))
        for j, factors in enumerate(self._parsed):
            for name, power in factors:
                X[:, j] *= df[name].to_numpy(dtype=float) ** power
        return X


def _line(index) -> int:
    # header is line 1
    return int(index) + 2


def validate_long(df: pd.DataFrame, columns: Columns, covariates=()) -> pd.DataFrame:
    """Check the schema; return a copy sorted by time within cluster.

    Raises
    ------
    DataError
        With the offending file line numbers.
    """
    need = [columns.cluster, columns.time, columns.response, *covariates]
    if columns.group:
        need.append(columns.group)
    missing = [c for c in dict.fromkeys(need) if c not in df.columns]
    if missing:
        raise DataError(f"missing column(s) {missing}; found {list(df.columns)}")
    df = df.copy()
    df[columns.cluster] = df[columns.cluster].astype(str)

    for col in [columns.time, columns.response, *covariates]:
        vals = pd.to_numeric(df[col], errors="coerce")
        bad = vals.isna() | ~np.isfinite(vals.to_numpy(dtype=float, na_value=np.nan))
        if bad.any():
            lines = [_line(i) for i in df.index[bad]][:10]
            raise DataError(f"column {col!r}: non-numeric or missing values on line(s) {lines}")
        df[col] = vals

    t = df[columns.time].to_numpy(dtype=float)
    bad = t != np.round(t)
    if bad.any():
        raise DataError(f"column {columns.time!r}: non-integer times on line(s) {[_line(i) for i in df.index[bad]][:10]}")
    df[columns.time] = df[columns.time].astype(np.int64)

    bad = df[columns.response] < 0
    if bad.any():
        raise DataError(f"column {columns.response!r}: negative responses on line(s) {[_line(i) for i in df.index[bad]][:10]}")

    dup = df.duplicated([columns.cluster, columns.time], keep="first")
    if dup.any():
        i = df.index[dup][0]
        raise DataError(
            f"duplicate (cluster, time) = ({df.at[i, columns.cluster]}, {df.at[i, columns.time]}) on line {_line(i)}"
        )
    if columns.group:
        ngroups = df.groupby(columns.cluster)[columns.group].nunique()
        if (ngroups > 1).any():
            raise DataError(f"cluster(s) {list(ngroups.index[ngroups > 1])[:10]} span several groups")
    # clusters keep their order of first appearance
    first = {c: k for k, c in enumerate(pd.unique(df[columns.cluster]))}
    order = np.lexsort((df[columns.time].to_numpy(), df[columns.cluster].map(first).to_numpy()))
    return df.iloc[order]


def find_gaps(df: pd.DataFrame, columns: Columns) -> list[tuple[str, int, int]]:
    """``(cluster, last time before gap, next time)`` for every gap."""
    gaps = []
    for cid, sub in df.groupby(columns.cluster, sort=False):
        t = sub[columns.time].to_numpy()
        for k in np.flatnonzero(np.diff(t) != 1):
            gaps.append((cid, int(t[k]), int(t[k + 1])))
    return gaps


def read_long_csv(path, columns: Columns = Columns(), covariates=()) -> pd.DataFrame:
    """Read and validate a long-format CSV file.

    Time gaps within a cluster are reported in full, since the latent
    process is defined on consecutive integer times.
    """
    try:
        df = pd.read_csv(path, encoding="utf-8")
    except (pd.errors.ParserError, UnicodeDecodeError) as exc:
        raise DataError(f"{path}: {exc}") from None
    df = validate_long(df, columns, covariates)
    gaps = find_gaps(df, columns)
    if gaps:
        report = "; ".join(f"cluster {c}: {a} -> {b}" for c, a, b in gaps[:20])
        more = f" (and {len(gaps) - 20} more)" if len(gaps) > 20 else ""
        raise DataError(f"{path}: non-contiguous times in {len(gaps)} place(s): {report}{more}")
    return df


def apply_filters(df: pd.DataFrame, columns: Columns, filters: Filters) -> pd.DataFrame:
    """Drop leading observations, sub-sample and truncate each cluster."""
    parts = []
    for _, sub in df.groupby(columns.cluster, sort=False):
        sub = sub.iloc[filters.drop_first :: filters.every].copy()
        if filters.every > 1 or filters.drop_first:
            sub[columns.time] = np.arange(len(sub), dtype=np.int64)
        if len(sub):
            parts.append(sub)
    if not parts:
        raise DataError("no observations left after filtering")
    out = pd.concat(parts)
    if filters.truncate:
        sizes = out.groupby(columns.cluster, sort=False).size()
        if columns.group:
            groups = out.groupby(columns.cluster, sort=False)[columns.group].first()
            shortest = sizes.groupby(groups).min()
            limit = groups.map(shortest)
        else:
            limit = pd.Series(sizes.min(), index=sizes.index)
        pos = out.groupby(columns.cluster, sort=False).cumcount()
        out = out[pos.to_numpy() < out[columns.cluster].map(limit).to_numpy()]
    return out


def to_clusters(df: pd.DataFrame, columns: Columns, formula: Formula) -> list[ClusterData]:
    """Split a validated frame into :class:`ClusterData` in order of first appearance."""
    X = formula.design(df)
    y = df[columns.response].to_numpy(dtype=float)
    t = df[columns.time].to_numpy()
    ids = df[columns.cluster].to_numpy()
    out = []
    for cid in pd.unique(ids):
        rows = np.flatnonzero(ids == cid)
        out.append(ClusterData(y[rows], X[rows], t[rows], cluster_id=cid))
    return out


def write_long_csv(path, clusters, covariates: dict | None = None, columns: Columns = Columns()):
    """Write clusters as long format.

    ``covariates`` maps output column names to design-matrix column indices.
    """
    covariates = covariates or {}
    frames = []
    for c in clusters:
        d = {columns.cluster: c.cluster_id, columns.time: c.times, columns.response: c.y}
        for name, j in covariates.items():
            d[name] = c.X[:, j]
        frames.append(pd.DataFrame(d))
    pd.concat(frames).to_csv(path, index=False, float_format="%.10g")
