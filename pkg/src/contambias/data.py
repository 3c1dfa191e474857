"""Datasets, CSV ingestion and design-matrix construction.

Column layout of every design built here is fixed::

    [const | arm indicators | control columns | arm x control interactions]

Categorical controls enter as dummies with the most frequent level dropped
(ties broken by the lowest level code); continuous controls enter linearly.
With continuous controls the user is responsible for the propensity score
being linear in them.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np
import pandas as pd

from .exceptions import (
    EmptyAfterFiltering,
    MissingColumn,
    NonFinite,
    RankDeficient,
    SingletonArm,
    ValidationError,
)
from .regress import DesignMatrix, check_full_rank

logger = logging.getLogger(__name__)

CATEGORICAL = "categorical"
CONTINUOUS = "continuous"
CONTROL_STYLES = ("strata_dummies", "linear")
INTERACTIONS = ("none", "demeaned", "raw")


def _sorted_labels(values):
    uniq = pd.unique(pd.Series(values))
    try:
        return sorted(uniq, key=float)
    except (TypeError, ValueError):
        return sorted(uniq, key=str)


@dataclass(frozen=True, eq=False)
class Dataset:
    """Outcome, arm labels ``0..K`` (0 is the control arm) and controls.

    Categorical controls are stored as integer codes into
    ``control_levels[name]``.
    """

    outcome: np.ndarray
    treatment: np.ndarray
    controls: np.ndarray
    control_names: tuple = ()
    control_kinds: tuple = ()
    arm_names: tuple = ()
    control_levels: dict = field(default_factory=dict)
    n_dropped: int = 0

    def __post_init__(self):
        y = np.asarray(self.outcome, dtype=float).ravel()
        d = np.asarray(self.treatment).ravel().astype(int)
        C = np.asarray(self.controls, dtype=float)
        if C.ndim == 1:
            C = C[:, None]
        if C.size == 0:
            C = np.zeros((y.shape[0], 0))
        object.__setattr__(self, "outcome", y)
        object.__setattr__(self, "treatment", d)
        object.__setattr__(self, "controls", C)
        n = y.shape[0]
        if n == 0:
            raise EmptyAfterFiltering("dataset has no rows")
        if d.shape[0] != n or C.shape[0] != n:
            raise ValidationError("outcome, treatment and controls differ in length")
        if not (np.all(np.isfinite(y)) and np.all(np.isfinite(C))):
            raise NonFinite("dataset contains NaN or Inf")
        names = tuple(self.control_names) or tuple(f"w{j}" for j in range(C.shape[1]))
        kinds = tuple(self.control_kinds) or (CATEGORICAL,) * C.shape[1]
        if len(names) != C.shape[1] or len(kinds) != C.shape[1]:
            raise ValidationError("control names/kinds do not match control columns")
        for k in kinds:
            if k not in (CATEGORICAL, CONTINUOUS):
                raise ValidationError(f"unknown control kind {k!r}")
        object.__setattr__(self, "control_names", names)
        object.__setattr__(self, "control_kinds", kinds)
        n_arms = int(d.max()) + 1 if d.size else 0
        arms = tuple(self.arm_names) or tuple(str(a) for a in range(n_arms))
        object.__setattr__(self, "arm_names", arms)
        if d.min() < 0 or d.max() >= len(arms):
            raise ValidationError("treatment codes must lie in 0..K")
        counts = np.bincount(d, minlength=len(arms))
        if np.any(counts == 0):
            missing = [arms[a] for a in np.flatnonzero(counts == 0)]
            raise SingletonArm(f"arms with no observations: {missing}")
        levels = dict(self.control_levels)
        for j, (name, kind) in enumerate(zip(names, kinds)):
            if kind == CATEGORICAL and name not in levels:
                codes = C[:, j]
                if np.any(codes != np.round(codes)) or np.any(codes < 0):
                    raise ValidationError(
                        f"categorical control {name!r} must hold integer codes"
                    )
                levels[name] = [
                    str(int(v)) for v in range(int(codes.max()) + 1)
                ]
        object.__setattr__(self, "control_levels", levels)

    # -- basic properties -------------------------------------------------
    @property
    def n(self) -> int:
        return self.outcome.shape[0]

    @property
    def n_treatments(self) -> int:
        """K, the number of non-control arms."""
        return len(self.arm_names) - 1

    @property
    def arm_counts(self) -> np.ndarray:
        return np.bincount(self.treatment, minlength=len(self.arm_names))

    @property
    def all_categorical(self) -> bool:
        return all(k == CATEGORICAL for k in self.control_kinds)

    @classmethod
    def from_arrays(
        cls,
        outcome,
        treatment,
        controls=None,
        *,
        control_names: Optional[Sequence[str]] = None,
        control_kinds: Optional[Sequence[str]] = None,
        control_arm=None,
        arm_order: Optional[Sequence] = None,
    ) -> "Dataset":
        """Build a dataset from raw labels.

        Treatment labels are mapped to ``0..K`` with ``control_arm`` (or the
        label ``0`` / the smallest label when not given) mapped to 0 and the
        rest in ``arm_order`` or sorted order. Categorical controls may hold
        arbitrary hashable labels.
        """
        y = np.asarray(outcome, dtype=float).ravel()
        d_raw = np.asarray(treatment).ravel()
        labels = list(arm_order) if arm_order is not None else _sorted_labels(d_raw)
        if arm_order is not None and control_arm is not None \
                and str(control_arm) not in map(str, labels):
            labels.insert(0, control_arm)
        present = set(pd.unique(pd.Series(d_raw)))
        unknown = present - set(labels)
        if unknown:
            raise ValidationError(f"treatment labels not in arm order: {sorted(map(str, unknown))}")
        if control_arm is None:
            control_arm = 0 if 0 in labels else labels[0]
        if control_arm not in labels:
            str_match = [lab for lab in labels if str(lab) == str(control_arm)]
            if not str_match:
                raise SingletonArm(f"control arm {control_arm!r} not found in treatment")
            control_arm = str_match[0]
        labels.remove(control_arm)
        labels = [control_arm] + labels
        code = {lab: i for i, lab in enumerate(labels)}
        d = np.array([code[v] for v in d_raw], dtype=int)

        if controls is None:
            frame = pd.DataFrame(index=range(y.shape[0]))
        elif isinstance(controls, pd.DataFrame):
            frame = controls.reset_index(drop=True)
        else:
            arr = np.asarray(controls, dtype=object)
            if arr.ndim == 1:
                arr = arr[:, None]
            frame = pd.DataFrame(arr)
        names = list(control_names) if control_names is not None else [str(c) for c in frame.columns]
        if control_names is None and not isinstance(controls, pd.DataFrame):
            names = [f"w{j}" for j in range(frame.shape[1])]
        kinds = list(control_kinds) if control_kinds is not None else [CATEGORICAL] * frame.shape[1]
        cols, levels = [], {}
        for j, (name, kind) in enumerate(zip(names, kinds)):
            col = frame.iloc[:, j]
            if kind == CATEGORICAL:
                lv = _sorted_labels(col.to_numpy())
                lookup = {v: i for i, v in enumerate(lv)}
                cols.append(np.array([lookup[v] for v in col], dtype=float))
                levels[name] = [str(v) for v in lv]
            else:
                cols.append(pd.to_numeric(col).to_numpy(dtype=float))
        C = np.column_stack(cols) if cols else np.zeros((y.shape[0], 0))
        return cls(
            y, d, C, tuple(names), tuple(kinds),
            tuple(str(lab) for lab in labels), levels,
        )

    def subset(self, rows) -> "Dataset":
        """Dataset restricted to ``rows`` (indices or boolean mask)."""
        rows = np.asarray(rows)
        if rows.dtype == bool:
            rows = np.flatnonzero(rows)
        if rows.size == 0:
            raise EmptyAfterFiltering("subset has no rows")
        return replace(
            self,
            outcome=self.outcome[rows],
            treatment=self.treatment[rows],
            controls=self.controls[rows],
            n_dropped=0,
        )

    def with_outcome(self, outcome) -> "Dataset":
        return replace(self, outcome=np.asarray(outcome, dtype=float))

    def to_frame(self) -> pd.DataFrame:
        data = {"outcome": self.outcome,
                "treatment": [self.arm_names[a] for a in self.treatment]}
        for j, (name, kind) in enumerate(zip(self.control_names, self.control_kinds)):
            if kind == CATEGORICAL:
                lv = self.control_levels[name]
                data[name] = [lv[int(c)] for c in self.controls[:, j]]
            else:
                data[name] = self.controls[:, j]
        return pd.DataFrame(data)


def load_csv(
    path,
    outcome_col: str,
    treatment_col: str,
    control_cols: Sequence[str] = (),
    kinds: Optional[Sequence[str]] = None,
    *,
    control_arm=None,
    arm_order: Optional[Sequence] = None,
    min_arm_size: int = 1,
) -> Dataset:
    """Read a header-first UTF-8 CSV into a :class:`Dataset`.

    Rows with a missing value in any used column are dropped; the count is
    logged and stored in ``Dataset.n_dropped``.
    """
    control_cols = list(control_cols)
    kinds = list(kinds) if kinds is not None else [CATEGORICAL] * len(control_cols)
    if len(kinds) != len(control_cols):
        raise ValidationError("one kind per control column is required")
    frame = pd.read_csv(path, dtype=str, encoding="utf-8", skipinitialspace=True)
    frame.columns = [c.strip() for c in frame.columns]
    used = [outcome_col, treatment_col] + control_cols
    missing = [c for c in used if c not in frame.columns]
    if missing:
        raise MissingColumn(f"columns not found in {path}: {missing}")
    frame = frame[used].apply(lambda s: s.str.strip())
    frame = frame.replace("", np.nan)
    numeric = [outcome_col] + [c for c, k in zip(control_cols, kinds) if k == CONTINUOUS]
    for col in numeric:
        converted = pd.to_numeric(frame[col], errors="coerce")
        bad = converted.isna() & frame[col].notna()
        if bad.any():
            raise ValidationError(
                f"column {col!r} has {int(bad.sum())} non-numeric entries"
            )
        frame[col] = converted
    keep = frame.notna().all(axis=1)
    n_dropped = int((~keep).sum())
    if n_dropped:
        logger.warning("dropped %d rows with missing values", n_dropped)
    frame = frame[keep].reset_index(drop=True)
    if frame.empty:
        raise EmptyAfterFiltering(f"no complete rows in {path}")
    if control_arm is not None:
        control_arm = str(control_arm)
    if arm_order is not None:
        arm_order = [str(a) for a in arm_order]
    ds = Dataset.from_arrays(
        frame[outcome_col].to_numpy(dtype=float),
        frame[treatment_col].to_numpy(),
        frame[control_cols] if control_cols else None,
        control_names=control_cols,
        control_kinds=kinds,
        control_arm=control_arm,
        arm_order=arm_order,
    )
    small = [a for a, c in zip(ds.arm_names, ds.arm_counts) if c < min_arm_size]
    if small:
        raise SingletonArm(f"arms with fewer than {min_arm_size} observations: {small}")
    return replace(ds, n_dropped=n_dropped)


def encode_treatments(dataset: Dataset) -> np.ndarray:
    """N x K indicator matrix; column k-1 is ``1{D = k}``."""
    K = dataset.n_treatments
    X = np.zeros((dataset.n, K))
    treated = dataset.treatment > 0
    X[np.flatnonzero(treated), dataset.treatment[treated] - 1] = 1.0
    return X


def decode_treatments(X: np.ndarray) -> np.ndarray:
    X = np.asarray(X)
    return np.where(X.sum(axis=1) > 0, X.argmax(axis=1) + 1, 0)


@dataclass(frozen=True)
class DesignSpec:
    """Regression specification.

    control_style : 'strata_dummies' (all controls categorical) or 'linear'
    interaction : 'none', 'demeaned' or 'raw' arm x control interactions
    subsample : arms to keep; the control arm 0 is always kept
    """

    control_style: str = "strata_dummies"
    interaction: str = "none"
    subsample: Optional[tuple] = None

    def __post_init__(self):
        if self.control_style not in CONTROL_STYLES:
            raise ValidationError(f"control_style must be one of {CONTROL_STYLES}")
        if self.interaction not in INTERACTIONS:
            raise ValidationError(f"interaction must be one of {INTERACTIONS}")
        if self.subsample is not None:
            object.__setattr__(self, "subsample", tuple(sorted(set(self.subsample) | {0})))

    @classmethod
    def default_for(cls, dataset: Dataset, **kwargs) -> "DesignSpec":
        style = "strata_dummies" if dataset.all_categorical else "linear"
        return cls(control_style=style, **kwargs)


def control_block(dataset: Dataset, rows: Optional[np.ndarray] = None):
    """Coded control columns (no intercept) for ``rows``.

    Returns ``(values, labels)``.
    """
    rows = np.arange(dataset.n) if rows is None else rows
    cols, labels = [], []
    for j, (name, kind) in enumerate(zip(dataset.control_names, dataset.control_kinds)):
        c = dataset.controls[rows, j]
        if kind == CONTINUOUS:
            cols.append(c)
            labels.append(name)
            continue
        codes = c.astype(int)
        present, counts = np.unique(codes, return_counts=True)
        ref = present[np.argmax(counts)]
        lv = dataset.control_levels[name]
        for code in present:
            if code == ref:
                continue
            cols.append((codes == code).astype(float))
            labels.append(f"{name}={lv[code]}")
    values = np.column_stack(cols) if cols else np.zeros((rows.shape[0], 0))
    return values, labels


def stratum_index(dataset: Dataset, rows: Optional[np.ndarray] = None):
    """Group rows by identical control values.

    Returns ``(inverse, labels, first_rows)``: the stratum of each row,
    one label per stratum, and a representative row index (into ``rows``)
    per stratum.
    """
    rows = np.arange(dataset.n) if rows is None else rows
    C = dataset.controls[rows]
    if C.shape[1] == 0:
        return np.zeros(rows.shape[0], dtype=int), ["all"], np.array([0])
    _, first, inverse = np.unique(C, axis=0, return_index=True, return_inverse=True)
    inverse = np.asarray(inverse).ravel()
    labels = []
    for r in first:
        parts = []
        for j, (name, kind) in enumerate(zip(dataset.control_names, dataset.control_kinds)):
            v = C[r, j]
            parts.append(dataset.control_levels[name][int(v)] if kind == CATEGORICAL else f"{v:g}")
        labels.append("|".join(parts))
    return inverse, labels, first


def cell_counts(dataset: Dataset, rows: Optional[np.ndarray] = None):
    """Stratum x arm observation counts (S x (K+1)) and the stratum index."""
    rows = np.arange(dataset.n) if rows is None else rows
    inverse, labels, first = stratum_index(dataset, rows)
    counts = np.zeros((len(labels), len(dataset.arm_names)), dtype=int)
    np.add.at(counts, (inverse, dataset.treatment[rows]), 1)
    return counts, inverse, labels, first


def build_design(
    dataset: Dataset, spec: Optional[DesignSpec] = None, *, check_rank: bool = True
) -> DesignMatrix:
    """Design matrix for ``spec``; ``rows`` records the subsample used.

    Demeaned interactions are centred at the control means of the rows used.
    """
    spec = spec or DesignSpec.default_for(dataset)
    if spec.control_style == "strata_dummies" and not dataset.all_categorical:
        raise ValidationError("strata_dummies requires all controls to be categorical")
    if spec.subsample is None:
        rows = np.arange(dataset.n)
        arms = list(range(1, len(dataset.arm_names)))
    else:
        bad = [a for a in spec.subsample if not 0 <= a < len(dataset.arm_names)]
        if bad:
            raise ValidationError(f"subsample arms out of range: {bad}")
        rows = np.flatnonzero(np.isin(dataset.treatment, spec.subsample))
        arms = [a for a in spec.subsample if a != 0]
    d = dataset.treatment[rows]
    n = rows.shape[0]
    T = np.column_stack([(d == a).astype(float) for a in arms]) if arms else np.zeros((n, 0))
    t_labels = [f"arm={dataset.arm_names[a]}" for a in arms]
    C, c_labels = control_block(dataset, rows)
    means = C.mean(axis=0) if C.shape[1] else np.zeros(0)
    blocks, parts, labels = {}, [np.ones((n, 1))], ["const"]
    blocks["intercept"] = slice(0, 1)
    blocks["treatments"] = slice(1, 1 + T.shape[1])
    parts.append(T)
    labels += t_labels
    start = 1 + T.shape[1]
    blocks["controls"] = slice(start, start + C.shape[1])
    parts.append(C)
    labels += c_labels
    start += C.shape[1]
    if spec.interaction != "none":
        Cc = C - means if spec.interaction == "demeaned" else C
        inter = [T[:, [k]] * Cc for k in range(T.shape[1])]
        I = np.hstack(inter) if inter else np.zeros((n, 0))
        parts.append(I)
        labels += [f"{t}*{c}" for t in t_labels for c in c_labels]
        blocks["interactions"] = slice(start, start + I.shape[1])
    else:
        blocks["interactions"] = slice(start, start)
    values = np.hstack(parts)
    design = DesignMatrix(values, labels, True, blocks, rows, means)
    if check_rank:
        try:
            check_full_rank(design)
        except RankDeficient as exc:
            msg = str(exc)
            if spec.interaction != "none" and dataset.control_names:
                counts, _, s_labels, _ = cell_counts(dataset, rows)
                arm_cols = [0] + arms
                thin = [s_labels[s] for s in range(len(s_labels))
                        if np.count_nonzero(counts[s, arm_cols]) < len(arm_cols)]
                if thin:
                    msg += f"; strata missing an arm: {thin}"
            raise RankDeficient(msg, exc.columns) from None
    return design
