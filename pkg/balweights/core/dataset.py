import itertools
import json
import math
from collections import Counter
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np
import pandas as pd
from numpy.polynomial import hermite_e

from balweights.core.errors import InputError
from balweights.helpers.logger import LOGGER
from config import MAX_FEATURE_COLUMNS

BASIS_KINDS = ("linear", "binary-interactions", "polynomial", "hermite", "custom")
INTERCEPT_LABEL = "1"
GROUPS = ("treated", "control")


def _frozen(values, dtype=float):
    out = np.array(values, dtype=dtype, copy=True)
    out.setflags(write=False)
    return out


def parse_scale(value) -> float:
    try:
        scale = float(value)
    except (TypeError, ValueError):
        raise InputError(f"scale {value!r} is not a number")
    if math.isnan(scale) or scale < 0:
        raise InputError(f"scale {value!r} must be nonnegative")
    return scale


@dataclass(frozen=True)
class ColumnRoles:
    treatment: str
    outcome: Optional[str] = None
    covariates: Optional[Sequence[str]] = None
    unit_id: Optional[str] = None

    @classmethod
    def from_dict(cls, payload: Mapping) -> "ColumnRoles":
        if "treatment" not in payload:
            raise InputError("schema must name a treatment column")
        covariates = payload.get("covariates")
        return cls(
            treatment=payload["treatment"],
            outcome=payload.get("outcome"),
            covariates=tuple(covariates) if covariates else None,
            unit_id=payload.get("unit_id"),
        )


@dataclass(frozen=True)
class ObservationTable:
    covariates: np.ndarray
    treatment: np.ndarray
    outcome: Optional[np.ndarray] = None
    column_names: tuple = ()
    unit_ids: tuple = ()

    def __post_init__(self):
        X = np.asarray(self.covariates, dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        if X.ndim != 2:
            raise InputError(f"covariates must be a matrix, got {X.ndim} dimensions")
        n, d = X.shape
        if n < 2:
            raise InputError(f"at least two units are required, got {n}")
        if not np.all(np.isfinite(X)):
            raise InputError("covariates contain missing or non-finite entries")
        W = np.asarray(self.treatment, dtype=float)
        if W.shape != (n,):
            raise InputError(f"treatment has shape {W.shape}, expected ({n},)")
        if not np.all(np.isin(W, (0.0, 1.0))):
            bad = sorted(set(np.unique(W[~np.isin(W, (0.0, 1.0))]).tolist()))
            raise InputError(f"non-binary treatment values {bad}")
        Y = None
        if self.outcome is not None:
            Y = np.asarray(self.outcome, dtype=float)
            if Y.shape != (n,):
                raise InputError(f"outcome has shape {Y.shape}, expected ({n},)")
            if not np.all(np.isfinite(Y)):
                raise InputError("outcome contains missing or non-finite entries")
        names = tuple(str(c) for c in self.column_names) or tuple(f"x{j + 1}" for j in range(d))
        if len(names) != d:
            raise InputError(f"{len(names)} column names given for {d} covariates")
        duplicates = sorted(c for c, k in Counter(names).items() if k > 1)
        if duplicates:
            raise InputError(f"duplicate column names {duplicates}")
        ids = tuple(str(u) for u in self.unit_ids) or tuple(str(i) for i in range(n))
        if len(ids) != n:
            raise InputError(f"{len(ids)} unit ids given for {n} units")
        object.__setattr__(self, "covariates", _frozen(X))
        object.__setattr__(self, "treatment", _frozen(W))
        object.__setattr__(self, "outcome", None if Y is None else _frozen(Y))
        object.__setattr__(self, "column_names", names)
        object.__setattr__(self, "unit_ids", ids)

    @classmethod
    def from_arrays(cls, covariates, treatment, outcome=None, column_names=None, unit_ids=None):
        return cls(
            covariates=covariates,
            treatment=treatment,
            outcome=outcome,
            column_names=tuple(column_names or ()),
            unit_ids=tuple(unit_ids or ()),
        )

    @property
    def n(self) -> int:
        return self.covariates.shape[0]

    @property
    def d(self) -> int:
        return self.covariates.shape[1]

    @property
    def n_treated(self) -> int:
        return int(self.treatment.sum())

    @property
    def n_control(self) -> int:
        return self.n - self.n_treated

    def arm_mask(self, group: str = "treated") -> np.ndarray:
        return arm_indicator(self.treatment, group)

    def require_arms(self, *groups):
        for group in groups:
            if self.arm_mask(group).sum() < 1:
                raise InputError(f"the {group} arm has no units")

    def require_outcome(self) -> np.ndarray:
        if self.outcome is None:
            raise InputError("this operation needs outcomes but the table has none")
        return self.outcome

    def with_outcome(self, outcome) -> "ObservationTable":
        return replace(self, outcome=outcome)


def arm_indicator(treatment, group: str = "treated") -> np.ndarray:
    if group not in GROUPS:
        raise InputError(f"unknown group {group!r}, expected one of {GROUPS}")
    W = np.asarray(treatment, dtype=float)
    return W if group == "treated" else 1.0 - W


def load_csv(path, roles: ColumnRoles) -> ObservationTable:
    path = Path(path)
    if not path.is_file():
        raise InputError(f"data file {path} does not exist")
    try:
        header = pd.read_csv(path, header=None, nrows=1, dtype=str, encoding="utf-8")
    except (pd.errors.EmptyDataError, UnicodeDecodeError) as e:
        raise InputError(f"cannot read header of {path}: {e}")
    names = [str(c).strip() for c in header.iloc[0].tolist()]
    duplicates = sorted(c for c, k in Counter(names).items() if k > 1)
    if duplicates:
        raise InputError(f"duplicate column names {duplicates} in {path}")
    frame = pd.read_csv(path, encoding="utf-8", dtype=str, keep_default_na=False)
    frame.columns = names
    for role, column in (("treatment", roles.treatment), ("outcome", roles.outcome), ("unit_id", roles.unit_id)):
        if column is not None and column not in frame.columns:
            raise InputError(f"{role} column {column!r} not found in {path}")
    reserved = {roles.treatment, roles.outcome, roles.unit_id} - {None}
    if roles.covariates:
        covariates = list(roles.covariates)
        missing = [c for c in covariates if c not in frame.columns]
        if missing:
            raise InputError(f"covariate columns {missing} not found in {path}")
    else:
        covariates = [c for c in frame.columns if c not in reserved]
    if not covariates:
        raise InputError(f"no covariate columns left in {path}")

    def numeric(column):
        raw = frame[column].str.strip()
        empty = raw == ""
        if empty.any():
            row = int(np.flatnonzero(empty.to_numpy())[0]) + 2
            raise InputError(f"missing value in column {column!r} at line {row}")
        values = pd.to_numeric(raw, errors="coerce")
        bad = values.isna()
        if bad.any():
            row = int(np.flatnonzero(bad.to_numpy())[0])
            raise InputError(f"non-numeric cell {raw.iloc[row]!r} in column {column!r} at line {row + 2}")
        return values.to_numpy(dtype=float)

    X = np.column_stack([numeric(c) for c in covariates]) if len(frame) else np.empty((0, len(covariates)))
    W = numeric(roles.treatment)
    Y = numeric(roles.outcome) if roles.outcome else None
    ids = tuple(frame[roles.unit_id].tolist()) if roles.unit_id else ()
    table = ObservationTable(covariates=X, treatment=W, outcome=Y, column_names=tuple(covariates), unit_ids=ids)
    LOGGER.info(f"Loaded {table.n} units ({table.n_treated} treated) with {table.d} covariates from {path}")
    return table


@dataclass(frozen=True)
class BasisSpec:
    kind: str = "linear"
    max_order: int = 2
    decay: float = 1.0
    degree: int = 2
    columns: tuple = ()
    scales: Mapping[str, float] = field(default_factory=dict)
    intercept_scale: float = math.inf
    standardize: bool = True

    def validate(self, d: int):
        if self.kind not in BASIS_KINDS:
            raise InputError(f"unknown basis kind {self.kind!r}, expected one of {BASIS_KINDS}")
        if not 0.0 < self.decay <= 1.0:
            raise InputError(f"decay must lie in (0, 1], got {self.decay}")
        if self.kind == "binary-interactions" and not 0 <= self.max_order <= d:
            raise InputError(f"max_order must lie in [0, {d}], got {self.max_order}")
        if self.kind in ("polynomial", "hermite") and self.degree < 1:
            raise InputError(f"degree must be at least 1, got {self.degree}")
        if self.kind == "custom" and not self.columns:
            raise InputError("custom basis needs a non-empty column list")
        parse_scale(self.intercept_scale)
        for value in self.scales.values():
            parse_scale(value)

    @classmethod
    def from_dict(cls, payload: Mapping) -> "BasisSpec":
        known = {"kind", "max_order", "decay", "degree", "columns", "scales", "intercept_scale", "standardize"}
        unknown = sorted(set(payload) - known)
        if unknown:
            raise InputError(f"unknown basis keys {unknown}")
        return cls(
            kind=payload.get("kind", "linear"),
            max_order=int(payload.get("max_order", 2)),
            decay=float(payload.get("decay", 1.0)),
            degree=int(payload.get("degree", 2)),
            columns=tuple(payload.get("columns", ())),
            scales={str(k): parse_scale(v) for k, v in payload.get("scales", {}).items()},
            intercept_scale=parse_scale(payload.get("intercept_scale", "inf")),
            standardize=bool(payload.get("standardize", True)),
        )

    @classmethod
    def from_json(cls, path) -> "BasisSpec":
        try:
            with open(path, encoding="utf-8") as handle:
                payload = json.load(handle)
        except (OSError, json.JSONDecodeError) as e:
            raise InputError(f"cannot read basis config {path}: {e}")
        return cls.from_dict(payload.get("basis", payload))

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "max_order": self.max_order,
            "decay": self.decay,
            "degree": self.degree,
            "columns": list(self.columns),
            "scales": dict(self.scales),
            "intercept_scale": self.intercept_scale,
            "standardize": self.standardize,
        }


def count_columns(spec: BasisSpec, d: int) -> int:
    if spec.kind == "linear":
        return d + 1
    if spec.kind == "custom":
        return len(spec.columns) + 1
    if spec.kind == "binary-interactions":
        return sum(math.comb(d, k) for k in range(spec.max_order + 1))
    return math.comb(d + spec.degree, spec.degree)


def basis_terms(spec: BasisSpec, column_names: Sequence[str]) -> list:
    d = len(column_names)
    if spec.kind == "linear":
        return [()] + [(j,) for j in range(d)]
    if spec.kind == "custom":
        index = {name: j for j, name in enumerate(column_names)}
        missing = [c for c in spec.columns if c not in index]
        if missing:
            raise InputError(f"custom basis columns {missing} are not covariates")
        return [()] + [(index[c],) for c in spec.columns]
    if spec.kind == "binary-interactions":
        return [t for k in range(spec.max_order + 1) for t in itertools.combinations(range(d), k)]
    return [t for k in range(spec.degree + 1) for t in itertools.combinations_with_replacement(range(d), k)]


def term_label(term: tuple, column_names: Sequence[str], hermite: bool = False) -> str:
    if not term:
        return INTERCEPT_LABEL
    parts = []
    for var, power in sorted(Counter(term).items()):
        name = column_names[var]
        if hermite:
            parts.append(f"He{power}({name})")
        else:
            parts.append(name if power == 1 else f"{name}^{power}")
    return "*".join(parts)


def evaluate_terms(X: np.ndarray, terms: Sequence[tuple], hermite: bool = False) -> np.ndarray:
    X = np.atleast_2d(np.asarray(X, dtype=float))
    values = np.ones((X.shape[0], len(terms)))
    for col, term in enumerate(terms):
        for var, power in Counter(term).items():
            if hermite:
                values[:, col] *= hermite_e.hermeval(X[:, var], [0.0] * power + [1.0])
            else:
                values[:, col] *= X[:, var] ** power
    return values


@dataclass(frozen=True)
class FeatureMatrix:
    values: np.ndarray
    scales: np.ndarray
    labels: tuple
    orders: tuple = ()
    intercept: Optional[int] = None
    center: Optional[np.ndarray] = None
    spread: Optional[np.ndarray] = None
    dropped: tuple = ()
    warnings: tuple = ()
    basis: Optional[BasisSpec] = None
    column_names: tuple = ()
    terms: tuple = ()

    def __post_init__(self):
        values = np.atleast_2d(np.asarray(self.values, dtype=float))
        p = values.shape[1]
        if p < 1:
            raise InputError("a feature matrix needs at least one column")
        scales = np.asarray(self.scales, dtype=float)
        if scales.shape != (p,):
            raise InputError(f"{scales.shape[0] if scales.ndim else 0} scales given for {p} columns")
        if np.any(np.isnan(scales)) or np.any(scales < 0):
            raise InputError("scales must be nonnegative")
        if len(self.labels) != p:
            raise InputError(f"{len(self.labels)} labels given for {p} columns")
        if self.intercept is not None and not np.all(values[:, self.intercept] == 1.0):
            raise InputError(f"intercept column {self.labels[self.intercept]!r} is not constant 1")
        object.__setattr__(self, "values", _frozen(values))
        object.__setattr__(self, "scales", _frozen(scales))
        object.__setattr__(self, "labels", tuple(self.labels))
        object.__setattr__(self, "orders", tuple(self.orders) or (1,) * p)
        if self.center is not None:
            object.__setattr__(self, "center", _frozen(self.center))
            object.__setattr__(self, "spread", _frozen(self.spread))

    @property
    def n(self) -> int:
        return self.values.shape[0]

    @property
    def p(self) -> int:
        return self.values.shape[1]

    @property
    def standardized(self) -> bool:
        return self.center is not None

    @property
    def exact(self) -> np.ndarray:
        return np.isinf(self.scales)

    @property
    def free(self) -> np.ndarray:
        return self.scales == 0

    @property
    def bounded(self) -> np.ndarray:
        return np.isfinite(self.scales) & (self.scales > 0)

    def with_scales(self, scales) -> "FeatureMatrix":
        return replace(self, scales=np.asarray([parse_scale(s) for s in np.ravel(scales)]))

    def with_values(self, values) -> "FeatureMatrix":
        return replace(self, values=values)

    def transform(self, covariates) -> np.ndarray:
        if not self.terms and self.basis is None:
            raise InputError("this feature matrix was not built from a basis and cannot be re-evaluated")
        hermite = self.basis is not None and self.basis.kind == "hermite"
        values = evaluate_terms(covariates, self.terms, hermite=hermite)
        if self.standardized:
            values = (values - self.center) / self.spread
        return values

    def column_sd(self) -> np.ndarray:
        sd = self.values.std(axis=0)
        return np.where(sd > 0, sd, 1.0)


def expand_basis(table: ObservationTable, spec: BasisSpec, max_columns: int = MAX_FEATURE_COLUMNS) -> FeatureMatrix:
    spec.validate(table.d)
    if spec.kind == "binary-interactions" and not np.all(np.isin(table.covariates, (0.0, 1.0))):
        bad = [table.column_names[j] for j in range(table.d) if not np.all(np.isin(table.covariates[:, j], (0.0, 1.0)))]
        raise InputError(f"binary-interactions basis needs 0/1 covariates, columns {bad} are not binary")
    p = count_columns(spec, table.d)
    if p > max_columns:
        raise InputError(f"basis would produce {p} columns, more than the cap of {max_columns}")
    terms = basis_terms(spec, table.column_names)
    hermite = spec.kind == "hermite"
    labels = [term_label(t, table.column_names, hermite) for t in terms]
    orders = [len(t) for t in terms]
    scales = [spec.intercept_scale if not t else spec.decay ** len(t) for t in terms]
    index = {label: j for j, label in enumerate(labels)}
    unknown = sorted(set(spec.scales) - set(index))
    if unknown:
        raise InputError(f"scale overrides name unknown columns {unknown}")
    for label, value in spec.scales.items():
        scales[index[label]] = value
    values = evaluate_terms(table.covariates, terms, hermite=hermite)
    LOGGER.info(f"Expanded {table.d} covariates into {p} {spec.kind} columns")
    return FeatureMatrix(
        values=values,
        scales=np.asarray(scales, dtype=float),
        labels=tuple(labels),
        orders=tuple(orders),
        intercept=0,
        basis=spec,
        column_names=table.column_names,
        terms=tuple(terms),
    )


def standardize(fm: FeatureMatrix) -> FeatureMatrix:
    if fm.standardized:
        return fm
    means = fm.values.mean(axis=0)
    sds = fm.values.std(axis=0)
    keep, dropped, warnings = [], list(fm.dropped), list(fm.warnings)
    for j in range(fm.p):
        if j == fm.intercept:
            keep.append(j)
        elif sds[j] <= 1e-12 * max(1.0, abs(means[j])):
            dropped.append(fm.labels[j])
            message = f"constant column {fm.labels[j]!r} dropped before standardization"
            warnings.append(message)
            LOGGER.warning(message)
        else:
            keep.append(j)
    if not keep:
        raise InputError("every column is constant; nothing left to balance")
    center = np.where([j == fm.intercept for j in keep], 0.0, means[keep])
    spread = np.where([j == fm.intercept for j in keep], 1.0, sds[keep])
    intercept = keep.index(fm.intercept) if fm.intercept is not None else None
    return replace(
        fm,
        values=(fm.values[:, keep] - center) / spread,
        scales=fm.scales[keep],
        labels=tuple(fm.labels[j] for j in keep),
        orders=tuple(fm.orders[j] for j in keep),
        intercept=intercept,
        center=center,
        spread=spread,
        dropped=tuple(dropped),
        warnings=tuple(warnings),
        terms=tuple(fm.terms[j] for j in keep) if fm.terms else (),
    )


def destandardize(fm: FeatureMatrix) -> FeatureMatrix:
    if not fm.standardized:
        return fm
    return replace(fm, values=fm.values * fm.spread + fm.center, center=None, spread=None)


def build_features(table: ObservationTable, spec: BasisSpec) -> FeatureMatrix:
    fm = expand_basis(table, spec)
    return standardize(fm) if spec.standardize else fm
