from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from balweights.core.dataset import FeatureMatrix, ObservationTable, arm_indicator
from balweights.core.errors import InputError
from balweights.helpers.artifacts import format_table
from balweights.helpers.logger import LOGGER
from config import PSD_TOLERANCE, WEIGHT_FLAG_TOLERANCE

PROVENANCES = ("full-sample", "treated-sample", "control-sample", "external-sample", "gaussian-point", "custom")


@dataclass(frozen=True)
class WeightVector:
    """Unit weights gamma; entries off the weighted arm are zero.

    sum_to_one means (1/n) sum over the arm of gamma_i equals 1.
    """

    values: np.ndarray
    group: str = "treated"
    sum_to_one: bool = False
    nonnegative: bool = False

    def __post_init__(self):
        values = np.array(self.values, dtype=float, copy=True)
        if values.ndim != 1:
            raise InputError("weights must be a vector")
        if not np.all(np.isfinite(values)):
            raise InputError("weights contain non-finite entries")
        arm_indicator(np.zeros(1), self.group)
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    @classmethod
    def on_arm(cls, values, treatment, group="treated", sum_to_one=None, nonnegative=None) -> "WeightVector":
        arm = arm_indicator(treatment, group)
        values = np.asarray(values, dtype=float)
        if values.shape != arm.shape:
            raise InputError(f"{values.shape[0]} weights given for {arm.shape[0]} units")
        values = np.where(arm == 1.0, values, 0.0)
        if sum_to_one is None:
            sum_to_one = abs(values.sum() / values.size - 1.0) <= WEIGHT_FLAG_TOLERANCE
        if nonnegative is None:
            nonnegative = bool(np.all(values >= -WEIGHT_FLAG_TOLERANCE))
        return cls(values=values, group=group, sum_to_one=bool(sum_to_one), nonnegative=bool(nonnegative))

    @property
    def n(self) -> int:
        return self.values.size

    def arm(self, treatment) -> np.ndarray:
        arm = arm_indicator(treatment, self.group)
        if arm.shape != self.values.shape:
            raise InputError(f"{self.values.size} weights given for {arm.size} units")
        return arm

    def weighted(self, treatment) -> np.ndarray:
        return self.arm(treatment) * self.values

    def validate(self, treatment, tol: float = WEIGHT_FLAG_TOLERANCE):
        arm = self.arm(treatment)
        off = np.abs(self.values[arm == 0.0])
        if off.size and off.max() > 0:
            raise InputError(f"weights are nonzero on {int((off > 0).sum())} units outside the {self.group} arm")
        if self.sum_to_one and abs(self.values.sum() / self.n - 1.0) > tol:
            raise InputError(f"weights flagged sum-to-one average {self.values.sum() / self.n:.12g}")
        if self.nonnegative and self.values.min() < -tol:
            raise InputError(f"weights flagged nonnegative have minimum {self.values.min():.3g}")
        return self

    def to_dict(self) -> dict:
        return {
            "values": self.values,
            "group": self.group,
            "sum_to_one": self.sum_to_one,
            "nonnegative": self.nonnegative,
        }


@dataclass(frozen=True)
class BalanceTarget:
    target_means: np.ndarray
    provenance: str = "full-sample"
    unit_weights: Optional[np.ndarray] = None
    points: Optional[np.ndarray] = None
    details: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.provenance not in PROVENANCES:
            raise InputError(f"unknown target provenance {self.provenance!r}")
        b = np.array(self.target_means, dtype=float, copy=True)
        if b.ndim != 1 or not np.all(np.isfinite(b)):
            raise InputError("target means must be a finite vector")
        b.setflags(write=False)
        object.__setattr__(self, "target_means", b)
        if self.unit_weights is not None:
            object.__setattr__(self, "unit_weights", np.asarray(self.unit_weights, dtype=float))
        if self.points is not None:
            object.__setattr__(self, "points", np.atleast_2d(np.asarray(self.points, dtype=float)))

    @property
    def p(self) -> int:
        return self.target_means.size

    def check(self, p: int):
        if self.p != p:
            raise InputError(f"target has {self.p} means but the feature matrix has {p} columns")
        return self

    def with_means(self, target_means) -> "BalanceTarget":
        return replace(self, target_means=target_means)

    def to_dict(self) -> dict:
        return {"target_means": self.target_means, "provenance": self.provenance, "details": self.details}


def design(fm) -> np.ndarray:
    return fm.values if isinstance(fm, FeatureMatrix) else np.atleast_2d(np.asarray(fm, dtype=float))


def full_sample_target(fm, unit_weights=None) -> BalanceTarget:
    Phi = design(fm)
    if unit_weights is None:
        return BalanceTarget(Phi.mean(axis=0), "full-sample", unit_weights=np.ones(Phi.shape[0]))
    return BalanceTarget(Phi.T @ unit_weights / Phi.shape[0], "custom", unit_weights=unit_weights)


def uniform_weights(treatment, group: str = "treated") -> WeightVector:
    arm = arm_indicator(treatment, group)
    if arm.sum() == 0:
        raise InputError(f"the {group} arm has no units")
    return WeightVector.on_arm(arm * arm.size / arm.sum(), treatment, group, sum_to_one=True, nonnegative=True)


def feature_imbalance(fm, w, g: WeightVector, t: BalanceTarget) -> np.ndarray:
    Phi = design(fm)
    n, p = Phi.shape
    t.check(p)
    gw = g.weighted(w)
    if gw.size != n:
        raise InputError(f"{gw.size} weights given for {n} feature rows")
    return t.target_means - Phi.T @ gw / n


def _finite_positive(d, scales):
    d = np.asarray(d, dtype=float)
    scales = np.asarray(scales, dtype=float)
    if d.shape != scales.shape:
        raise InputError(f"{d.size} imbalances given for {scales.size} scales")
    if not np.all(np.isfinite(d)):
        raise InputError("imbalance vector has non-finite entries")
    mask = np.isfinite(scales) & (scales > 0)
    return d[mask], scales[mask]


def max_imbalance_l1ball(d, scales) -> float:
    d, scales = _finite_positive(d, scales)
    if d.size == 0:
        return 0.0
    return float(np.max(scales * np.abs(d)))


def imbalance_l2ball(d, scales) -> float:
    d, scales = _finite_positive(d, scales)
    return float(np.sqrt(np.sum((scales * d) ** 2)))


def constraint_residuals(d, scales) -> np.ndarray:
    d = np.asarray(d, dtype=float)
    return d[np.isinf(np.asarray(scales, dtype=float))]


def check_symmetric(K: np.ndarray) -> np.ndarray:
    K = np.asarray(K, dtype=float)
    if K.ndim != 2 or K.shape[0] != K.shape[1]:
        raise InputError(f"kernel matrix must be square, got shape {K.shape}")
    if not np.all(np.isfinite(K)):
        raise InputError("kernel matrix has non-finite entries")
    asym = np.max(np.abs(K - K.T)) if K.size else 0.0
    if asym > PSD_TOLERANCE * max(1.0, np.max(np.abs(K))):
        raise InputError(f"kernel matrix is not symmetric (max asymmetry {asym:.3g})")
    return K


def kernel_imbalance_squared(K, w, g: WeightVector, target_weights=None) -> float:
    K = check_symmetric(K)
    n = K.shape[0]
    gw = g.weighted(w)
    v = (np.ones(n) if target_weights is None else np.asarray(target_weights, dtype=float)) - gw
    value = float(v @ K @ v) / n ** 2
    if value < -PSD_TOLERANCE:
        raise InputError(f"kernel imbalance squared is {value:.3g}; the kernel matrix is not PSD")
    return max(value, 0.0)


def kernel_imbalance(K, w, g: WeightVector, target_weights=None) -> float:
    return float(np.sqrt(kernel_imbalance_squared(K, w, g, target_weights)))


def _ecdf_gap(x, arm_weights, ref_weights) -> float:
    support, index = np.unique(x, return_inverse=True)
    F_arm = np.cumsum(np.bincount(index, weights=arm_weights, minlength=support.size)) / arm_weights.sum()
    F_ref = np.cumsum(np.bincount(index, weights=ref_weights, minlength=support.size)) / ref_weights.sum()
    return float(np.max(np.abs(F_arm - F_ref)))


def ks_statistics(table: ObservationTable, g: WeightVector, target_weights=None) -> np.ndarray:
    gw = g.weighted(table.treatment)
    if np.any(gw < 0):
        raise InputError("KS statistics need nonnegative weights")
    if gw.sum() <= 0:
        raise InputError("KS statistics need a positive total weight")
    ref = np.ones(table.n) if target_weights is None else np.asarray(target_weights, dtype=float)
    if np.any(ref < 0) or ref.sum() <= 0:
        raise InputError("reference weights for KS must be nonnegative with positive total")
    return np.array([_ecdf_gap(table.covariates[:, j], gw, ref) for j in range(table.d)])


def effective_sample_size(g: WeightVector) -> float:
    values = g.values
    denominator = float(np.sum(values ** 2))
    if denominator == 0:
        raise InputError("effective sample size is undefined for all-zero weights")
    return float(values.sum() ** 2 / denominator)


def reported_ess(g: WeightVector) -> Optional[float]:
    if not np.any(g.values):
        LOGGER.warning(f"All {g.group} weights are zero; effective sample size and KS are not reported")
        return None
    return effective_sample_size(g)


@dataclass(frozen=True)
class ImbalanceReport:
    labels: tuple
    per_feature: np.ndarray
    sd_units: np.ndarray
    original_units: np.ndarray
    scales: np.ndarray
    max_l1ball: float
    l2ball: float
    constraint_residuals: dict
    ks_per_covariate: Optional[dict]
    effective_sample_size: Optional[float]
    n_weighted: int
    kernel: Optional[float] = None
    group: str = "treated"
    provenance: str = "full-sample"

    @property
    def scaled(self) -> np.ndarray:
        finite = np.isfinite(self.scales)
        return np.where(finite, np.where(finite, self.scales, 0.0) * np.abs(self.per_feature), np.nan)

    def to_dict(self) -> dict:
        return {
            "group": self.group,
            "provenance": self.provenance,
            "units": ["raw", "SD", "original"],
            "features": [
                {
                    "label": label,
                    "imbalance": self.per_feature[j],
                    "sd_units": self.sd_units[j],
                    "original_units": self.original_units[j],
                    "scale": self.scales[j],
                    "scaled": self.scaled[j],
                }
                for j, label in enumerate(self.labels)
            ],
            "max_l1ball": self.max_l1ball,
            "l2ball": self.l2ball,
            "kernel": self.kernel,
            "constraint_residuals": self.constraint_residuals,
            "ks_per_covariate": self.ks_per_covariate,
            "effective_sample_size": self.effective_sample_size,
            "n_weighted": self.n_weighted,
        }

    def to_text(self) -> str:
        rows = [
            (label, self.per_feature[j], self.sd_units[j], self.scales[j], self.scaled[j])
            for j, label in enumerate(self.labels)
        ]
        lines = [
            format_table(("feature", "imbalance", "sd_units", "lambda", "scaled"), rows),
            "",
            f"max imbalance (l1 ball): {self.max_l1ball:.6g}",
            f"imbalance (l2 ball):     {self.l2ball:.6g}",
        ]
        if self.kernel is not None:
            lines.append(f"kernel imbalance:        {self.kernel:.6g}")
        if self.constraint_residuals:
            worst = max(abs(v) for v in self.constraint_residuals.values())
            lines.append(f"constraint residual:     {worst:.3g}")
        ess = "undefined" if self.effective_sample_size is None else f"{self.effective_sample_size:.6g}"
        lines.append(f"effective sample size:   {ess} of {self.n_weighted}")
        if self.ks_per_covariate:
            lines.append("")
            lines.append(format_table(("covariate", "ks"), list(self.ks_per_covariate.items())))
        return "\n".join(lines)


def imbalance_report(
    table: ObservationTable,
    fm: FeatureMatrix,
    g: WeightVector,
    target: BalanceTarget,
    gram=None,
    target_weights=None,
) -> ImbalanceReport:
    d = feature_imbalance(fm, table.treatment, g, target)
    sd = fm.column_sd()
    original = d * fm.spread if fm.standardized else d
    exact = np.isinf(fm.scales)
    residuals = {fm.labels[j]: float(d[j]) for j in np.flatnonzero(exact)}
    if target_weights is None:
        target_weights = target.unit_weights
    ess = reported_ess(g)
    ks = None
    # KS only against targets that are a measure over sample units
    if ess is not None and target_weights is not None and np.all(g.weighted(table.treatment) >= 0):
        values = ks_statistics(table, g, target_weights)
        ks = {name: float(values[j]) for j, name in enumerate(table.column_names)}
    kernel = None
    if gram is not None and target.points is None:
        kernel = kernel_imbalance(gram, table.treatment, g, target_weights)
    return ImbalanceReport(
        labels=fm.labels,
        per_feature=d,
        sd_units=d / sd,
        original_units=original,
        scales=fm.scales,
        max_l1ball=max_imbalance_l1ball(d, fm.scales),
        l2ball=imbalance_l2ball(d, fm.scales),
        constraint_residuals=residuals,
        ks_per_covariate=ks,
        effective_sample_size=ess,
        n_weighted=int(g.arm(table.treatment).sum()),
        kernel=kernel,
        group=g.group,
        provenance=target.provenance,
    )
