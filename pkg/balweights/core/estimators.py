import math
from dataclasses import dataclass, field
from typing import Callable, Mapping, Optional

import numpy as np
from scipy.special import ndtri
from sklearn.linear_model import LinearRegression, Ridge
from sklearn.model_selection import KFold, StratifiedKFold

from balweights.core.dataset import FeatureMatrix, ObservationTable
from balweights.core.errors import InputError, SingularSystemError
from balweights.core.imbalance import BalanceTarget, WeightVector, reported_ess
from balweights.helpers.logger import LOGGER
from balweights.helpers.utils import run_parallel
from config import DEFAULT_CATE_DRAWS, DEFAULT_FOLDS, DEFAULT_RIDGE_PENALTY, DEFAULT_SEED, VARIANCE_FLOOR

ESTIMAND_KINDS = ("treated-mean", "control-mean", "ate", "att", "target-population-mean", "cate-at-point")


@dataclass(frozen=True)
class EstimandSpec:
    kind: str = "ate"
    x0: Optional[tuple] = None
    bandwidth: Optional[float] = None
    draws: int = DEFAULT_CATE_DRAWS
    seed: int = DEFAULT_SEED
    target_covariates: Optional[np.ndarray] = None
    target_columns: tuple = ()
    target_path: Optional[str] = None
    arm: Optional[str] = None

    def __post_init__(self):
        if self.kind not in ESTIMAND_KINDS:
            raise InputError(f"unknown estimand {self.kind!r}, expected one of {ESTIMAND_KINDS}")
        if self.kind == "cate-at-point":
            if self.x0 is None:
                raise InputError("cate-at-point needs a point x0")
            if self.bandwidth is None or not self.bandwidth > 0:
                raise InputError(f"cate-at-point needs a positive bandwidth, got {self.bandwidth}")
            if self.draws < 1000:
                raise InputError(f"cate-at-point needs at least 1000 draws, got {self.draws}")
            object.__setattr__(self, "x0", tuple(float(v) for v in self.x0))
        if self.kind == "target-population-mean" and self.target_covariates is None:
            raise InputError("target-population-mean needs an external target table")
        if self.arm not in (None, "treated", "control"):
            raise InputError(f"unknown arm {self.arm!r}")

    @classmethod
    def from_dict(cls, payload: Mapping, target_covariates=None, target_columns=()) -> "EstimandSpec":
        x0 = payload.get("x0")
        bandwidth = payload.get("bandwidth")
        return cls(
            kind=payload.get("kind", "ate"),
            x0=tuple(x0) if x0 is not None else None,
            bandwidth=None if bandwidth is None else float(bandwidth),
            draws=int(payload.get("draws", DEFAULT_CATE_DRAWS)),
            seed=int(payload.get("seed", DEFAULT_SEED)),
            target_covariates=target_covariates,
            target_columns=tuple(target_columns),
            target_path=payload.get("target"),
            arm=payload.get("arm"),
        )

    @property
    def groups(self) -> tuple:
        if self.kind == "treated-mean":
            return ("treated",)
        if self.kind == "control-mean":
            return ("control",)
        if self.arm is not None:
            return (self.arm,)
        return ("treated", "control")

    def to_dict(self) -> dict:
        payload = {"kind": self.kind}
        if self.kind == "cate-at-point":
            payload.update(x0=list(self.x0), bandwidth=self.bandwidth, draws=self.draws, seed=self.seed)
        if self.kind == "target-population-mean":
            payload.update(target=self.target_path, target_rows=int(np.atleast_2d(self.target_covariates).shape[0]))
        if self.arm is not None:
            payload["arm"] = self.arm
        return payload


def build_balance_target(spec: EstimandSpec, table: ObservationTable, fm: FeatureMatrix) -> BalanceTarget:
    if spec.kind in ("treated-mean", "control-mean", "ate"):
        return BalanceTarget(fm.values.mean(axis=0), "full-sample", unit_weights=np.ones(table.n))
    if spec.kind == "att":
        table.require_arms("treated")
        unit_weights = table.treatment * table.n / table.n_treated
        return BalanceTarget(fm.values.T @ unit_weights / table.n, "treated-sample", unit_weights=unit_weights)
    if spec.kind == "target-population-mean":
        points = np.atleast_2d(np.asarray(spec.target_covariates, dtype=float))
        if spec.target_columns:
            missing = [c for c in table.column_names if c not in spec.target_columns]
            if missing:
                raise InputError(f"external target is missing covariates {missing}")
            order = [list(spec.target_columns).index(c) for c in table.column_names]
            points = points[:, order]
        if points.shape[1] != table.d:
            raise InputError(f"external target has {points.shape[1]} covariates, expected {table.d}")
        return BalanceTarget(
            fm.transform(points).mean(axis=0), "external-sample", points=points,
            details={"rows": points.shape[0], "source": spec.target_path},
        )
    x0 = np.asarray(spec.x0, dtype=float)
    if x0.size != table.d:
        raise InputError(f"x0 has {x0.size} coordinates, expected {table.d}")
    rng = np.random.default_rng(spec.seed)
    points = x0 + spec.bandwidth * rng.standard_normal((spec.draws, table.d))
    return BalanceTarget(
        fm.transform(points).mean(axis=0), "gaussian-point", points=points,
        details={"x0": list(spec.x0), "bandwidth": spec.bandwidth, "draws": spec.draws, "seed": spec.seed},
    )


@dataclass(frozen=True)
class OutcomeModel:
    folds: np.ndarray
    coefficients: np.ndarray
    intercepts: np.ndarray
    predictions: np.ndarray
    penalty: float
    arm: str
    feature_columns: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))

    @property
    def n_folds(self) -> int:
        return self.coefficients.shape[0]

    def predict(self, values) -> np.ndarray:
        X = np.atleast_2d(np.asarray(values, dtype=float))[:, self.feature_columns]
        return X @ self.coefficients.mean(axis=0) + self.intercepts.mean()

    def to_dict(self) -> dict:
        return {
            "arm": self.arm,
            "folds": self.n_folds,
            "penalty": self.penalty,
            "coefficients": self.coefficients,
            "intercepts": self.intercepts,
        }


def zero_model(n: int, arm: str = "treated") -> OutcomeModel:
    return OutcomeModel(
        folds=np.zeros(n, dtype=int),
        coefficients=np.zeros((1, 0)),
        intercepts=np.zeros(1),
        predictions=np.zeros(n),
        penalty=math.inf,
        arm=arm,
    )


def assign_folds(treatment, folds: int, seed: int) -> np.ndarray:
    n = len(treatment)
    labels = np.asarray(treatment, dtype=int)
    counts = np.bincount(labels, minlength=2)
    if counts.min() >= folds:
        splitter = StratifiedKFold(n_splits=folds, shuffle=True, random_state=seed)
    else:
        splitter = KFold(n_splits=folds, shuffle=True, random_state=seed)
    assignment = np.empty(n, dtype=int)
    for k, (_, test) in enumerate(splitter.split(np.zeros(n), labels)):
        assignment[test] = k
    return assignment


def fit_crossfit_ridge(
    table: ObservationTable,
    fm: FeatureMatrix,
    folds: int = DEFAULT_FOLDS,
    penalty: float = DEFAULT_RIDGE_PENALTY,
    arm: str = "treated",
    seed: int = DEFAULT_SEED,
    threads: int = 1,
) -> OutcomeModel:
    Y = table.require_outcome()
    if folds < 2:
        raise InputError(f"cross-fitting needs at least 2 folds, got {folds}")
    if not penalty >= 0:
        raise InputError(f"ridge penalty must be nonnegative, got {penalty}")
    in_arm = table.arm_mask(arm) == 1.0
    if in_arm.sum() < folds:
        raise InputError(f"the {arm} arm has {int(in_arm.sum())} units, fewer than {folds} folds")
    columns = np.array([j for j in range(fm.p) if j != fm.intercept], dtype=int)
    X = fm.values[:, columns]
    assignment = assign_folds(table.treatment, folds, seed)

    def fit_fold(k):
        train = in_arm & (assignment != k)
        if train.sum() < 1:
            raise InputError(f"fold {k} leaves no {arm} units to train on")
        X_train, Y_train = X[train], Y[train]
        if penalty == 0:
            centered = X_train - X_train.mean(axis=0)
            if columns.size and np.linalg.matrix_rank(centered) < columns.size:
                raise SingularSystemError(
                    f"unpenalized outcome fit is collinear on fold {k} of the {arm} arm; use a positive ridge penalty",
                    columns=[fm.labels[j] for j in columns],
                )
            model = LinearRegression(fit_intercept=True)
        else:
            model = Ridge(alpha=penalty, fit_intercept=True, solver="cholesky")
        if columns.size == 0:
            return np.zeros(0), float(Y_train.mean())
        model.fit(X_train, Y_train)
        return np.asarray(model.coef_, dtype=float), float(model.intercept_)

    fitted = run_parallel(fit_fold, range(folds), threads)
    coefficients = np.vstack([c for c, _ in fitted]) if columns.size else np.zeros((folds, 0))
    intercepts = np.array([b for _, b in fitted])
    predictions = np.einsum("ij,ij->i", X, coefficients[assignment]) + intercepts[assignment]
    LOGGER.info(f"Cross-fit ridge on the {arm} arm: {folds} folds, penalty {penalty:g}")
    return OutcomeModel(
        folds=assignment,
        coefficients=coefficients,
        intercepts=intercepts,
        predictions=predictions,
        penalty=penalty,
        arm=arm,
        feature_columns=columns,
    )


def ipw_estimate(table: ObservationTable, g: WeightVector) -> float:
    Y = table.require_outcome()
    return math.fsum(g.weighted(table.treatment) * Y) / table.n


def hajek_normalize(g: WeightVector, w) -> WeightVector:
    total = math.fsum(g.weighted(w)) / g.n
    if not total > 0:
        raise InputError("weights have zero total on their arm and cannot be normalized")
    return WeightVector(values=g.values / total, group=g.group, sum_to_one=True, nonnegative=g.nonnegative)


def imputed_target_mean(m: OutcomeModel, target: Optional[BalanceTarget] = None, fm: Optional[FeatureMatrix] = None) -> float:
    if target is None or target.points is None:
        tau = np.ones(m.predictions.size) if target is None or target.unit_weights is None else target.unit_weights
        return math.fsum(tau * m.predictions) / m.predictions.size
    if fm is None:
        raise InputError("an external target needs the feature matrix to evaluate the outcome model")
    return float(np.mean(m.predict(fm.transform(target.points))))


def aipw_estimate(
    table: ObservationTable,
    g: WeightVector,
    m: OutcomeModel,
    target: Optional[BalanceTarget] = None,
    fm: Optional[FeatureMatrix] = None,
) -> float:
    correction = imputed_target_mean(m, target, fm) - math.fsum(g.weighted(table.treatment) * m.predictions) / table.n
    return ipw_estimate(table, g) + correction


@dataclass(frozen=True)
class EffectEstimate:
    estimand: dict
    point: float
    variance: float
    ci: Optional[tuple]
    level: float
    gamma_rms: float
    ess: Optional[float]
    status: str = "ok"
    imbalance_before: dict = field(default_factory=dict)
    imbalance_after: dict = field(default_factory=dict)
    components: dict = field(default_factory=dict)
    decomposition: Optional[dict] = None

    @property
    def degenerate(self) -> bool:
        return self.status == "degenerate-interval"

    def covers(self, value: float) -> Optional[bool]:
        if self.ci is None:
            return None
        return bool(self.ci[0] <= value <= self.ci[1])

    def to_dict(self) -> dict:
        return {
            "estimand": self.estimand,
            "point": self.point,
            "variance": self.variance,
            "ci": list(self.ci) if self.ci is not None else None,
            "level": self.level,
            "gamma_rms": self.gamma_rms,
            "ess": self.ess,
            "status": self.status,
            "imbalance_before": self.imbalance_before,
            "imbalance_after": self.imbalance_after,
            "components": self.components,
            "decomposition": self.decomposition,
        }


def normal_quantile(level: float) -> float:
    if not 0.0 < level < 1.0:
        raise InputError(f"level must lie in (0, 1), got {level}")
    return float(ndtri(1.0 - (1.0 - level) / 2.0))


def interval(point: float, variance: float, level: float, scale: float = 1.0):
    z = normal_quantile(level)
    if math.sqrt(max(variance, 0.0)) <= VARIANCE_FLOOR * max(1.0, scale):
        return None, "degenerate-interval"
    half = z * math.sqrt(variance)
    return (point - half, point + half), "ok"


def wald_ci(
    table: ObservationTable,
    g: WeightVector,
    m: Optional[OutcomeModel],
    level: float,
    point: Optional[float] = None,
    estimand: Optional[dict] = None,
) -> EffectEstimate:
    Y = table.require_outcome()
    gw = g.weighted(table.treatment)
    residuals = Y - (m.predictions if m is not None else 0.0)
    variance = math.fsum(gw ** 2 * residuals ** 2) / table.n ** 2
    if point is None:
        point = ipw_estimate(table, g) if m is None else aipw_estimate(table, g, m)
    ci, status = interval(point, variance, level, scale=float(np.max(np.abs(Y))))
    if status != "ok":
        LOGGER.warning(f"Variance estimate {variance:.3g} is degenerate; interval undefined")
    return EffectEstimate(
        estimand=estimand or {"kind": f"{g.group}-mean"},
        point=point,
        variance=variance,
        ci=ci,
        level=level,
        gamma_rms=math.sqrt(math.fsum(gw ** 2) / table.n),
        ess=reported_ess(g),
        status=status,
    )


def combine_contrast(treated: EffectEstimate, control: EffectEstimate, estimand: dict, scale: float = 1.0) -> EffectEstimate:
    point = treated.point - control.point
    variance = treated.variance + control.variance
    ci, status = interval(point, variance, treated.level, scale)
    return EffectEstimate(
        estimand=estimand,
        point=point,
        variance=variance,
        ci=ci,
        level=treated.level,
        gamma_rms=math.sqrt(treated.gamma_rms ** 2 + control.gamma_rms ** 2),
        ess=None if treated.ess is None or control.ess is None else min(treated.ess, control.ess),
        status=status,
        imbalance_before={**treated.imbalance_before, **control.imbalance_before},
        imbalance_after={**treated.imbalance_after, **control.imbalance_after},
        components={"treated": treated.to_dict(), "control": control.to_dict()},
    )


@dataclass(frozen=True)
class ErrorDecomposition:
    imbalance: float
    noise: float
    sampling: float
    total: float
    estimate: float
    truth: float

    def to_dict(self) -> dict:
        return {
            "imbalance": self.imbalance,
            "noise": self.noise,
            "sampling": self.sampling,
            "total": self.total,
            "estimate": self.estimate,
            "truth": self.truth,
        }


def error_decomposition(
    table: ObservationTable,
    g: WeightVector,
    m: Optional[OutcomeModel],
    oracle_m1: Callable,
    population_mean: Optional[float] = None,
    target: Optional[BalanceTarget] = None,
) -> ErrorDecomposition:
    """Split the estimation error into regression imbalance, noise and sampling terms."""
    if target is not None and target.points is not None:
        raise InputError("error decomposition needs an in-sample target")
    Y = table.require_outcome()
    n = table.n
    tau = np.ones(n) if target is None or target.unit_weights is None else target.unit_weights
    gw = g.weighted(table.treatment)
    truth_values = np.asarray(oracle_m1(table.covariates), dtype=float)
    predictions = m.predictions if m is not None else np.zeros(n)
    delta = predictions - truth_values
    noise = np.where(gw != 0, Y - truth_values, 0.0)
    sample_analog = math.fsum(tau * truth_values) / n
    truth = sample_analog if population_mean is None else float(population_mean)
    imbalance = (math.fsum(tau * delta) - math.fsum(gw * delta)) / n
    noise_term = math.fsum(gw * noise) / n
    sampling = sample_analog - truth
    estimate = math.fsum(gw * Y) / n + (math.fsum(tau * predictions) - math.fsum(gw * predictions)) / n
    return ErrorDecomposition(
        imbalance=imbalance,
        noise=noise_term,
        sampling=sampling,
        total=estimate - truth,
        estimate=estimate,
        truth=truth,
    )
