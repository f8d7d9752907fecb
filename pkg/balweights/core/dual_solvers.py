import math
from dataclasses import dataclass, field
from typing import Mapping, Optional

import numpy as np
import scipy.linalg
from scipy import optimize, special

from balweights.core.dataset import FeatureMatrix, arm_indicator
from balweights.core.errors import InputError, SingularSystemError
from balweights.core.imbalance import BalanceTarget, WeightVector, design, feature_imbalance
from balweights.helpers.logger import LOGGER
from config import EXP_GUARD, MIN_NORM_RIDGE, SOLVER_MAX_ITER, SOLVER_TOLERANCE, THETA_GUARD

DISPERSIONS = ("quadratic", "quadratic-nonneg", "entropy")
PENALTIES = ("l1-scaled", "l2-scaled")
STATUSES = ("converged", "max-iter", "infeasible", "overflow")


@dataclass(frozen=True)
class DispersionSpec:
    kind: str = "quadratic"

    def __post_init__(self):
        if self.kind not in DISPERSIONS:
            raise InputError(f"unknown dispersion {self.kind!r}, expected one of {DISPERSIONS}")

    @property
    def nonnegative(self) -> bool:
        return self.kind != "quadratic"

    def link(self, g):
        g = np.asarray(g, dtype=float)
        if self.kind == "quadratic":
            return g.copy()
        if self.kind == "entropy":
            return np.exp(g)
        return np.maximum(g, 0.0)

    def conjugate(self, g):
        g = np.asarray(g, dtype=float)
        if self.kind == "quadratic":
            return g ** 2 / 2
        if self.kind == "entropy":
            return np.exp(g)
        return np.maximum(g, 0.0) ** 2 / 2

    def dispersion(self, gamma):
        gamma = np.asarray(gamma, dtype=float)
        if self.kind == "quadratic":
            return gamma ** 2 / 2
        outside = gamma < 0
        if self.kind == "entropy":
            value = special.xlogy(gamma, np.where(outside, 1.0, gamma)) - gamma
        else:
            value = gamma ** 2 / 2
        return np.where(outside, np.inf, value)

    def divergence(self, x, y):
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        if self.kind == "quadratic":
            return (x - y) ** 2 / 2
        if self.kind == "entropy":
            if np.any(x < 0) or np.any(y <= 0):
                raise InputError("entropy divergence needs x >= 0 and y > 0")
            return special.xlogy(x, x / y) - x + y
        raise InputError("the Bregman divergence of the positive-part quadratic is not defined")


def link_eval(chi: DispersionSpec, g):
    value = chi.link(g)
    return float(value) if np.ndim(value) == 0 else value


def bregman(chi: DispersionSpec, x, y):
    value = chi.divergence(x, y)
    return float(value) if np.ndim(value) == 0 else value


@dataclass(frozen=True)
class PenaltySpec:
    kind: str = "l1-scaled"
    sigma2: float = 0.0

    def __post_init__(self):
        if self.kind not in PENALTIES:
            raise InputError(f"unknown penalty {self.kind!r}, expected one of {PENALTIES}")
        if not self.sigma2 >= 0 or math.isinf(self.sigma2):
            raise InputError(f"sigma2 must be finite and nonnegative, got {self.sigma2}")

    def to_dict(self) -> dict:
        return {"kind": self.kind, "sigma2": self.sigma2}


@dataclass(frozen=True)
class SolverOptions:
    tolerance: float = SOLVER_TOLERANCE
    max_iter: int = SOLVER_MAX_ITER
    theta_guard: float = THETA_GUARD
    exp_guard: float = EXP_GUARD
    min_norm: bool = False
    feasibility_check: bool = True

    def __post_init__(self):
        if self.tolerance < 0:
            raise InputError(f"tolerance must be nonnegative, got {self.tolerance}")
        if self.max_iter < 1:
            raise InputError(f"max_iter must be at least 1, got {self.max_iter}")

    @classmethod
    def from_dict(cls, payload: Optional[Mapping]) -> "SolverOptions":
        payload = dict(payload or {})
        return cls(
            tolerance=float(payload.get("tolerance", SOLVER_TOLERANCE)),
            max_iter=int(payload.get("max_iter", SOLVER_MAX_ITER)),
            theta_guard=float(payload.get("theta_guard", THETA_GUARD)),
            exp_guard=float(payload.get("exp_guard", EXP_GUARD)),
            min_norm=bool(payload.get("min_norm", False)),
            feasibility_check=bool(payload.get("feasibility_check", True)),
        )

    def to_dict(self) -> dict:
        return {
            "tolerance": self.tolerance,
            "max_iter": self.max_iter,
            "theta_guard": self.theta_guard,
            "exp_guard": self.exp_guard,
            "min_norm": self.min_norm,
            "feasibility_check": self.feasibility_check,
        }


@dataclass(frozen=True)
class DualSolution:
    theta: np.ndarray
    weights: WeightVector
    objective_trace: np.ndarray
    grad_norm: float
    iterations: int
    converged: bool
    status: str = "converged"
    message: str = ""
    details: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "theta": self.theta,
            "weights": self.weights.values,
            "group": self.weights.group,
            "objective_trace": self.objective_trace,
            "final_objective": self.objective_trace[-1] if len(self.objective_trace) else None,
            "grad_norm": self.grad_norm,
            "iterations": self.iterations,
            "converged": self.converged,
            "status": self.status,
            "message": self.message,
            "details": self.details,
        }


class _Dual:

    def __init__(self, fm, w, t: BalanceTarget, chi: DispersionSpec, pen: PenaltySpec, group: str, exp_guard: float):
        Phi = design(fm)
        self.n, self.p = Phi.shape
        t.check(self.p)
        scales = fm.scales if isinstance(fm, FeatureMatrix) else np.ones(self.p)
        self.arm = arm_indicator(w, group)
        if self.arm.shape != (self.n,):
            raise InputError(f"{self.arm.size} treatment entries given for {self.n} feature rows")
        if self.arm.sum() < 1:
            raise InputError(f"the {group} arm has no units")
        self.Phi_arm = Phi[self.arm == 1.0]
        self.b = t.target_means
        self.chi = chi
        self.pen = pen
        self.exp_guard = exp_guard
        self.exact = np.isinf(scales)
        self.free = scales == 0
        self.bounded = ~self.exact & ~self.free
        self.lam = np.where(self.bounded, scales, 1.0)

    def index(self, theta):
        return self.Phi_arm @ theta

    def smooth(self, theta):
        z = self.index(theta)
        if self.chi.kind == "entropy" and z.size and z.max() > self.exp_guard:
            return math.inf
        return float(np.sum(self.chi.conjugate(z))) / self.n - float(theta @ self.b)

    def gradient(self, theta):
        return self.Phi_arm.T @ self.chi.link(self.index(theta)) / self.n - self.b

    def penalty(self, theta):
        if np.any(theta[self.free] != 0):
            return math.inf
        t = theta[self.bounded] / self.lam[self.bounded]
        if self.pen.kind == "l1-scaled":
            return float(np.sum(np.abs(t)))
        return self.pen.sigma2 / (2 * self.n) * float(np.sum(t ** 2))

    def prox(self, v, step):
        out = v.copy()
        out[self.free] = 0.0
        lam = self.lam[self.bounded]
        vb = v[self.bounded]
        if self.pen.kind == "l1-scaled":
            out[self.bounded] = np.sign(vb) * np.maximum(np.abs(vb) - step / lam, 0.0)
        else:
            out[self.bounded] = vb / (1.0 + step * self.pen.sigma2 / (self.n * lam ** 2))
        return out

    def objective(self, theta):
        return self.smooth(theta) + self.penalty(theta)

    def lipschitz_guess(self):
        return max(float(np.sum(self.Phi_arm ** 2)) / self.n, 1e-12)


def _weights(chi: DispersionSpec, Phi, w, theta, group) -> WeightVector:
    arm = arm_indicator(w, group)
    index = np.asarray(Phi, dtype=float) @ theta
    values = np.zeros_like(index)
    values[arm == 1.0] = chi.link(index[arm == 1.0])
    return WeightVector.on_arm(values, w, group, nonnegative=True if chi.nonnegative else None)


def weights_from_theta(fm, w, theta, chi: DispersionSpec, group: str = "treated") -> WeightVector:
    return _weights(chi, design(fm), w, np.asarray(theta, dtype=float), group)


def dual_objective(fm, w, t: BalanceTarget, chi: DispersionSpec, pen: PenaltySpec, theta, group="treated") -> float:
    problem = _Dual(fm, w, t, chi, pen, group, math.inf)
    return problem.objective(np.asarray(theta, dtype=float))


def exact_constraints_feasible(fm, w, t: BalanceTarget, chi: DispersionSpec, pen: PenaltySpec, group="treated"):
    problem = _Dual(fm, w, t, chi, pen, group, math.inf)
    rows = problem.exact.copy()
    capped = problem.bounded if pen.kind == "l1-scaled" else np.zeros_like(rows)
    if not rows.any() and not capped.any():
        return True
    A = problem.Phi_arm.T / problem.n
    A_ub = b_ub = None
    if capped.any():
        radius = 1.0 / problem.lam[capped]
        A_ub = np.vstack([A[capped], -A[capped]])
        b_ub = np.concatenate([problem.b[capped] + radius, radius - problem.b[capped]])
    result = optimize.linprog(
        np.zeros(A.shape[1]),
        A_ub=A_ub,
        b_ub=b_ub,
        A_eq=A[rows] if rows.any() else None,
        b_eq=problem.b[rows] if rows.any() else None,
        bounds=(0, None) if chi.nonnegative else (None, None),
        method="highs",
    )
    if result.status == 2:
        return False
    if result.status != 0:
        LOGGER.warning(f"Feasibility check inconclusive: {result.message}")
    return True


def solve_dual(
    fm,
    w,
    t: BalanceTarget,
    chi: DispersionSpec,
    pen: PenaltySpec,
    opts: Optional[SolverOptions] = None,
    group: str = "treated",
) -> DualSolution:
    opts = opts or SolverOptions()
    problem = _Dual(fm, w, t, chi, pen, group, opts.exp_guard)
    Phi = design(fm)
    theta = np.zeros(problem.p)

    def finish(status, message, trace, grad_norm, iterations):
        converged = status == "converged"
        log = LOGGER.info if converged else LOGGER.warning
        log(f"Dual {chi.kind}/{pen.kind} solve on {group} arm: {status} after {iterations} iterations "
            f"(gradient mapping {grad_norm:.3g})")
        return DualSolution(
            theta=theta,
            weights=_weights(chi, Phi, w, theta, group),
            objective_trace=np.asarray(trace, dtype=float),
            grad_norm=float(grad_norm),
            iterations=iterations,
            converged=converged,
            status=status,
            message=message,
            details={"dispersion": chi.kind, "penalty": pen.to_dict(), "options": opts.to_dict()},
        )

    if opts.feasibility_check and not exact_constraints_feasible(fm, w, t, chi, pen, group):
        return finish("infeasible", "balance constraints cannot be met on this arm", [problem.objective(theta)], math.inf, 0)

    f = problem.smooth(theta)
    grad = problem.gradient(theta)
    trace = [f + problem.penalty(theta)]
    L = problem.lipschitz_guess()
    grad_norm = math.inf
    for iteration in range(1, opts.max_iter + 1):
        while True:
            candidate = problem.prox(theta - grad / L, 1.0 / L)
            step = candidate - theta
            fc = problem.smooth(candidate)
            if math.isfinite(fc) and fc <= f + float(grad @ step) + L / 2 * float(step @ step) + 1e-15 * abs(f):
                break
            L *= 2.0
            if L > 1e300:
                return finish("overflow", "step size underflow while backtracking; index exceeds the exp guard",
                              trace, grad_norm, iteration)
        grad_norm = L * float(np.linalg.norm(step))
        value = fc + problem.penalty(candidate)
        if value <= trace[-1]:
            theta, f = candidate, fc
            grad = problem.gradient(theta)
            trace.append(value)
        if grad_norm <= opts.tolerance:
            return finish("converged", "", trace, grad_norm, iteration)
        if np.max(np.abs(theta)) > opts.theta_guard:
            return finish("infeasible", f"dual coefficients exceeded {opts.theta_guard:g}; constraints look unreachable",
                          trace, grad_norm, iteration)
        L = max(L / 1.25, 1e-12)
    return finish("max-iter", f"no convergence within {opts.max_iter} iterations", trace, grad_norm, opts.max_iter)


def _collinear_columns(M, labels):
    _, R, pivots = scipy.linalg.qr(M, pivoting=True)
    diag = np.abs(np.diag(R))
    cutoff = diag.max() * max(M.shape) * np.finfo(float).eps if diag.size else 0.0
    return [labels[j] for j, r in zip(pivots, diag) if r <= cutoff]


def solve_minimax_l2(
    fm,
    w,
    t: BalanceTarget,
    sigma2: float,
    group: str = "treated",
    min_norm: bool = False,
) -> DualSolution:
    if not sigma2 >= 0 or math.isinf(sigma2):
        raise InputError(f"sigma2 must be finite and nonnegative, got {sigma2}")
    chi = DispersionSpec("quadratic")
    pen = PenaltySpec("l2-scaled", sigma2)
    problem = _Dual(fm, w, t, chi, pen, group, math.inf)
    labels = fm.labels if isinstance(fm, FeatureMatrix) else tuple(f"column {j}" for j in range(problem.p))
    keep = ~problem.free
    Phi_k = problem.Phi_arm[:, keep]
    ridge = np.where(problem.bounded[keep], sigma2 / problem.lam[keep] ** 2, 0.0)
    M = Phi_k.T @ Phi_k + np.diag(ridge)
    rhs = problem.n * problem.b[keep]
    k = M.shape[0]
    if k and np.linalg.matrix_rank(M) < k:
        if not min_norm:
            names = _collinear_columns(M, [labels[j] for j in np.flatnonzero(keep)])
            raise SingularSystemError(
                f"balance system is singular on the {group} arm; columns {names} are collinear. "
                f"Use sigma2 > 0 or enable min_norm",
                columns=names,
            )
        M = M + MIN_NORM_RIDGE * max(1.0, float(np.trace(M)) / k) * np.eye(k)
        LOGGER.warning(f"Singular balance system on the {group} arm regularized with a {MIN_NORM_RIDGE:g} ridge")
    theta = np.zeros(problem.p)
    if k:
        try:
            theta[keep] = scipy.linalg.solve(M, rhs, assume_a="sym")
        except (np.linalg.LinAlgError, scipy.linalg.LinAlgError) as e:
            raise SingularSystemError(f"balance system could not be solved on the {group} arm: {e}")
    residual = float(np.linalg.norm(M @ theta[keep] - rhs)) / problem.n if k else 0.0
    LOGGER.info(f"Minimax l2 solve on {group} arm with sigma2={sigma2:g}: residual {residual:.3g}")
    return DualSolution(
        theta=theta,
        weights=_weights(chi, design(fm), w, theta, group),
        objective_trace=np.asarray([problem.objective(theta)]),
        grad_norm=residual,
        iterations=1,
        converged=True,
        status="converged",
        details={"dispersion": "quadratic", "penalty": pen.to_dict(), "min_norm": min_norm},
    )


def dispersion_total(chi: DispersionSpec, w, g: WeightVector) -> float:
    arm = g.arm(w)
    return float(math.fsum(chi.dispersion(g.values[arm == 1.0])))


def primal_objective(fm, w, t: BalanceTarget, g: WeightVector, chi: DispersionSpec, pen: PenaltySpec,
                     slack: float = 0.0) -> float:
    d = feature_imbalance(fm, w, g, t)
    n = design(fm).shape[0]
    scales = fm.scales if isinstance(fm, FeatureMatrix) else np.ones(d.size)
    exact = np.isinf(scales)
    bounded = np.isfinite(scales) & (scales > 0)
    if np.any(np.abs(d[exact]) > slack):
        return math.inf
    spread = dispersion_total(chi, w, g)
    if math.isinf(spread):
        return math.inf
    if pen.kind == "l1-scaled":
        if np.any(np.abs(d[bounded]) > 1.0 / scales[bounded] + slack):
            return math.inf
        return spread / n ** 2
    return float(np.sum((scales[bounded] * d[bounded]) ** 2)) + 2 * pen.sigma2 / n ** 2 * spread


@dataclass(frozen=True)
class DualityReport:
    link_gap: float
    objective_gap: float
    duality_gap: float
    max_discrepancy: float
    tolerance: float
    converged: bool
    passed: bool
    primal_at_dual: float
    primal_at_primal: float

    def to_dict(self) -> dict:
        return {
            "link_gap": self.link_gap,
            "objective_gap": self.objective_gap,
            "duality_gap": self.duality_gap,
            "max_discrepancy": self.max_discrepancy,
            "tolerance": self.tolerance,
            "converged": self.converged,
            "passed": self.passed,
            "primal_at_dual": self.primal_at_dual,
            "primal_at_primal": self.primal_at_primal,
        }


def verify_duality(
    fm,
    w,
    t: BalanceTarget,
    chi: DispersionSpec,
    pen: PenaltySpec,
    primal_weights: WeightVector,
    dual: DualSolution,
    tolerance: float = 1e-6,
) -> DualityReport:
    Phi = design(fm)
    group = dual.weights.group
    arm = arm_indicator(w, group) == 1.0
    implied = chi.link(Phi[arm] @ dual.theta)
    link_gap = float(np.max(np.abs(primal_weights.values[arm] - implied))) if arm.any() else 0.0
    slack = max(tolerance, 0.0)
    at_dual = primal_objective(fm, w, t, dual.weights, chi, pen, slack=slack)
    at_primal = primal_objective(fm, w, t, primal_weights, chi, pen, slack=slack)
    if math.isinf(at_dual):
        objective_gap = math.inf
    elif math.isinf(at_primal):
        objective_gap = 0.0
    else:
        objective_gap = max(0.0, at_dual - at_primal)
    n = Phi.shape[0]
    dual_value = dual.objective_trace[-1] if len(dual.objective_trace) else math.nan
    if pen.kind == "l1-scaled":
        duality_gap = at_dual + dual_value / n
    else:
        duality_gap = at_dual + 2 * pen.sigma2 * dual_value / n
    max_discrepancy = max(link_gap, objective_gap)
    passed = bool(dual.converged and max_discrepancy <= tolerance)
    return DualityReport(
        link_gap=link_gap,
        objective_gap=objective_gap,
        duality_gap=float(duality_gap),
        max_discrepancy=max_discrepancy,
        tolerance=tolerance,
        converged=dual.converged,
        passed=passed,
        primal_at_dual=at_dual,
        primal_at_primal=at_primal,
    )
