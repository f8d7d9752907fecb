"""Minimax weights for kernel models, solved in weight space.

For weights gamma on the arm T the objective is

    Q(gamma) = imbalance^2 + (sigma2 / n^2) * sum_T gamma_i^2
             = (1/n^2) gamma' (K_TT + sigma2 I) gamma - (2/n) gamma' h + const

where h is the kernel mean embedding of the target evaluated at the arm units.
"""

import math
from dataclasses import dataclass, field, replace
from typing import Mapping, Optional

import numpy as np
import scipy.linalg
from scipy.spatial.distance import cdist, pdist

from balweights.core.dataset import FeatureMatrix, ObservationTable, arm_indicator
from balweights.core.errors import InputError, SingularSystemError
from balweights.core.imbalance import WeightVector, check_symmetric, reported_ess
from balweights.helpers.logger import LOGGER
from balweights.helpers.utils import run_parallel
from config import KERNEL_MAX_ITER, KERNEL_TOLERANCE, PSD_JITTER, PSD_TOLERANCE

KERNEL_KINDS = ("linear", "polynomial", "gaussian", "binary-product")
KERNEL_CONSTRAINTS = ("none", "simplex")


@dataclass(frozen=True)
class KernelSpec:
    kind: str = "gaussian"
    degree: int = 2
    offset: float = 1.0
    bandwidth: Optional[float] = None
    decay: float = 1.0

    def __post_init__(self):
        if self.kind not in KERNEL_KINDS:
            raise InputError(f"unknown kernel {self.kind!r}, expected one of {KERNEL_KINDS}")
        if self.kind == "polynomial" and self.degree < 1:
            raise InputError(f"polynomial kernel degree must be at least 1, got {self.degree}")
        if self.kind == "gaussian" and self.bandwidth is not None and not self.bandwidth > 0:
            raise InputError(f"gaussian bandwidth must be positive, got {self.bandwidth}")
        if self.kind == "binary-product" and not 0.0 < self.decay <= 1.0:
            raise InputError(f"binary-product decay must lie in (0, 1], got {self.decay}")

    @classmethod
    def from_dict(cls, payload: Mapping) -> "KernelSpec":
        bandwidth = payload.get("bandwidth")
        return cls(
            kind=payload.get("kind", "gaussian"),
            degree=int(payload.get("degree", 2)),
            offset=float(payload.get("offset", 1.0)),
            bandwidth=None if bandwidth is None else float(bandwidth),
            decay=float(payload.get("decay", 1.0)),
        )

    def resolved(self, X) -> "KernelSpec":
        if self.kind == "gaussian" and self.bandwidth is None:
            return replace(self, bandwidth=median_bandwidth(X))
        return self

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "degree": self.degree,
            "offset": self.offset,
            "bandwidth": self.bandwidth,
            "decay": self.decay,
        }


def median_bandwidth(X) -> float:
    X = np.atleast_2d(np.asarray(X, dtype=float))
    distances = pdist(X) if X.shape[0] > 1 else np.zeros(0)
    distances = distances[distances > 0]
    if distances.size == 0:
        LOGGER.warning("All points coincide; gaussian bandwidth set to 1")
        return 1.0
    return float(np.median(distances))


def _kernel_block(spec: KernelSpec, X, Y):
    if spec.kind == "linear":
        return X @ Y.T
    if spec.kind == "polynomial":
        return (X @ Y.T + spec.offset) ** spec.degree
    if spec.kind == "gaussian":
        return np.exp(-cdist(X, Y, "sqeuclidean") / (2 * spec.bandwidth ** 2))
    K = np.ones((X.shape[0], Y.shape[0]))
    for col in range(X.shape[1]):
        K *= 1.0 + spec.decay * np.outer(X[:, col], Y[:, col])
    return K


def gram(spec: KernelSpec, X, Y=None, threads: int = 1, block_rows: int = 512) -> np.ndarray:
    X = np.atleast_2d(np.asarray(X, dtype=float))
    symmetric = Y is None
    Y = X if symmetric else np.atleast_2d(np.asarray(Y, dtype=float))
    if X.shape[1] != Y.shape[1]:
        raise InputError(f"kernel inputs have {X.shape[1]} and {Y.shape[1]} columns")
    spec = spec.resolved(X)
    if spec.kind == "gaussian" and spec.bandwidth is None:
        raise InputError("gaussian kernel needs a bandwidth")
    starts = list(range(0, X.shape[0], block_rows))
    blocks = run_parallel(lambda s: _kernel_block(spec, X[s:s + block_rows], Y), starts, threads)
    K = np.vstack(blocks) if blocks else np.zeros((0, Y.shape[0]))
    if not np.all(np.isfinite(K)):
        raise InputError(f"{spec.kind} kernel produced non-finite entries")
    if symmetric:
        K = (K + K.T) / 2
    return K


@dataclass(frozen=True)
class KernelWeightProblem:
    gram: np.ndarray
    treatment: np.ndarray
    sigma2: float = 0.0
    constraints: str = "none"
    group: str = "treated"
    target_weights: Optional[np.ndarray] = None
    target_cross: Optional[np.ndarray] = None
    target_energy: Optional[float] = None
    allow_jitter: bool = False

    def __post_init__(self):
        K = check_symmetric(self.gram)
        n = K.shape[0]
        w = np.asarray(self.treatment, dtype=float)
        if w.shape != (n,):
            raise InputError(f"{w.size} treatment entries for a {n}x{n} kernel matrix")
        if self.constraints not in KERNEL_CONSTRAINTS:
            raise InputError(f"unknown constraints {self.constraints!r}, expected one of {KERNEL_CONSTRAINTS}")
        if not self.sigma2 >= 0 or math.isinf(self.sigma2):
            raise InputError(f"sigma2 must be finite and nonnegative, got {self.sigma2}")
        if arm_indicator(w, self.group).sum() < 1:
            raise InputError(f"the {self.group} arm has no units")
        if (self.target_cross is None) != (self.target_energy is None):
            raise InputError("an external kernel target needs both cross means and energy")
        object.__setattr__(self, "gram", K)
        object.__setattr__(self, "treatment", w)

    @property
    def n(self) -> int:
        return self.gram.shape[0]

    @property
    def arm(self) -> np.ndarray:
        return arm_indicator(self.treatment, self.group) == 1.0

    def embedding(self):
        """Return (h, const): target mean embedding on the arm and its squared norm."""
        K = self.gram
        if self.target_cross is not None:
            return np.asarray(self.target_cross, dtype=float)[self.arm], float(self.target_energy)
        tau = np.ones(self.n) if self.target_weights is None else np.asarray(self.target_weights, dtype=float)
        return K[self.arm] @ tau / self.n, float(tau @ K @ tau) / self.n ** 2

    def objective(self, gamma_arm) -> float:
        h, const = self.embedding()
        K_TT = self.gram[np.ix_(self.arm, self.arm)]
        quad = float(gamma_arm @ K_TT @ gamma_arm + self.sigma2 * gamma_arm @ gamma_arm) / self.n ** 2
        return quad - 2.0 / self.n * float(gamma_arm @ h) + const


@dataclass(frozen=True)
class KernelSolution:
    weights: WeightVector
    objective_trace: np.ndarray
    iterations: int
    converged: bool
    status: str
    grad_norm: float
    jitter: float
    details: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "weights": self.weights.values,
            "group": self.weights.group,
            "objective_trace": self.objective_trace,
            "final_objective": self.objective_trace[-1] if len(self.objective_trace) else None,
            "iterations": self.iterations,
            "converged": self.converged,
            "status": self.status,
            "grad_norm": self.grad_norm,
            "jitter": self.jitter,
            "details": self.details,
        }


def project_simplex(y, total: float) -> np.ndarray:
    u = np.sort(y)[::-1]
    css = np.cumsum(u) - total
    ranks = np.arange(1, y.size + 1)
    rho = np.flatnonzero(u - css / ranks > 0)[-1]
    tau = css[rho] / (rho + 1)
    return np.maximum(y - tau, 0.0)


def kernel_objective(K, w, gamma, sigma2: float, group: str = "treated", target_weights=None) -> float:
    problem = KernelWeightProblem(gram=K, treatment=w, sigma2=sigma2, group=group, target_weights=target_weights)
    return problem.objective(np.asarray(gamma, dtype=float)[problem.arm])


def _full_weights(problem: KernelWeightProblem, gamma_arm, simplex: bool) -> WeightVector:
    values = np.zeros(problem.n)
    values[problem.arm] = gamma_arm
    if simplex:
        return WeightVector.on_arm(values, problem.treatment, problem.group, sum_to_one=True, nonnegative=True)
    return WeightVector.on_arm(values, problem.treatment, problem.group)


def _solve_unconstrained(problem: KernelWeightProblem, jitter: float) -> KernelSolution:
    arm = problem.arm
    K_TT = problem.gram[np.ix_(arm, arm)]
    H = K_TT + problem.sigma2 * np.eye(K_TT.shape[0])
    if problem.sigma2 == 0 and np.linalg.matrix_rank(H) < H.shape[0] and not problem.allow_jitter:
        raise SingularSystemError(
            f"kernel block of the {problem.group} arm is singular with sigma2=0; "
            f"set sigma2 > 0 or allow the {PSD_JITTER:g}*trace/n jitter to regularize it"
        )
    h, _ = problem.embedding()
    try:
        gamma = scipy.linalg.solve(H + jitter * np.eye(H.shape[0]), problem.n * h, assume_a="pos")
    except (np.linalg.LinAlgError, scipy.linalg.LinAlgError) as e:
        raise SingularSystemError(f"kernel system could not be factorized: {e}; set sigma2 > 0")
    value = problem.objective(gamma)
    LOGGER.info(f"Kernel minimax solve on {problem.group} arm (sigma2={problem.sigma2:g}): objective {value:.6g}")
    return KernelSolution(
        weights=_full_weights(problem, gamma, simplex=False),
        objective_trace=np.asarray([value]),
        iterations=1,
        converged=True,
        status="converged",
        grad_norm=0.0,
        jitter=jitter,
        details={"constraints": "none", "sigma2": problem.sigma2},
    )


def _solve_simplex(problem: KernelWeightProblem, tolerance: float, max_iter: int) -> KernelSolution:
    arm = problem.arm
    n, m = problem.n, int(arm.sum())
    K_TT = problem.gram[np.ix_(arm, arm)]
    H = K_TT + problem.sigma2 * np.eye(m)
    h, _ = problem.embedding()
    top = float(scipy.linalg.eigvalsh(H, subset_by_index=[m - 1, m - 1])[0])
    L = max(2.0 * top / n ** 2, 1e-300)

    def grad(gamma):
        return 2.0 / n ** 2 * (H @ gamma) - 2.0 / n * h

    x = np.full(m, n / m)
    y, t = x.copy(), 1.0
    value = problem.objective(x)
    trace = [value]
    grad_norm = math.inf
    converged = False
    iteration = 0
    for iteration in range(1, max_iter + 1):
        z = project_simplex(y - grad(y) / L, n)
        z_value = problem.objective(z)
        if z_value <= value:
            x_new, new_value = z, z_value
            t_new = (1.0 + math.sqrt(1.0 + 4.0 * t * t)) / 2.0
            y = x_new + (t / t_new) * (z - x_new) + ((t - 1.0) / t_new) * (x_new - x)
            t = t_new
        else:
            # restart the momentum from the last accepted point
            x_new, new_value = x, value
            y, t = x.copy(), 1.0
        x, value = x_new, new_value
        trace.append(value)
        grad_norm = L * float(np.linalg.norm(x - project_simplex(x - grad(x) / L, n)))
        if grad_norm <= tolerance:
            converged = True
            break
    status = "converged" if converged else "max-iter"
    log = LOGGER.info if converged else LOGGER.warning
    log(f"Simplex kernel solve on {problem.group} arm: {status} after {iteration} iterations (gradient mapping {grad_norm:.3g})")
    return KernelSolution(
        weights=_full_weights(problem, x, simplex=True),
        objective_trace=np.asarray(trace),
        iterations=iteration,
        converged=converged,
        status=status,
        grad_norm=grad_norm,
        jitter=0.0,
        details={"constraints": "simplex", "sigma2": problem.sigma2, "lipschitz": L},
    )


def solve_kernel_minimax(
    prob: KernelWeightProblem,
    tolerance: float = KERNEL_TOLERANCE,
    max_iter: int = KERNEL_MAX_ITER,
) -> KernelSolution:
    arm = prob.arm
    K_TT = prob.gram[np.ix_(arm, arm)]
    jitter = PSD_JITTER * float(np.trace(prob.gram)) / prob.n
    lowest = float(scipy.linalg.eigvalsh(K_TT + jitter * np.eye(K_TT.shape[0]), subset_by_index=[0, 0])[0])
    if lowest < -PSD_TOLERANCE * max(1.0, float(np.trace(K_TT)) / K_TT.shape[0]):
        raise InputError(f"kernel matrix is not PSD on the {prob.group} arm (eigenvalue {lowest:.3g})")
    if prob.constraints == "simplex":
        return _solve_simplex(prob, tolerance, max_iter)
    return _solve_unconstrained(prob, jitter)


def heuristic_sigma2(table: ObservationTable, fm, group: str = "treated") -> float:
    if table.outcome is None:
        raise InputError("sigma2 must be set explicitly when the data has no outcome")
    arm = table.arm_mask(group) == 1.0
    Phi = fm.values if isinstance(fm, FeatureMatrix) else np.asarray(fm, dtype=float)
    Phi_arm, Y_arm = Phi[arm], table.outcome[arm]
    beta, _, rank, _ = np.linalg.lstsq(Phi_arm, Y_arm, rcond=None)
    residuals = Y_arm - Phi_arm @ beta
    dof = Y_arm.size - rank
    if dof <= 0:
        LOGGER.warning(f"Pilot fit on the {group} arm is saturated; residual variance uses n instead of n - rank")
        dof = Y_arm.size
    sigma2 = float(residuals @ residuals) / dof
    LOGGER.info(f"Pilot residual variance on the {group} arm: sigma2={sigma2:.6g}")
    return sigma2


def sigma2_sweep(K, w, grid, group: str = "treated", constraints: str = "none", target_weights=None,
                 allow_jitter: bool = False) -> list:
    rows = []
    for sigma2 in grid:
        problem = KernelWeightProblem(
            gram=K, treatment=w, sigma2=float(sigma2), constraints=constraints, group=group,
            target_weights=target_weights, allow_jitter=allow_jitter,
        )
        solution = solve_kernel_minimax(problem)
        gamma = solution.weights.values[problem.arm]
        h, const = problem.embedding()
        imbalance2 = float(gamma @ problem.gram[np.ix_(problem.arm, problem.arm)] @ gamma) / problem.n ** 2 \
            - 2.0 / problem.n * float(gamma @ h) + const
        rows.append(
            {
                "sigma2": float(sigma2),
                "objective": float(solution.objective_trace[-1]),
                "imbalance": math.sqrt(max(imbalance2, 0.0)),
                "gamma_rms": math.sqrt(float(gamma @ gamma) / problem.n),
                "ess": reported_ess(solution.weights),
                "converged": solution.converged,
            }
        )
    return rows
