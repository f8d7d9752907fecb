import os
import psutil
from dotenv import load_dotenv

load_dotenv()

def get_env_or_default(key, default=None, cast_func=str):
    value = os.getenv(key)
    if value is not None and value.strip() != "":
        try:
            return cast_func(value)
        except (ValueError, TypeError) as e:
            print(f"Error casting {key} with value '{value}' to {cast_func.__name__}: {e}")
            return default
    return default

LOG_FILE = get_env_or_default("BALWEIGHTS_LOG_FILE", "balweights.log")
LOG_LEVEL = get_env_or_default("BALWEIGHTS_LOG_LEVEL", "INFO")
LOG_MAX_BYTES = get_env_or_default("BALWEIGHTS_LOG_MAX_BYTES", 50000000, int)
LOG_BACKUP_COUNT = get_env_or_default("BALWEIGHTS_LOG_BACKUP_COUNT", 10, int)

MAX_FEATURE_COLUMNS = get_env_or_default("BALWEIGHTS_MAX_FEATURE_COLUMNS", 2 ** 20, int)
SOLVER_TOLERANCE = get_env_or_default("BALWEIGHTS_SOLVER_TOLERANCE", 1e-9, float)
SOLVER_MAX_ITER = get_env_or_default("BALWEIGHTS_SOLVER_MAX_ITER", 50000, int)
THETA_GUARD = get_env_or_default("BALWEIGHTS_THETA_GUARD", 1e8, float)
EXP_GUARD = get_env_or_default("BALWEIGHTS_EXP_GUARD", 700.0, float)
MIN_NORM_RIDGE = get_env_or_default("BALWEIGHTS_MIN_NORM_RIDGE", 1e-12, float)
PSD_TOLERANCE = get_env_or_default("BALWEIGHTS_PSD_TOLERANCE", 1e-8, float)
PSD_JITTER = get_env_or_default("BALWEIGHTS_PSD_JITTER", 1e-10, float)
KERNEL_TOLERANCE = get_env_or_default("BALWEIGHTS_KERNEL_TOLERANCE", 1e-10, float)
KERNEL_MAX_ITER = get_env_or_default("BALWEIGHTS_KERNEL_MAX_ITER", 100000, int)
WEIGHT_FLAG_TOLERANCE = get_env_or_default("BALWEIGHTS_WEIGHT_FLAG_TOLERANCE", 1e-9, float)
VARIANCE_FLOOR = get_env_or_default("BALWEIGHTS_VARIANCE_FLOOR", 1e-8, float)

DEFAULT_FOLDS = get_env_or_default("BALWEIGHTS_FOLDS", 5, int)
DEFAULT_RIDGE_PENALTY = get_env_or_default("BALWEIGHTS_RIDGE_PENALTY", 1.0, float)
DEFAULT_CATE_DRAWS = get_env_or_default("BALWEIGHTS_CATE_DRAWS", 10000, int)
DEFAULT_LEVEL = get_env_or_default("BALWEIGHTS_LEVEL", 0.95, float)
DEFAULT_OVERLAP_EPS = get_env_or_default("BALWEIGHTS_OVERLAP_EPS", 0.02, float)
POPULATION_DRAWS = get_env_or_default("BALWEIGHTS_POPULATION_DRAWS", 400000, int)
DEFAULT_SEED = get_env_or_default("BALWEIGHTS_SEED", 20240601, int)
DEFAULT_THREADS = get_env_or_default("BALWEIGHTS_THREADS", psutil.cpu_count(logical=True) or 1, int)

BRUTE_FORCE_STARTS = get_env_or_default("BALWEIGHTS_BRUTE_FORCE_STARTS", 1000, int)
BRUTE_FORCE_STEP = get_env_or_default("BALWEIGHTS_BRUTE_FORCE_STEP", 1e-5, float)
MAX_BRUTE_FORCE_WEIGHTS = get_env_or_default("BALWEIGHTS_MAX_BRUTE_FORCE_WEIGHTS", 8, int)

positive_vars = {
    "BALWEIGHTS_SOLVER_TOLERANCE": SOLVER_TOLERANCE,
    "BALWEIGHTS_SOLVER_MAX_ITER": SOLVER_MAX_ITER,
    "BALWEIGHTS_THETA_GUARD": THETA_GUARD,
    "BALWEIGHTS_EXP_GUARD": EXP_GUARD,
    "BALWEIGHTS_MAX_FEATURE_COLUMNS": MAX_FEATURE_COLUMNS,
    "BALWEIGHTS_CATE_DRAWS": DEFAULT_CATE_DRAWS,
    "BALWEIGHTS_THREADS": DEFAULT_THREADS,
    "BALWEIGHTS_BRUTE_FORCE_STARTS": BRUTE_FORCE_STARTS,
}

for var_name, var_value in positive_vars.items():
    if var_value is None or var_value <= 0:
        raise ValueError(f"Setting {var_name} must be positive, got {var_value!r}. Fix it in .env or the environment.")

if DEFAULT_FOLDS < 2:
    raise ValueError(f"BALWEIGHTS_FOLDS must be at least 2, got {DEFAULT_FOLDS}")

if not 0.0 < DEFAULT_OVERLAP_EPS < 0.5:
    raise ValueError(f"BALWEIGHTS_OVERLAP_EPS must lie in (0, 0.5), got {DEFAULT_OVERLAP_EPS}")

if not 0.0 < DEFAULT_LEVEL < 1.0:
    raise ValueError(f"BALWEIGHTS_LEVEL must lie in (0, 1), got {DEFAULT_LEVEL}")
