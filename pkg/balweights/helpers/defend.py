import functools

from balweights.core.errors import ConvergenceError, VerificationError
from balweights.helpers.logger import LOGGER
from balweights.helpers.notify import report_failure

EXIT_OK = 0
EXIT_INPUT = 1
EXIT_CONVERGENCE = 2
EXIT_VERIFICATION = 3


def exit_code_for(error: Exception) -> int:
    if isinstance(error, ConvergenceError):
        return EXIT_CONVERGENCE
    if isinstance(error, VerificationError):
        return EXIT_VERIFICATION
    return EXIT_INPUT


def command_guard(command: str):
    """Turn a command's exceptions into the stable exit codes and a failure report."""
    def decorator(func):
        @functools.wraps(func)
        def wrapper(run, *args, **kwargs):
            try:
                code = func(run, *args, **kwargs)
                return EXIT_OK if code is None else int(code)
            except (ValueError, OSError, KeyError) as e:
                report_failure(command, e, {"config": getattr(run, "config_path", None)})
                return exit_code_for(e)
            except Exception as e:
                report_failure(command, e, {"config": getattr(run, "config_path", None)})
                LOGGER.error(f"Unexpected failure in {command}: {e}")
                return EXIT_INPUT
        return wrapper
    return decorator
