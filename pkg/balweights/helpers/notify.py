import traceback
from datetime import datetime
from typing import Union

from balweights.core.errors import BalanceError, ConvergenceError, VerificationError
from balweights.helpers.logger import LOGGER

FAILURES = {}


def error_level(error: Union[Exception, str]) -> str:
    if isinstance(error, str) or isinstance(error, (ConvergenceError, VerificationError)):
        return "WARNING"
    if isinstance(error, (BalanceError, ValueError, OSError)):
        return "ERROR"
    return "CRITICAL"


def report_failure(command: str, error: Union[Exception, str], context: dict = None) -> dict:
    """Log a one-screen failure report and keep the traceback for later inspection."""
    if isinstance(error, str):
        error_type = "StringError"
        error_message = error
        traceback_text = "N/A"
    else:
        error_type = type(error).__name__
        error_message = str(error)
        traceback_text = "".join(traceback.format_exception(type(error), error, error.__traceback__)) if error.__traceback__ else "N/A"
    level = error_level(error)
    now = datetime.now()
    error_id = f"{int(now.timestamp() * 1000000)}"
    report = {
        "error_type": error_type,
        "error_level": level,
        "error_message": error_message,
        "traceback_text": traceback_text,
        "command": command,
        "context": dict(context or {}),
        "time": now.strftime('%d-%m-%Y %H:%M:%S'),
    }
    FAILURES[error_id] = report
    lines = [
        "Failure report",
        "----------------",
        f"Command: {command}",
        f"Error: {error_type}",
        f"Message: {error_message}",
    ]
    for key, value in report["context"].items():
        lines.append(f"{key}: {value}")
    lines.append("----------------")
    text = "\n".join(lines)
    if level == "WARNING":
        LOGGER.warning(text)
    elif level == "ERROR":
        LOGGER.error(text)
    else:
        LOGGER.critical(text)
        LOGGER.critical(traceback_text)
    return report
