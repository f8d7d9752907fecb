from balweights.helpers.logger import LOGGER
from balweights.helpers.commands import CommandRouter

__version__ = "0.1.0"

dp = CommandRouter()

__all__ = ["__version__", "dp", "LOGGER"]
