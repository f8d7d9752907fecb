import os
import sys
from importlib import import_module

from balweights import dp
from balweights.helpers.logger import LOGGER


def load_modules():
    modules_path = "balweights.modules"
    modules_dir = os.path.join(os.path.dirname(__file__), "modules")
    for filename in sorted(os.listdir(modules_dir)):
        if filename.endswith(".py") and filename != "__init__.py":
            module_name = filename[:-3]
            try:
                import_module(f"{modules_path}.{module_name}")
            except Exception as e:
                LOGGER.error(f"Failed to load module {module_name}: {e}")


def main(argv=None) -> int:
    load_modules()
    return dp.dispatch(argv)


if __name__ == "__main__":
    try:
        sys.exit(main())
    except KeyboardInterrupt:
        LOGGER.info("Stop signal received. Shutting down...")
        sys.exit(130)
