import logging
import sys

LOGGER_NAME = "dream_sim"
LOG_FORMAT = "%(levelname)s: %(name)s: %(message)s"

base_logger = logging.getLogger(LOGGER_NAME)
base_logger.setLevel(logging.INFO)
base_logger.propagate = False

if not base_logger.handlers:
    # Reports and CSVs go to files; stderr carries progress and diagnostics only.
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter(LOG_FORMAT))
    base_logger.addHandler(handler)


def set_verbose(*, verbose: bool) -> None:
    """DEBUG adds window closings and the predictor's keep decisions."""
    base_logger.setLevel(logging.DEBUG if verbose else logging.INFO)
