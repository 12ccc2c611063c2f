import logging

LOGGER_NAME = "homog_control"

logger = logging.getLogger(LOGGER_NAME)

if not logger.handlers:
    _handler = logging.StreamHandler()
    _handler.setFormatter(
        logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s")
    )
    logger.addHandler(_handler)
    logger.setLevel(logging.INFO)
    logger.propagate = False


def set_quiet(quiet=True):
    """Only warnings and errors reach stderr when quiet."""
    logger.setLevel(logging.WARNING if quiet else logging.INFO)


def set_verbose():
    logger.setLevel(logging.DEBUG)
