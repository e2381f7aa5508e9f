"""
Logger lookup shared by flows and library code.

Inside a Prefect flow or task run we log through the run logger so messages
land in the run's log stream. Library code is also called from tests and
scripts without a run context, where we fall back to a plain Prefect logger.
"""

import logging

from prefect import get_run_logger
from prefect.exceptions import MissingContextError
from prefect.logging import get_logger as get_prefect_logger


def get_logger(name: str = "adeki") -> logging.Logger | logging.LoggerAdapter:
    try:
        return get_run_logger()
    except MissingContextError:
        return get_prefect_logger(name)
