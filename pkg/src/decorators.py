"""Decorators for command handlers."""

import functools
import logging

from src.errors import CcnfError, ExportError

logger = logging.getLogger(__name__)


def command_error(func):
    """Turns exceptions raised by a command handler into a process exit code."""

    @functools.wraps(func)
    def inner(*args, **kwargs):
        try:
            func(*args, **kwargs)
            return 0
        except CcnfError as e:
            logger.error("Error: %s", e)
            return e.exit_code
        except OSError as e:
            logger.error("Error: %s", e)
            return ExportError.exit_code
        except Exception as e:
            logger.exception("Unexpected error: %s", e)
            return 1

    return inner
