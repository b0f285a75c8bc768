"""
Structured logging setup and stage timing.
"""

import logging
import sys
import time
from contextlib import contextmanager
from typing import Any, Iterator, cast

import structlog

from dtskit.errors import DtsError, stage

logger = structlog.get_logger(__name__)


def configure_logging(level: str = "INFO", fmt: str = "json") -> None:
    """Install the structlog processor chain over stdlib logging on stderr."""
    logging.basicConfig(
        level=getattr(logging, level.upper(), logging.INFO),
        stream=sys.stderr,
        format="%(message)s",
        force=True,
    )

    renderer = (
        structlog.processors.JSONRenderer(sort_keys=True)
        if fmt == "json"
        else structlog.dev.ConsoleRenderer(colors=False)
    )

    structlog.configure(
        processors=[
            structlog.stdlib.filter_by_level,
            structlog.stdlib.add_logger_name,
            structlog.stdlib.add_log_level,
            structlog.stdlib.PositionalArgumentsFormatter(),
            structlog.processors.TimeStamper(fmt="iso"),
            structlog.processors.StackInfoRenderer(),
            structlog.processors.format_exc_info,
            structlog.processors.UnicodeDecoder(),
            cast(Any, renderer),
        ],
        context_class=dict,
        logger_factory=structlog.stdlib.LoggerFactory(),
        wrapper_class=structlog.stdlib.BoundLogger,
        cache_logger_on_first_use=True,
    )


@contextmanager
def timed_stage(name: str, **fields: Any) -> Iterator[None]:
    """Log start and completion of a pipeline stage and tag its errors."""
    start_time = time.perf_counter()
    logger.info("Stage started", stage=name, **fields)
    try:
        with stage(name):
            yield
    except DtsError as exc:
        logger.error(
            "Stage failed",
            stage=name,
            error=exc.message,
            error_type=type(exc).__name__,
            duration=time.perf_counter() - start_time,
        )
        raise
    duration = time.perf_counter() - start_time
    logger.info("Stage completed", stage=name, duration=duration)
