"""
Run tracing for the orchestration entry points.

With LANGSMITH_TRACING=1 each traced call becomes a LangSmith run tagged with the
package and the command name. Otherwise the call is only timed and logged.
"""
import functools
import logging
import time
from typing import Callable

from shared.config import settings

logger = logging.getLogger(__name__)


def traceable(name: str) -> Callable:
    if settings.langsmith_tracing:
        # Lazy import to avoid hard dependency if disabled
        from langsmith import traceable as _traceable  # type: ignore

        return _traceable(
            name=name,
            project_name=settings.langsmith_project,
            tags=["depfa", name],
            metadata={"workers": settings.n_workers, "app_env": settings.app_env},
        )

    def _wrap(func):
        @functools.wraps(func)
        def _timed(*args, **kwargs):
            start = time.perf_counter()
            try:
                return func(*args, **kwargs)
            finally:
                logger.info(f"run finished: name={name} seconds={time.perf_counter() - start:.3f}")

        return _timed

    return _wrap
