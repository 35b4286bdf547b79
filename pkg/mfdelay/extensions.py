"""Shared worker pool."""
import logging
from concurrent.futures import ThreadPoolExecutor

logger = logging.getLogger(__name__)

# Worker pool (lazy init by the runner)
executor = None
executor_threads = 1


def init_executor(threads):
    """Initialize the shared worker pool; one thread means run inline."""
    global executor, executor_threads
    threads = max(1, int(threads or 1))
    if executor is not None and executor_threads == threads:
        return executor
    shutdown_executor()
    executor_threads = threads
    if threads > 1:
        executor = ThreadPoolExecutor(max_workers=threads, thread_name_prefix='mfdelay')
        logger.info(f"Worker pool started with {threads} threads")
    return executor


def get_executor():
    return executor


def shutdown_executor():
    global executor, executor_threads
    if executor is not None:
        executor.shutdown(wait=True)
        logger.debug("Worker pool stopped")
    executor = None
    executor_threads = 1
