"""Thread pool helpers.

Work is always split into chunks that do not depend on the thread count and
results are returned in submission order, so reductions over them are
deterministic.
"""

import logging
import os
from concurrent import futures

from tqdm import tqdm

logger = logging.getLogger(__name__)

THREADS_ENV = "LUMIFIELD_THREADS"


def resolve_threads(threads=None):
    """Worker count: explicit value, then LUMIFIELD_THREADS, then cores."""
    if threads is None:
        value = os.environ.get(THREADS_ENV)
        if value:
            try:
                threads = int(value)
            except ValueError:
                logger.warning("Ignoring invalid %s=%r", THREADS_ENV, value)
    if threads is None:
        threads = os.cpu_count() or 1
    return max(1, int(threads))


def ordered_map(function, items, threads=None, progress=None):
    """Apply function to items, possibly in parallel, keeping order.

    Args:
        function: callable of one item.
        items: iterable of work items.
        threads: worker cap, see resolve_threads.
        progress: label of a progress bar, or None for no bar.
    """
    items = list(items)
    workers = min(resolve_threads(threads), len(items))

    def run(item):
        try:
            return function(item)
        except Exception as exception:
            logger.exception(exception)
            raise

    with tqdm(total=len(items), desc=progress,
              disable=progress is None) as bar:
        if workers <= 1:
            results = []
            for item in items:
                results.append(run(item))
                bar.update()
            return results
        with futures.ThreadPoolExecutor(max_workers=workers) as executor:
            results = []
            for result in executor.map(run, items):
                results.append(result)
                bar.update()
            return results


def chunk_slices(count, chunk_size):
    """Consecutive slices covering range(count)."""
    return [slice(start, min(start + chunk_size, count))
            for start in range(0, count, chunk_size)]
