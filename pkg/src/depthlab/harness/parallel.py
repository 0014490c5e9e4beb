"""Ordered task pool: results come back in task order for any worker count."""

import os
from concurrent.futures import ProcessPoolExecutor


def default_workers():
    try:
        return max(1, int(os.environ.get("DEPTHLAB_WORKERS", "1")))
    except ValueError:
        return 1


def run_tasks(fn, tasks, workers=None):
    tasks = list(tasks)
    workers = default_workers() if workers is None else max(1, int(workers))
    if workers == 1 or len(tasks) <= 1:
        return [fn(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=min(workers, len(tasks))) as pool:
        return list(pool.map(fn, tasks))
