import os
from concurrent.futures import ThreadPoolExecutor

ENV_THREADS = "EVIDENCE3_THREADS"


def resolve_workers(n_jobs=None):
    """Number of worker threads to use.

    An explicit ``n_jobs`` wins; otherwise ``EVIDENCE3_THREADS`` is read,
    where 0 (or unset) means one worker per CPU.
    """
    if n_jobs is None:
        raw = os.environ.get(ENV_THREADS, "0").strip() or "0"
        try:
            n_jobs = int(raw)
        except ValueError:
            raise ValueError(f"{ENV_THREADS} must be an integer, got {raw!r}") from None
    if n_jobs < 0:
        raise ValueError("worker count must be >= 0")
    if n_jobs == 0:
        n_jobs = os.cpu_count() or 1
    return n_jobs


def pmap(fn, items, n_jobs=None):
    """Order-preserving map over ``items`` on a thread pool.

    Results are identical to ``list(map(fn, items))`` as long as ``fn`` is
    pure, which every per-sample function in this package is.
    """
    items = list(items)
    workers = min(resolve_workers(n_jobs), max(len(items), 1))
    if workers <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))
