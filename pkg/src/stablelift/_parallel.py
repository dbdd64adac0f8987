"""Order-preserving map over independent seeded jobs."""
from concurrent.futures import ProcessPoolExecutor


def pmap(fn, jobs, workers=1):
    jobs = list(jobs)
    if workers is None or workers <= 1 or len(jobs) <= 1:
        return [fn(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(fn, jobs))


def split(count, parts):
    """Contiguous index ranges covering range(count)."""
    parts = max(1, min(parts, count))
    edges = [count * k // parts for k in range(parts + 1)]
    return list(zip(edges[:-1], edges[1:]))
