import os

ENV_VAR = "QEHVI_NUM_WORKERS"


def num_workers() -> int:
    """Thread-pool size from the environment (default 1)."""
    raw = os.environ.get(ENV_VAR, "").strip()
    if not raw:
        return 1
    try:
        n = int(raw)
    except ValueError:
        raise ValueError(f"{ENV_VAR} must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise ValueError(f"{ENV_VAR} must be a positive integer, got {raw!r}")
    return n


def parallel_map(fn, items):
    """Ordered map, threaded when more than one worker is configured."""
    items = list(items)
    n = min(num_workers(), len(items))
    if n <= 1:
        return [fn(x) for x in items]
    from concurrent.futures import ThreadPoolExecutor

    with ThreadPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, items))
