from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor

import numpy as np


def chunked(fn, arrays, workers: int = 1):
    """Apply ``fn`` to particle-axis chunks of ``arrays`` and concatenate.

    ``fn`` must act row-wise, so the result is bitwise independent of the
    worker count.
    """
    m = arrays[0].shape[0]
    if workers <= 1 or m < 2 * workers:
        return fn(*arrays)
    bounds = np.linspace(0, m, workers + 1).astype(int)
    parts = [tuple(a[lo:hi] for a in arrays) for lo, hi in zip(bounds[:-1], bounds[1:])]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        outs = list(pool.map(lambda args: fn(*args), parts))
    if isinstance(outs[0], tuple):
        return tuple(np.concatenate(col, axis=0) for col in zip(*outs))
    return np.concatenate(outs, axis=0)
