"""Worker-pool plumbing with deterministic reductions.

Parallel sections always operate on a partition that is a fixed function of
the problem size (image row bands, camera lists), never of the worker count.
Partial results are merged in partition index order, so any value computed
here is bit-identical for every ``AUGGS_THREADS`` setting.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Iterable, Sequence, TypeVar

from .errors import InvalidParameterError

T = TypeVar("T")
R = TypeVar("R")

#: Row-band height used by the rasterizer partition. Constant by design: the
#: band layout must not depend on the worker count.
BAND_ROWS = 32


def thread_count() -> int:
    """Resolve the worker cap from ``AUGGS_THREADS`` (0 or unset = auto)."""
    raw = os.environ.get("AUGGS_THREADS", "").strip()
    if not raw:
        return os.cpu_count() or 1
    try:
        value = int(raw)
    except ValueError as exc:
        raise InvalidParameterError(f"AUGGS_THREADS must be an integer, got {raw!r}") from exc
    if value < 0:
        raise InvalidParameterError(f"AUGGS_THREADS must be >= 0, got {value}")
    return value if value > 0 else (os.cpu_count() or 1)


def ordered_map(fn: Callable[[T], R], items: Sequence[T]) -> list[R]:
    """Apply ``fn`` to every item, preserving input order in the result.

    Runs on a thread pool when more than one worker is allowed and there is
    more than one item; otherwise runs inline. Either way the returned list
    is ordered by item index.
    """
    workers = min(thread_count(), len(items)) if items else 0
    if workers <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def band_edges(height: int) -> list[tuple[int, int]]:
    """Fixed row-band partition [(row0, row1), ...) covering an image height."""
    edges = []
    row = 0
    while row < height:
        edges.append((row, min(row + BAND_ROWS, height)))
        row += BAND_ROWS
    return edges
