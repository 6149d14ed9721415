"""Process-wide diagnostics counters.

Numeric guards (clamped SVD denominators, clamped arcsin inputs, depth
clamps, degenerate point clouds, skipped optimizer steps) bump a named
counter here instead of raising.  The training loop snapshots and logs
them; tests reset between cases.  Counters are plain ints guarded by the
single-training-stream rule, so no locking.
"""

from __future__ import annotations

_counters: dict[str, int] = {}


def bump(name: str, amount: int = 1) -> None:
    _counters[name] = _counters.get(name, 0) + amount


def count(name: str) -> int:
    return _counters.get(name, 0)


def snapshot() -> dict[str, int]:
    return dict(_counters)


def reset(name: str | None = None) -> None:
    if name is None:
        _counters.clear()
    else:
        _counters.pop(name, None)
