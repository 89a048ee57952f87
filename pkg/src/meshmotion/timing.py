"""Wall-clock phase accounting for operator runs.

Phases mirror the reporting split used throughout: "assembly",
"linear_solve", "nn_eval" and "rest"; "rest" is derived as total minus the
instrumented sections, so the phases always sum to the measured total.
"""

import time
from contextlib import contextmanager

PHASES = ("assembly", "linear_solve", "nn_eval", "rest")


class PhaseTimer:
    """Accumulates non-overlapping named sections against a total clock."""

    def __init__(self):
        self._acc: dict[str, float] = {}
        self._t0 = None
        self._total = 0.0
        self._active = None

    @contextmanager
    def section(self, name: str):
        if self._active is not None:
            # nested sections would double-count; inner one is ignored
            yield
            return
        self._active = name
        t = time.perf_counter()
        try:
            yield
        finally:
            self._acc[name] = self._acc.get(name, 0.0) + (time.perf_counter() - t)
            self._active = None

    @contextmanager
    def total(self):
        t = time.perf_counter()
        try:
            yield
        finally:
            self._total += time.perf_counter() - t

    def phases_ms(self) -> dict[str, float]:
        out = {p: 1e3 * self._acc.get(p, 0.0) for p in PHASES if p != "rest"}
        rest = 1e3 * self._total - sum(out.values())
        out["rest"] = max(rest, 0.0)
        out["total"] = 1e3 * self._total
        return out


class NullTimer:
    """No-op timer so operators can be called without instrumentation."""

    @contextmanager
    def section(self, name: str):
        yield

    @contextmanager
    def total(self):
        yield


NULL_TIMER = NullTimer()
