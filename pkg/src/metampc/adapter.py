"""Rolling experience buffer and online gradient fine-tuning of an ensemble."""

from __future__ import annotations

import collections
import dataclasses
import logging
import time
from typing import Callable

import numpy as np

from . import seqmodel
from .ensemble import Ensemble
from .tasks import make_windows

log = logging.getLogger(__name__)


class ExperienceBuffer:
    """FIFO of ``(t, v_x, v_y, omega, d, delta_cmd)`` rows, at most ``capacity`` long."""

    def __init__(self, capacity: int = 300, dt: float = 0.05, tolerance: float = 1e-6):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self.dt = dt
        self.tolerance = tolerance
        self._rows: collections.deque = collections.deque(maxlen=capacity)

    def __len__(self) -> int:
        return len(self._rows)

    @property
    def last_time(self) -> float | None:
        return self._rows[-1][0] if self._rows else None

    def push(self, state, control, t: float) -> "ExperienceBuffer":
        state = np.asarray(state, dtype=float)
        dyn = state[3:6] if state.shape[-1] == 6 else state
        if self._rows and not t > self._rows[-1][0]:
            raise ValueError(f"timestamp {t} is not after the last one ({self._rows[-1][0]})")
        self._rows.append(np.concatenate([[t], dyn, np.asarray(control, dtype=float)]))
        return self

    def array(self) -> np.ndarray:
        """Snapshot as a ``(size, 6)`` array with the timestamp in column 0."""
        if not self._rows:
            return np.empty((0, 6))
        return np.array(self._rows)

    def segments(self) -> list[np.ndarray]:
        """Maximal runs of rows spaced exactly ``dt`` apart."""
        rows = self.array()
        if len(rows) == 0:
            return []
        gaps = np.abs(np.diff(rows[:, 0]) - self.dt) > self.tolerance * max(self.dt, 1.0)
        cuts = np.flatnonzero(gaps) + 1
        return np.split(rows, cuts)

    def windows(self, n: int):
        """Windows and targets from every contiguous segment; none spans a gap."""
        xs, ys = [], []
        for seg in self.segments():
            if len(seg) >= n + 2:
                w, y = make_windows(seg[:, 1:4], seg[:, 4:6], n, self.dt)
                xs.append(w)
                ys.append(y)
        if not xs:
            return np.empty((0, n + 1, 5)), np.empty((0, 3))
        return np.concatenate(xs), np.concatenate(ys)

    def latest(self, count: int) -> np.ndarray:
        """The last ``count`` pairs as ``(count, 5)`` (fewer if not available)."""
        rows = self.array()
        return rows[-count:, 1:] if count else rows[:0, 1:]


@dataclasses.dataclass
class AdaptResult:
    ensemble: Ensemble
    loss: np.ndarray | None
    wall_ms: float
    applied: bool
    reason: str = ""


def adapt_step(ensemble: Ensemble, buffer: ExperienceBuffer, lr: float = 1e-3, n: int | None = None,
               budget_s: float | None = None, grad_fn: Callable = seqmodel.loss_and_grad,
               clock: Callable[[], float] = time.perf_counter, max_grad_norm: float | None = None) -> AdaptResult:
    """One gradient step per member on the summed one-step loss over the buffer.

    The input ensemble is never modified; the caller swaps in the returned
    one.  A step that overruns ``budget_s`` is discarded.  ``max_grad_norm``
    optionally clips each member's gradient.
    """
    n = ensemble.config.n if n is None else n
    start = clock()
    windows, targets = buffer.windows(n)
    if len(windows) == 0:
        return AdaptResult(ensemble, None, 0.0, False, "insufficient contiguous data")
    loss, grad = grad_fn(ensemble.weights, windows, targets, reduction="sum")
    if max_grad_norm is not None:
        from .meta import clip_by_norm
        grad = clip_by_norm(grad, max_grad_norm)
    elapsed = clock() - start
    wall_ms = elapsed * 1e3
    if budget_s is not None and elapsed > budget_s:
        log.info("adaptation step took %.1f ms, over budget; discarded", wall_ms)
        return AdaptResult(ensemble, loss, wall_ms, False, "over budget")
    if not grad.all_finite():
        return AdaptResult(ensemble, loss, wall_ms, False, "non-finite gradient")
    return AdaptResult(ensemble.replace(ensemble.weights.axpy(-lr, grad)), loss, wall_ms, True)
