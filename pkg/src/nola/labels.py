"""Ground-truth label access guard.

Ground-truth labels exist only for measuring accuracy. Every read of
``ImageRecord.true_label`` passes through :data:`label_guard`, which

* allows the read inside an :meth:`LabelGuard.evaluation` scope,
* raises :class:`~nola.errors.LabelLeakError` inside a
  :meth:`LabelGuard.training` scope, and
* counts every read made outside an evaluation scope.

A clean pipeline run leaves :attr:`LabelGuard.unscoped_reads` at zero.
"""

from __future__ import annotations

import contextlib
import contextvars
import threading

from .errors import LabelLeakError

_scope: contextvars.ContextVar[str | None] = contextvars.ContextVar("nola_label_scope", default=None)


class LabelGuard:
    def __init__(self) -> None:
        self._lock = threading.Lock()
        self.evaluation_reads = 0
        self.unscoped_reads = 0
        self.training_reads = 0

    def reset(self) -> None:
        with self._lock:
            self.evaluation_reads = self.unscoped_reads = self.training_reads = 0

    @property
    def scope(self) -> str | None:
        return _scope.get()

    def check(self) -> None:
        scope = _scope.get()
        with self._lock:
            if scope == "evaluation":
                self.evaluation_reads += 1
                return
            self.unscoped_reads += 1
            if scope is not None:
                self.training_reads += 1
        if scope is not None:
            raise LabelLeakError(f"true_label read inside training scope {scope!r}")

    @contextlib.contextmanager
    def _enter(self, name: str):
        token = _scope.set(name)
        try:
            yield self
        finally:
            _scope.reset(token)

    def evaluation(self):
        return self._enter("evaluation")

    def training(self, stage: str = "training"):
        return self._enter(stage)


label_guard = LabelGuard()
