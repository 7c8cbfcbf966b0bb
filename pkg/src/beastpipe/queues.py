"""Producer-consumer structures feeding inference and the learner.

BatchingQueue groups items into fixed-size batches in FIFO order with
bounded capacity for backpressure. DynamicBatcher round-trips inference
requests: many submitters block until one consumer stacks whatever is
currently waiting, computes outputs, and each submitter gets back exactly
its own slice. Both are closeable; close wakes every blocked party.

Wakeups are kept narrow (split conditions, one event per submitted item)
because thread handoffs dominate per-step latency at small payload sizes.
"""
from __future__ import annotations

import logging
import threading
import time
from typing import Any, Callable, Iterator, Optional

import numpy as np

from .model import DimensionError
from .rollout import stack_rollouts

log = logging.getLogger(__name__)


class QueueClosed(Exception):
    """Shutdown signal: the queue was closed while a caller was using it."""


class BatchingQueue:
    """FIFO that yields fixed-size batches to one or more consumers.

    `stack_fn` maps the list of batch_size items to the yielded value
    (defaults to stacking rollouts time-major with batch axis 1). Capacity
    defaults to 2·batch_size items. close() drops whatever is still queued.
    """

    def __init__(
        self,
        batch_size: int,
        capacity: Optional[int] = None,
        stack_fn: Callable[[list], Any] = stack_rollouts,
        batch_dim: int = 1,
    ):
        if batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {batch_size}")
        if batch_dim != 1:
            raise ValueError(f"batch_dim must be 1, got {batch_dim}")
        self.batch_size = batch_size
        self.capacity = 2 * batch_size if capacity is None else capacity
        if self.capacity < batch_size:
            raise ValueError("capacity must be at least batch_size")
        self._stack_fn = stack_fn
        self._items: list = []
        self._lock = threading.Lock()
        self._not_full = threading.Condition(self._lock)
        self._batch_ready = threading.Condition(self._lock)
        self._closed = False
        self.items_enqueued = 0
        self.items_batched = 0
        self.items_dropped = 0

    def put(self, item) -> None:
        """Enqueue one item; blocks while at capacity; QueueClosed after close."""
        with self._lock:
            while True:
                if self._closed:
                    raise QueueClosed("BatchingQueue closed")
                if len(self._items) < self.capacity:
                    break
                self._not_full.wait()
            self._items.append(item)
            self.items_enqueued += 1
            if len(self._items) >= self.batch_size:
                self._batch_ready.notify()

    def next_batch(self):
        """Block until batch_size items are ready; None at end-of-stream."""
        with self._lock:
            while len(self._items) < self.batch_size and not self._closed:
                self._batch_ready.wait()
            if self._closed:
                return None
            taken = self._items[: self.batch_size]
            del self._items[: self.batch_size]
            self.items_batched += len(taken)
            self._not_full.notify_all()
            if len(self._items) >= self.batch_size:
                self._batch_ready.notify()
        return self._stack_fn(taken)

    def close(self) -> None:
        """Idempotent; drops residual items and wakes everyone blocked."""
        with self._lock:
            if not self._closed:
                self._closed = True
                if self._items:
                    self.items_dropped += len(self._items)
                    log.info(
                        "BatchingQueue dropped %d residual items at close",
                        len(self._items),
                    )
                    self._items.clear()
            self._not_full.notify_all()
            self._batch_ready.notify_all()

    @property
    def closed(self) -> bool:
        return self._closed

    def __iter__(self) -> Iterator:
        while True:
            batch = self.next_batch()
            if batch is None:
                return
            yield batch


class _Slot:
    __slots__ = ("inputs", "outputs", "drained", "error", "event")

    def __init__(self, inputs):
        self.inputs = inputs
        self.outputs = None
        self.drained = False
        self.error: Optional[BaseException] = None
        self.event = threading.Event()


class BatchHandle:
    """One dynamically formed inference batch.

    get_inputs() stacks the submitted arrays along the batch axis;
    set_outputs() must be called exactly once with arrays whose batch-axis
    length matches, and routes slice i back to submitter i.
    """

    def __init__(self, batcher: "DynamicBatcher", slots: list[_Slot]):
        self._batcher = batcher
        self._slots = slots
        self._outputs_set = False
        self._stacked: Optional[dict[str, np.ndarray]] = None

    def __len__(self) -> int:
        return len(self._slots)

    def get_inputs(self) -> dict[str, np.ndarray]:
        if self._stacked is None:
            axis = self._batcher.batch_dim
            if len(self._slots) == 1:
                self._stacked = dict(self._slots[0].inputs)
            else:
                keys = self._slots[0].inputs.keys()
                self._stacked = {
                    k: np.concatenate([s.inputs[k] for s in self._slots], axis=axis)
                    for k in keys
                }
        return self._stacked

    def set_outputs(self, outputs: dict[str, np.ndarray]) -> None:
        n = len(self._slots)
        axis = self._batcher.batch_dim
        for k, v in outputs.items():
            if v.ndim <= axis or v.shape[axis] != n:
                raise DimensionError(
                    f"output '{k}' has shape {v.shape}; axis {axis} must have length {n}"
                )
        with self._batcher._lock:
            if self._outputs_set:
                raise RuntimeError("set_outputs already called for this batch")
            self._outputs_set = True
            for i, slot in enumerate(self._slots):
                # views, not copies: each batch's output arrays are fresh
                index = (slice(None),) * axis + (slice(i, i + 1),)
                slot.outputs = {k: v[index] for k, v in outputs.items()}
                slot.event.set()

    def fail(self, exc: BaseException) -> None:
        """Propagate a consumer-side failure to every submitter in the batch."""
        with self._batcher._lock:
            if self._outputs_set:
                return
            self._outputs_set = True
            for slot in self._slots:
                slot.error = exc
                slot.event.set()


class DynamicBatcher:
    """Round-trips items between many submitters and a consumer loop.

    The consumer greedily drains whatever is waiting (up to max_batch_size)
    with no artificial delay; an optional minimum batch size with timeout is
    available but off by default.
    """

    def __init__(
        self,
        max_batch_size: Optional[int] = None,
        batch_dim: int = 1,
        min_batch_size: int = 1,
        min_batch_timeout: Optional[float] = None,
    ):
        if batch_dim != 1:
            raise ValueError(f"batch_dim must be 1, got {batch_dim}")
        if min_batch_size > 1 and min_batch_timeout is None:
            raise ValueError("min_batch_size > 1 requires min_batch_timeout")
        self.batch_dim = batch_dim
        self.max_batch_size = max_batch_size
        self.min_batch_size = min_batch_size
        self.min_batch_timeout = min_batch_timeout
        self._pending: list[_Slot] = []
        self._lock = threading.Lock()
        self._item_ready = threading.Condition(self._lock)
        self._closed = False
        self.items_submitted = 0
        self.items_batched = 0
        self.items_dropped = 0

    def _check_inputs(self, inputs: dict[str, np.ndarray]) -> None:
        for k, v in inputs.items():
            if v.ndim <= self.batch_dim or v.shape[self.batch_dim] != 1:
                raise DimensionError(
                    f"input '{k}' has shape {v.shape}; axis {self.batch_dim} "
                    "must exist with length 1"
                )

    def submit(self, inputs: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
        """Block until a consumer produced outputs for this item; return own slice."""
        self._check_inputs(inputs)
        slot = _Slot(inputs)
        with self._lock:
            if self._closed:
                raise QueueClosed("DynamicBatcher closed")
            self._pending.append(slot)
            self.items_submitted += 1
            self._item_ready.notify()
        while True:
            slot.event.wait()
            with self._lock:
                if slot.error is not None:
                    raise slot.error
                if slot.outputs is not None:
                    return slot.outputs
                if not slot.drained:
                    # woken by close before any consumer took the item
                    self._pending.remove(slot)
                    self.items_dropped += 1
                    raise QueueClosed("DynamicBatcher closed while waiting")
                # closed, but a consumer holds this item: outputs still coming
                slot.event.clear()

    def next_batch(self) -> Optional[BatchHandle]:
        """Block until ≥1 item waits, then drain greedily; None at end-of-stream."""
        with self._lock:
            while not self._pending and not self._closed:
                self._item_ready.wait()
            if self._pending and self.min_batch_size > 1 and not self._closed:
                deadline = time.monotonic() + self.min_batch_timeout
                while len(self._pending) < self.min_batch_size and not self._closed:
                    remaining = deadline - time.monotonic()
                    if remaining <= 0:
                        break
                    self._item_ready.wait(remaining)
            if self._pending:
                take = len(self._pending)
                if self.max_batch_size is not None:
                    take = min(take, self.max_batch_size)
                slots = self._pending[:take]
                del self._pending[:take]
                for s in slots:
                    s.drained = True
                self.items_batched += take
                return BatchHandle(self, slots)
            return None

    def close(self) -> None:
        """Idempotent; pending submitters get QueueClosed, drained ones still
        receive their outputs once the consumer sets them."""
        with self._lock:
            self._closed = True
            self._item_ready.notify_all()
            for slot in self._pending:
                slot.event.set()

    @property
    def closed(self) -> bool:
        return self._closed

    def __iter__(self) -> Iterator[BatchHandle]:
        while True:
            handle = self.next_batch()
            if handle is None:
                return
            yield handle
