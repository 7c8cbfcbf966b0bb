import threading
import time

import numpy as np
import pytest

from beastpipe.model import DimensionError
from beastpipe.queues import BatchingQueue, DynamicBatcher, QueueClosed
from test_rollout import make_rollout


def item_for(tag: int) -> dict:
    return {"tag": np.array([[tag]], dtype=np.int64)}


class TestBatchingQueue:
    def test_single_item_batch(self, rng):
        q = BatchingQueue(1)
        r = make_rollout(rng)
        q.put(r)
        batch = q.next_batch()
        assert batch.batch_size == 1
        np.testing.assert_array_equal(batch.reward[:, 0], r.reward)

    def test_partial_batch_withheld(self, rng):
        q = BatchingQueue(2, stack_fn=list)
        for _ in range(3):
            q.put(make_rollout(rng))
        assert len(q.next_batch()) == 2
        got = []
        t = threading.Thread(target=lambda: got.append(q.next_batch()))
        t.start()
        t.join(timeout=0.2)
        assert t.is_alive()  # third item alone cannot form a batch
        q.close()
        t.join(timeout=2.0)
        assert got == [None]
        assert q.items_dropped == 1

    def test_put_after_close_raises(self, rng):
        q = BatchingQueue(2)
        q.close()
        with pytest.raises(QueueClosed):
            q.put(make_rollout(rng))

    def test_counting_property(self, rng):
        q = BatchingQueue(4, capacity=100, stack_fn=list)
        for _ in range(5 * 4):
            q.put(make_rollout(rng))
        batches = [q.next_batch() for _ in range(5)]
        assert all(len(b) == 4 for b in batches)
        assert q.items_batched == 20

    def test_fifo_per_producer(self):
        q = BatchingQueue(2, capacity=100, stack_fn=list)
        q.put("p1")
        q.put("p2")
        assert q.next_batch() == ["p1", "p2"]

    def test_capacity_blocks_producer(self):
        q = BatchingQueue(2, capacity=2, stack_fn=list)
        q.put(1)
        q.put(2)
        state = {}

        def producer():
            q.put(3)
            state["done"] = True

        t = threading.Thread(target=producer)
        t.start()
        t.join(timeout=0.2)
        assert t.is_alive()
        q.next_batch()
        t.join(timeout=2.0)
        assert state.get("done")
        q.close()

    def test_double_close_is_noop(self):
        q = BatchingQueue(1)
        q.close()
        q.close()

    def test_closed_consumer_gets_end_of_stream_quickly(self):
        q = BatchingQueue(2, stack_fn=list)
        result = {}

        def consumer():
            result["batch"] = q.next_batch()

        t = threading.Thread(target=consumer)
        t.start()
        time.sleep(0.05)
        q.close()
        t.join(timeout=2.0)
        assert not t.is_alive()
        assert result["batch"] is None

    def test_close_drops_all_residual_items(self):
        q = BatchingQueue(2, capacity=10, stack_fn=list)
        for i in range(5):
            q.put(i)
        q.close()
        assert list(q) == []
        assert q.items_dropped == 5
        assert q.items_enqueued == q.items_batched + q.items_dropped


class TestDynamicBatcher:
    def test_identity_round_trip(self):
        d = DynamicBatcher()
        out = {}

        def submitter():
            out["result"] = d.submit(item_for(42))

        t = threading.Thread(target=submitter)
        t.start()
        handle = d.next_batch()
        assert len(handle) == 1
        handle.set_outputs(handle.get_inputs())
        t.join(timeout=2.0)
        assert out["result"]["tag"][0, 0] == 42
        d.close()

    def test_two_submitters_routed_correctly(self):
        d = DynamicBatcher()
        results = {}
        barrier = threading.Barrier(3)

        def submitter(tag):
            barrier.wait()
            results[tag] = d.submit(item_for(tag))

        threads = [threading.Thread(target=submitter, args=(t,)) for t in (7, 8)]
        for t in threads:
            t.start()
        barrier.wait()
        served = 0
        while served < 2:
            handle = d.next_batch()
            handle.set_outputs(handle.get_inputs())
            served += len(handle)
        for t in threads:
            t.join(timeout=2.0)
        assert results[7]["tag"][0, 0] == 7
        assert results[8]["tag"][0, 0] == 8
        d.close()

    def test_max_batch_size_cap(self):
        d = DynamicBatcher(max_batch_size=4)
        results = []
        threads = [
            threading.Thread(target=lambda i=i: results.append(d.submit(item_for(i))))
            for i in range(5)
        ]
        for t in threads:
            t.start()
        # wait for all five to be pending
        deadline = time.monotonic() + 2.0
        while d.items_submitted < 5 and time.monotonic() < deadline:
            time.sleep(0.001)
        h1 = d.next_batch()
        assert len(h1) == 4
        h1.set_outputs(h1.get_inputs())
        h2 = d.next_batch()
        assert len(h2) == 1
        h2.set_outputs(h2.get_inputs())
        for t in threads:
            t.join(timeout=2.0)
        assert len(results) == 5
        d.close()

    def test_wrong_output_length_rejected_and_retryable(self):
        d = DynamicBatcher()
        out = {}
        t = threading.Thread(target=lambda: out.update(r=d.submit(item_for(1))))
        t.start()
        handle = d.next_batch()
        with pytest.raises(DimensionError):
            handle.set_outputs({"tag": np.zeros((1, 2), dtype=np.int64)})
        t.join(timeout=0.1)
        assert t.is_alive()  # submitter still waiting
        handle.set_outputs(handle.get_inputs())
        t.join(timeout=2.0)
        assert out["r"]["tag"][0, 0] == 1
        d.close()

    def test_set_outputs_exactly_once(self):
        d = DynamicBatcher()
        t = threading.Thread(target=lambda: d.submit(item_for(1)))
        t.start()
        handle = d.next_batch()
        handle.set_outputs(handle.get_inputs())
        with pytest.raises(RuntimeError):
            handle.set_outputs(handle.get_inputs())
        t.join(timeout=2.0)
        d.close()

    def test_submit_after_close_raises(self):
        d = DynamicBatcher()
        d.close()
        with pytest.raises(QueueClosed):
            d.submit(item_for(1))

    def test_close_wakes_pending_submitters(self):
        d = DynamicBatcher()
        errors = []

        def submitter():
            try:
                d.submit(item_for(1))
            except QueueClosed:
                errors.append("closed")

        t = threading.Thread(target=submitter)
        t.start()
        time.sleep(0.05)
        d.close()
        t.join(timeout=2.0)
        assert errors == ["closed"]
        assert d.items_dropped == 1

    def test_inflight_handle_still_delivers_after_close(self):
        d = DynamicBatcher()
        out = {}
        t = threading.Thread(target=lambda: out.update(r=d.submit(item_for(5))))
        t.start()
        handle = d.next_batch()
        d.close()
        handle.set_outputs(handle.get_inputs())
        t.join(timeout=2.0)
        assert out["r"]["tag"][0, 0] == 5

    def test_consumer_end_of_stream_after_close(self):
        d = DynamicBatcher()
        result = {}
        t = threading.Thread(target=lambda: result.update(h=d.next_batch()))
        t.start()
        time.sleep(0.05)
        d.close()
        t.join(timeout=2.0)
        assert result["h"] is None

    def test_input_without_batch_axis_rejected(self):
        d = DynamicBatcher()
        with pytest.raises(DimensionError):
            d.submit({"tag": np.zeros(3, dtype=np.int64)})

    def test_fail_propagates_to_submitters(self):
        d = DynamicBatcher()
        errors = []

        def submitter():
            try:
                d.submit(item_for(1))
            except RuntimeError as exc:
                errors.append(str(exc))

        t = threading.Thread(target=submitter)
        t.start()
        handle = d.next_batch()
        handle.fail(RuntimeError("model exploded"))
        t.join(timeout=2.0)
        assert errors == ["model exploded"]
        d.close()

    def test_min_batch_size_waits_for_more(self):
        d = DynamicBatcher(min_batch_size=2, min_batch_timeout=5.0)
        results = []
        t1 = threading.Thread(target=lambda: results.append(d.submit(item_for(1))))
        t1.start()
        time.sleep(0.05)
        t2 = threading.Thread(target=lambda: results.append(d.submit(item_for(2))))
        t2.start()
        handle = d.next_batch()
        assert len(handle) == 2
        handle.set_outputs(handle.get_inputs())
        t1.join(timeout=2.0)
        t2.join(timeout=2.0)
        d.close()


class TestStressAndConservation:
    def test_stress_both_structures(self, rng):
        """64 producers, tagged items; zero lost, duplicated, or misrouted."""
        n_producers = 64
        per_producer = 32
        items_total = n_producers * per_producer

        batcher = DynamicBatcher(max_batch_size=16)
        queue = BatchingQueue(4, capacity=32, stack_fn=list)
        misrouted = []
        received: list[int] = []

        def consumer_inference():
            for handle in batcher:
                handle.set_outputs(handle.get_inputs())

        def consumer_learner():
            for batch in queue:
                received.extend(int(r["tag"][0, 0]) for r in batch)

        def producer(pid):
            for i in range(per_producer):
                tag = pid * 1_000_000 + i
                try:
                    out = batcher.submit(item_for(tag))
                except QueueClosed:
                    return
                if int(out["tag"][0, 0]) != tag:
                    misrouted.append((tag, int(out["tag"][0, 0])))
                try:
                    queue.put(out)
                except QueueClosed:
                    return

        inf = threading.Thread(target=consumer_inference)
        lrn = threading.Thread(target=consumer_learner)
        producers = [threading.Thread(target=producer, args=(p,)) for p in range(n_producers)]
        inf.start()
        lrn.start()
        for t in producers:
            t.start()
        for t in producers:
            t.join(timeout=30.0)
        batcher.close()
        queue.close()
        inf.join(timeout=5.0)
        lrn.join(timeout=5.0)
        assert not inf.is_alive() and not lrn.is_alive()

        assert misrouted == []
        assert len(received) == len(set(received))  # exactly-once
        assert batcher.items_submitted == items_total
        assert batcher.items_batched + batcher.items_dropped == batcher.items_submitted
        assert queue.items_enqueued == queue.items_batched + queue.items_dropped
        assert len(received) == queue.items_batched

    def test_shutdown_with_blocked_parties_terminates(self):
        """Closing both queues frees blocked producers and the consumer."""
        batcher = DynamicBatcher()
        queue = BatchingQueue(8, stack_fn=list)
        n = 16

        def producer(i):
            try:
                out = batcher.submit(item_for(i))
                queue.put(out)
            except QueueClosed:
                pass

        def consumer():
            while queue.next_batch() is not None:
                pass

        producers = [threading.Thread(target=producer, args=(i,)) for i in range(n)]
        cons = threading.Thread(target=consumer)
        cons.start()
        for t in producers:
            t.start()
        time.sleep(0.1)
        start = time.monotonic()
        batcher.close()
        queue.close()
        for t in producers:
            t.join(timeout=5.0)
        cons.join(timeout=5.0)
        elapsed = time.monotonic() - start
        assert all(not t.is_alive() for t in producers)
        assert not cons.is_alive()
        assert elapsed < 5.0
