"""Background batch assembly so step k+1 is prepared while step k trains."""

import queue
import threading
from typing import Generic, Iterable, Iterator, TypeVar

T = TypeVar("T")

_DONE = object()


class BatchPrefetcher(Generic[T]):
    """Threaded look-ahead over an iterable, yielding items in their original order.

    Items must not depend on training state; every stream a batch uses is
    derived from (seed, sample id, epoch), so prefetched output is identical
    to sequential assembly.
    """

    def __init__(self, source: Iterable[T], depth: int = 2):
        self._source = source
        self._queue: "queue.Queue" = queue.Queue(maxsize=max(depth, 1))
        self._stop = threading.Event()
        self._error: BaseException | None = None
        self._thread = threading.Thread(target=self._worker, daemon=True)
        self._thread.start()

    def _put(self, item) -> bool:
        while not self._stop.is_set():
            try:
                self._queue.put(item, timeout=0.1)
                return True
            except queue.Full:
                continue
        return False

    def _worker(self):
        try:
            for item in self._source:
                if not self._put(item):
                    return
        except BaseException as exc:  # re-raised in the consuming thread
            self._error = exc
        self._put(_DONE)

    def __iter__(self) -> Iterator[T]:
        try:
            while True:
                item = self._queue.get()
                if item is _DONE:
                    if self._error is not None:
                        raise self._error
                    return
                yield item
        finally:
            self.stop()

    def stop(self):
        self._stop.set()
        self._thread.join(timeout=2)
