from __future__ import annotations

import queue
import threading
from typing import Callable, Generic, Iterable, Iterator, TypeVar


T = TypeVar('T')
V = TypeVar('V')

_DONE = object()


class Prefetcher(Generic[T, V]):
    """Prepares items on a background thread while the consumer works on the previous ones.

    At most ``depth`` prepared items wait in the queue. Items come out in
    exactly the order the source produced them; an exception raised while
    preparing is re-raised in the consumer at the position it happened.
    """

    def __init__(self, source: Iterable[T], prepare: Callable[[T], V], *, depth: int = 2) -> None:
        if depth < 1:
            raise ValueError('depth must be at least 1')
        self._source = source
        self._prepare = prepare
        self._queue: queue.Queue[object] = queue.Queue(maxsize=depth)
        self._closed = threading.Event()
        self._thread: threading.Thread | None = None

    def __repr__(self) -> str:
        return f'<{self.__class__.__name__} pending={self._queue.qsize()} closed={self._closed.is_set()}>'

    def __len__(self) -> int:
        return self._queue.qsize()

    def is_empty(self) -> bool:
        """:class:`bool`: Returns ``True`` if nothing prepared is waiting."""
        return self._queue.empty()

    def _put(self, item: object) -> bool:
        while not self._closed.is_set():
            try:
                self._queue.put(item, timeout=0.1)
                return True
            except queue.Full:
                continue
        return False

    def _worker(self) -> None:
        try:
            for item in self._source:
                if not self._put(('ok', self._prepare(item))):
                    return
        except BaseException as e:
            self._put(('error', e))
            return
        self._put(_DONE)

    def __iter__(self) -> Iterator[V]:
        if self._thread is not None:
            raise RuntimeError('A prefetcher can only be iterated once.')
        self._thread = threading.Thread(target=self._worker, name='prefetcher', daemon=True)
        self._thread.start()
        try:
            while True:
                entry = self._queue.get()
                if entry is _DONE:
                    return
                kind, payload = entry  # type: ignore
                if kind == 'error':
                    raise payload
                yield payload
        finally:
            self.close()

    def close(self) -> None:
        """Stops the worker. Prepared items that were never consumed are dropped."""
        self._closed.set()
        while True:
            try:
                self._queue.get_nowait()
            except queue.Empty:
                break
        if self._thread is not None and self._thread is not threading.current_thread():
            self._thread.join(timeout=5)
