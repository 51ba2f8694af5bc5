"""TCP ingestion service: split, validate, gap-check, persist, forward."""

from __future__ import annotations

import asyncio
import logging
import threading
from dataclasses import dataclass, field
from typing import Callable, NamedTuple

from .logs import log_event, wall_time
from .store import EcgSampleBatch, OutOfOrder, SeriesStore, StoreError, StoreFull
from .wireproto import FrameSplitter, Resync, StreamError, TelemetryFrame

logger = logging.getLogger(__name__)

FrameSink = Callable[[TelemetryFrame], None]


@dataclass(frozen=True)
class GapRecord:
    device_id: str
    after_seq: int
    missing_count: int
    detected_at: float = 0.0


class Stale(NamedTuple):
    seq: int
    last_seq: int


def check_gap(last_seq: int, seq: int, device_id: str = "") -> GapRecord | Stale | None:
    """Classify ``seq`` against the last accepted sequence number.

    ``None`` when contiguous, a :class:`GapRecord` when frames are missing,
    :class:`Stale` for duplicates or reordering (the frame is discarded).
    """
    if seq == last_seq + 1:
        return None
    if seq > last_seq + 1:
        return GapRecord(device_id, last_seq, seq - last_seq - 1, wall_time())
    return Stale(seq, last_seq)


@dataclass
class Session:
    device_id: str
    started: float
    peer: str = ""
    last_seq: int = -1
    frames_ok: int = 0
    frames_rejected: int = 0
    stale: int = 0
    gaps: int = 0
    missing: int = 0
    superseded: bool = False
    closed: bool = False


@dataclass
class DeviceStats:
    frames_ok: int = 0
    frames_rejected: int = 0
    stale: int = 0
    gaps: int = 0
    missing: int = 0
    persisted: int = 0
    forwarded: int = 0
    samples: int = 0
    sessions: int = 0


@dataclass
class _Conn:
    peer: str
    writer: asyncio.StreamWriter
    session: Session | None = None
    resyncs: int = 0
    errors: int = 0
    paused: bool = False


class IngestService:
    """Accepts device connections and runs each frame through
    validate -> gap check -> persist -> forward.

    A newer connection for a device supersedes the older one: the old
    connection is closed and anything it still delivers is dropped.  All
    handlers run on one event loop, so per-device writes never interleave.
    """

    def __init__(self, store: SeriesStore, sink: FrameSink | None = None, host: str = "127.0.0.1", port: int = 0):
        self.store = store
        self.sink = sink
        self.host = host
        self.port = port
        self.stats: dict[str, DeviceStats] = {}
        self.gap_log: list[GapRecord] = []
        self.connection_errors = 0
        self._active: dict[str, _Conn] = {}
        self._last_session: dict[str, Session] = {}
        self._tasks: set[asyncio.Task] = set()
        self._server: asyncio.base_events.Server | None = None

    @property
    def address(self) -> tuple[str, int]:
        return self.host, self.port

    async def start(self) -> None:
        self._server = await asyncio.start_server(self._on_connect, self.host, self.port)
        self.port = self._server.sockets[0].getsockname()[1]
        log_event(logger, "service_listen", host=self.host, port=self.port)

    async def stop(self, timeout: float = 5.0) -> None:
        """Stop accepting, let open connections drain for ``timeout`` seconds,
        then cut them off and flush."""
        if self._server is not None:
            self._server.close()
            self._server = None
        if self._tasks:
            _, pending = await asyncio.wait(set(self._tasks), timeout=timeout)
            for task in pending:
                task.cancel()
            if pending:
                await asyncio.gather(*pending, return_exceptions=True)
        flush = getattr(self.sink, "flush", None)
        if callable(flush):
            flush()
        log_event(logger, "service_stop", devices=len(self.stats))

    def _on_connect(self, reader: asyncio.StreamReader, writer: asyncio.StreamWriter) -> None:
        task = asyncio.ensure_future(self._handle(reader, writer))
        self._tasks.add(task)
        task.add_done_callback(self._tasks.discard)

    async def _handle(self, reader: asyncio.StreamReader, writer: asyncio.StreamWriter) -> None:
        peer = "%s:%s" % writer.get_extra_info("peername", ("?", "?"))[:2]
        conn = _Conn(peer, writer)
        splitter = FrameSplitter()
        try:
            while not conn.paused:
                data = await reader.read(65536)
                if not data:
                    for item in splitter.close():
                        self._on_item(conn, item)
                    break
                for item in splitter.feed(data):
                    self._on_item(conn, item)
                    if conn.paused:
                        break
        except (ConnectionError, asyncio.IncompleteReadError) as exc:
            self.connection_errors += 1
            log_event(logger, "connection_error", logging.WARNING, peer=peer, error=str(exc))
        except asyncio.CancelledError:
            log_event(logger, "connection_cancelled", peer=peer)
        except Exception:  # isolate one bad client from the rest
            self.connection_errors += 1
            logger.exception("connection handler failed", extra={"fields": {"peer": peer}})
        finally:
            self._close_session(conn)
            writer.close()

    def _on_item(self, conn: _Conn, item) -> None:
        if conn.session is not None and conn.session.superseded:
            return
        if isinstance(item, Resync):
            conn.resyncs += 1
            log_event(logger, "resync", logging.WARNING, peer=conn.peer, offset=item.offset, skipped=item.skipped)
            return
        if isinstance(item, StreamError):
            conn.errors += 1
            if conn.session is not None:
                conn.session.frames_rejected += 1
                self._stats(conn.session.device_id).frames_rejected += 1
            log_event(
                logger, "reject", logging.WARNING, peer=conn.peer, offset=item.offset, reason=item.error.code
            )
            return
        self._on_frame(conn, item)

    def _stats(self, device: str) -> DeviceStats:
        st = self.stats.get(device)
        if st is None:
            st = self.stats[device] = DeviceStats()
        return st

    def _open_session(self, conn: _Conn, frame: TelemetryFrame) -> Session:
        device = frame.device_hex
        old = self._active.get(device)
        if old is not None and old is not conn:
            if old.session is not None:
                old.session.superseded = True
            old.writer.close()
            log_event(logger, "session_superseded", device_id=device, old_peer=old.peer, new_peer=conn.peer)
        session = Session(device, wall_time(), conn.peer)
        prev = self._last_session.get(device)
        if prev is not None and frame.seq > prev.last_seq:
            # reconnect mid-run: keep counting from where the old link stopped
            session.last_seq = prev.last_seq
        self._active[device] = conn
        self._last_session[device] = session
        conn.session = session
        self._stats(device).sessions += 1
        log_event(logger, "session_open", device_id=device, peer=conn.peer, first_seq=frame.seq)
        return session

    def _close_session(self, conn: _Conn) -> None:
        s = conn.session
        if s is None or s.closed:
            return
        s.closed = True
        if self._active.get(s.device_id) is conn:
            del self._active[s.device_id]
        log_event(
            logger,
            "session_close",
            device_id=s.device_id,
            peer=conn.peer,
            frames_ok=s.frames_ok,
            frames_rejected=s.frames_rejected,
            gaps=s.gaps,
            missing=s.missing,
            stale=s.stale,
            superseded=s.superseded,
        )

    def _on_frame(self, conn: _Conn, frame: TelemetryFrame) -> None:
        session = conn.session
        if session is None:
            session = self._open_session(conn, frame)
        elif frame.device_hex != session.device_id:
            session.frames_rejected += 1
            self._stats(session.device_id).frames_rejected += 1
            log_event(logger, "reject", logging.WARNING, peer=conn.peer, reason="device_mismatch", device_id=frame.device_hex)
            return
        st = self._stats(session.device_id)

        verdict = check_gap(session.last_seq, frame.seq, session.device_id)
        if isinstance(verdict, Stale):
            session.stale += 1
            st.stale += 1
            log_event(logger, "stale", logging.WARNING, device_id=session.device_id, seq=frame.seq, last_seq=session.last_seq)
            return

        try:
            self.store.append(frame.device_id, EcgSampleBatch.from_frame(frame))
        except OutOfOrder as exc:
            session.frames_rejected += 1
            st.frames_rejected += 1
            log_event(logger, "reject", logging.WARNING, device_id=session.device_id, seq=frame.seq, reason="out_of_order", detail=str(exc))
            return
        except (StoreFull, StoreError, OSError) as exc:
            session.frames_rejected += 1
            st.frames_rejected += 1
            conn.paused = True
            log_event(logger, "store_error", logging.ERROR, device_id=session.device_id, seq=frame.seq, error=str(exc))
            return

        if verdict is not None:
            session.gaps += 1
            session.missing += verdict.missing_count
            st.gaps += 1
            st.missing += verdict.missing_count
            self.gap_log.append(verdict)
            log_event(logger, "gap", logging.WARNING, device_id=verdict.device_id, after_seq=verdict.after_seq, missing=verdict.missing_count)
        session.last_seq = frame.seq
        session.frames_ok += 1
        st.frames_ok += 1
        st.persisted += 1
        st.samples += frame.n

        if self.sink is not None:
            try:
                self.sink(frame)
            except Exception:
                logger.exception("analysis sink failed", extra={"fields": {"device_id": session.device_id}})
                return
            st.forwarded += 1


@dataclass
class ServiceHandle:
    """A service running on its own event-loop thread."""

    service: IngestService
    loop: asyncio.AbstractEventLoop
    thread: threading.Thread
    _stopped: bool = field(default=False, repr=False)

    @property
    def address(self) -> tuple[str, int]:
        return self.service.address

    def stop(self, timeout: float = 5.0) -> None:
        if self._stopped:
            return
        self._stopped = True
        fut = asyncio.run_coroutine_threadsafe(self.service.stop(timeout), self.loop)
        fut.result(timeout + 10)
        self.loop.call_soon_threadsafe(self.loop.stop)
        self.thread.join()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.stop()


def serve(address: tuple[str, int], store: SeriesStore, sink: FrameSink | None = None) -> ServiceHandle:
    """Start the ingestion service in a background thread and return once it is listening.

    Raises ``OSError`` if the address cannot be bound.
    """
    service = IngestService(store, sink, address[0], address[1])
    loop = asyncio.new_event_loop()
    ready = threading.Event()
    failure: list[BaseException] = []

    def run() -> None:
        asyncio.set_event_loop(loop)
        try:
            loop.run_until_complete(service.start())
        except BaseException as exc:
            failure.append(exc)
            ready.set()
            loop.close()
            return
        ready.set()
        loop.run_forever()
        loop.close()

    thread = threading.Thread(target=run, name="ingest-service", daemon=True)
    thread.start()
    ready.wait()
    if failure:
        thread.join()
        raise failure[0]
    return ServiceHandle(service, loop, thread)
