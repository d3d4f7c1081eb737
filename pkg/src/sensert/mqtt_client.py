"""Small asyncio MQTT-subset client used by bridges, simulators and verticles."""

from __future__ import annotations

import asyncio
import itertools
import logging
import uuid
from typing import Awaitable, Callable, Optional

from . import wire

log = logging.getLogger(__name__)

MessageHandler = Callable[[str, bytes, bool], Optional[Awaitable[None]]]


class MqttError(ConnectionError):
    pass


_CLOSED = object()  # queue sentinel so blocked consumers observe disconnects


class MqttClient:
    """QoS-0 clean-session client over plaintext TCP.

    Incoming publishes go to the ``on_message`` callback when given, else to
    an internal queue drained via :meth:`next_message`.
    """

    def __init__(self, reader: asyncio.StreamReader, writer: asyncio.StreamWriter,
                 client_id: str, keep_alive_s: int, on_message: MessageHandler | None):
        self._reader = reader
        self._writer = writer
        self.client_id = client_id
        self._keep_alive_s = keep_alive_s
        self._on_message = on_message
        self._queue: asyncio.Queue[tuple[str, bytes, bool]] = asyncio.Queue(maxsize=65536)
        self._pending: dict[int, asyncio.Future] = {}
        self._packet_ids = itertools.cycle(range(1, 0x10000))
        self._closed = asyncio.Event()
        self._tasks: list[asyncio.Task] = []

    @classmethod
    async def connect(cls, host: str, port: int, client_id: str | None = None,
                      keep_alive_s: int = 60, on_message: MessageHandler | None = None,
                      timeout: float = 5.0) -> "MqttClient":
        reader, writer = await asyncio.wait_for(asyncio.open_connection(host, port), timeout)
        client = cls(reader, writer, client_id or f"c-{uuid.uuid4().hex[:10]}",
                     keep_alive_s, on_message)
        writer.write(wire.encode_packet(wire.Connect(client.client_id, keep_alive_s=keep_alive_s)))
        await writer.drain()
        pkt = await asyncio.wait_for(client._read_packet(), timeout)
        if not isinstance(pkt, wire.Connack):
            writer.close()
            raise MqttError(f"expected CONNACK, got {pkt!r}")
        if pkt.return_code != 0:
            writer.close()
            raise MqttError(f"connection refused, return code {pkt.return_code}")
        client._tasks.append(asyncio.create_task(client._read_loop()))
        if keep_alive_s > 0:
            client._tasks.append(asyncio.create_task(client._ping_loop()))
        return client

    @property
    def closed(self) -> bool:
        return self._closed.is_set()

    def inbound_pending(self) -> int:
        return self._queue.qsize()

    async def wait_closed(self) -> None:
        await self._closed.wait()

    async def publish(self, topic: str, payload: bytes, retain: bool = False) -> None:
        self.publish_nowait(topic, payload, retain)
        try:
            await self._writer.drain()
        except (ConnectionError, OSError) as exc:
            self._shutdown()
            raise MqttError(str(exc)) from exc

    def publish_nowait(self, topic: str, payload: bytes, retain: bool = False) -> None:
        """Queue the frame on the transport without awaiting backpressure.

        No suspension point, so callers that must pair a send with local
        bookkeeping cannot be cancelled between the two.
        """
        if self.closed:
            raise MqttError("client is closed")
        self._writer.write(wire.encode_packet(wire.Publish(topic, bytes(payload), retain)))

    async def subscribe(self, filters: list[str], timeout: float = 5.0) -> list[int]:
        pid = next(self._packet_ids)
        fut: asyncio.Future = asyncio.get_running_loop().create_future()
        self._pending[pid] = fut
        self._writer.write(wire.encode_packet(wire.Subscribe(pid, tuple(filters))))
        await self._writer.drain()
        suback = await asyncio.wait_for(fut, timeout)
        return list(suback.granted)

    async def unsubscribe(self, filters: list[str], timeout: float = 5.0) -> None:
        pid = next(self._packet_ids)
        fut: asyncio.Future = asyncio.get_running_loop().create_future()
        self._pending[pid] = fut
        self._writer.write(wire.encode_packet(wire.Unsubscribe(pid, tuple(filters))))
        await self._writer.drain()
        await asyncio.wait_for(fut, timeout)

    async def next_message(self, timeout: float | None = None) -> tuple[str, bytes, bool]:
        """(topic, payload, retain) of the next publish; only without on_message.

        Raises MqttError once the connection is closed and the queue drained.
        """
        if self.closed and self._queue.empty():
            raise MqttError("connection closed")
        if timeout is None:
            item = await self._queue.get()
        else:
            item = await asyncio.wait_for(self._queue.get(), timeout)
        if item is _CLOSED:
            raise MqttError("connection closed")
        return item

    async def close(self) -> None:
        if not self.closed:
            try:
                self._writer.write(wire.encode_packet(wire.Disconnect()))
                await self._writer.drain()
            except (ConnectionError, OSError):
                pass
        self._shutdown()
        me = asyncio.current_task()
        for t in self._tasks:
            if t is not me:
                t.cancel()
        await asyncio.gather(*(t for t in self._tasks if t is not me), return_exceptions=True)

    # --- internals ---------------------------------------------------------

    async def _read_packet(self) -> wire.Packet:
        buf = bytearray()
        while True:
            result = wire.decode_packet(buf)
            if result is not None:
                pkt, consumed = result
                del buf[:consumed]
                self._pushback = bytes(buf)
                return pkt
            chunk = await self._reader.read(4096)
            if not chunk:
                raise MqttError("connection closed during handshake")
            buf += chunk

    async def _read_loop(self) -> None:
        buf = bytearray(getattr(self, "_pushback", b""))
        try:
            while True:
                result = wire.decode_packet(buf)
                if result is None:
                    chunk = await self._reader.read(4096)
                    if not chunk:
                        break
                    buf += chunk
                    continue
                pkt, consumed = result
                del buf[:consumed]
                await self._dispatch(pkt)
        except (ConnectionError, OSError, asyncio.IncompleteReadError):
            pass
        except wire.MalformedPacket as exc:
            log.warning("client %s: malformed frame from broker: %s", self.client_id, exc)
        except asyncio.CancelledError:
            raise
        finally:
            self._shutdown()

    async def _dispatch(self, pkt: wire.Packet) -> None:
        if isinstance(pkt, wire.Publish):
            if self._on_message is not None:
                res = self._on_message(pkt.topic, pkt.payload, pkt.retain)
                if asyncio.iscoroutine(res):
                    await res
            else:
                try:
                    self._queue.put_nowait((pkt.topic, pkt.payload, pkt.retain))
                except asyncio.QueueFull:
                    log.warning("client %s: inbound queue full, dropping", self.client_id)
        elif isinstance(pkt, (wire.Suback, wire.Unsuback)):
            fut = self._pending.pop(pkt.packet_id, None)
            if fut is not None and not fut.done():
                fut.set_result(pkt)
        elif isinstance(pkt, wire.Pingresp):
            pass
        else:
            log.debug("client %s: ignoring %r", self.client_id, pkt)

    async def _ping_loop(self) -> None:
        interval = max(self._keep_alive_s / 2, 0.5)
        try:
            while not self.closed:
                await asyncio.sleep(interval)
                self._writer.write(wire.encode_packet(wire.Pingreq()))
                await self._writer.drain()
        except (ConnectionError, OSError):
            self._shutdown()
        except asyncio.CancelledError:
            raise

    def _shutdown(self) -> None:
        if not self._closed.is_set():
            self._closed.set()
            for fut in self._pending.values():
                if not fut.done():
                    fut.set_exception(MqttError("connection closed"))
            self._pending.clear()
            try:
                # a blocked consumer is only possible with an empty queue,
                # so the sentinel always lands when it matters
                self._queue.put_nowait(_CLOSED)
            except asyncio.QueueFull:
                pass
            try:
                self._writer.close()
            except Exception:
                pass
