"""Minimal RFC 6455 websocket support (text frames) over asyncio streams.

Just enough for the in-process gateway emulation: HTTP upgrade handshake,
text/ping/pong/close frames, client-side masking. Both endpoints in this
system are ours, so extensions and fragmentation are not implemented.
"""

from __future__ import annotations

import asyncio
import base64
import hashlib
import os
import struct

_GUID = "258EAFA5-E914-47DA-95CA-C5AB0DC85B11"

OP_TEXT = 0x1
OP_CLOSE = 0x8
OP_PING = 0x9
OP_PONG = 0xA


class WsError(ConnectionError):
    pass


def _accept_key(key: str) -> str:
    digest = hashlib.sha1((key + _GUID).encode("ascii")).digest()
    return base64.b64encode(digest).decode("ascii")


def _encode_frame(opcode: int, payload: bytes, mask: bool) -> bytes:
    head = bytearray([0x80 | opcode])
    n = len(payload)
    mask_bit = 0x80 if mask else 0x00
    if n < 126:
        head.append(mask_bit | n)
    elif n < 1 << 16:
        head.append(mask_bit | 126)
        head += struct.pack(">H", n)
    else:
        head.append(mask_bit | 127)
        head += struct.pack(">Q", n)
    if mask:
        key = os.urandom(4)
        head += key
        payload = bytes(b ^ key[i % 4] for i, b in enumerate(payload))
    return bytes(head) + payload


class WsConnection:
    def __init__(self, reader: asyncio.StreamReader, writer: asyncio.StreamWriter,
                 client_side: bool):
        self._reader = reader
        self._writer = writer
        self._client_side = client_side
        self.closed = False

    async def send_text(self, text: str) -> None:
        await self._send(OP_TEXT, text.encode("utf-8"))

    def send_text_nowait(self, text: str) -> None:
        """Queue a text frame without awaiting backpressure."""
        if self.closed:
            raise WsError("websocket closed")
        self._writer.write(_encode_frame(OP_TEXT, text.encode("utf-8"),
                                         mask=self._client_side))

    async def _send(self, opcode: int, payload: bytes) -> None:
        if self.closed:
            raise WsError("websocket closed")
        self._writer.write(_encode_frame(opcode, payload, mask=self._client_side))
        try:
            await self._writer.drain()
        except (ConnectionError, OSError) as exc:
            self.closed = True
            raise WsError(str(exc)) from exc

    async def recv_text(self) -> str | None:
        """Next text payload, or None once the peer closes."""
        while True:
            frame = await self._recv_frame()
            if frame is None:
                return None
            opcode, payload = frame
            if opcode == OP_TEXT:
                return payload.decode("utf-8")
            if opcode == OP_PING:
                await self._send(OP_PONG, payload)
            elif opcode == OP_CLOSE:
                self.closed = True
                return None
            # pong and anything else: ignore

    async def _recv_frame(self) -> tuple[int, bytes] | None:
        try:
            head = await self._reader.readexactly(2)
        except (asyncio.IncompleteReadError, ConnectionError, OSError):
            self.closed = True
            return None
        opcode = head[0] & 0x0F
        masked = bool(head[1] & 0x80)
        n = head[1] & 0x7F
        try:
            if n == 126:
                n = struct.unpack(">H", await self._reader.readexactly(2))[0]
            elif n == 127:
                n = struct.unpack(">Q", await self._reader.readexactly(8))[0]
            key = await self._reader.readexactly(4) if masked else None
            payload = await self._reader.readexactly(n) if n else b""
        except (asyncio.IncompleteReadError, ConnectionError, OSError):
            self.closed = True
            return None
        if key is not None:
            payload = bytes(b ^ key[i % 4] for i, b in enumerate(payload))
        return opcode, payload

    async def close(self) -> None:
        if not self.closed:
            try:
                await self._send(OP_CLOSE, b"")
            except WsError:
                pass
            self.closed = True
        try:
            self._writer.close()
        except Exception:
            pass


async def ws_connect(host: str, port: int, path: str = "/", timeout: float = 5.0) -> WsConnection:
    reader, writer = await asyncio.wait_for(asyncio.open_connection(host, port), timeout)
    key = base64.b64encode(os.urandom(16)).decode("ascii")
    request = (
        f"GET {path} HTTP/1.1\r\n"
        f"Host: {host}:{port}\r\n"
        "Upgrade: websocket\r\n"
        "Connection: Upgrade\r\n"
        f"Sec-WebSocket-Key: {key}\r\n"
        "Sec-WebSocket-Version: 13\r\n\r\n"
    )
    writer.write(request.encode("ascii"))
    await writer.drain()
    status = await asyncio.wait_for(reader.readline(), timeout)
    if b"101" not in status:
        writer.close()
        raise WsError(f"handshake rejected: {status!r}")
    accept = None
    while True:
        line = await asyncio.wait_for(reader.readline(), timeout)
        if line in (b"\r\n", b"\n", b""):
            break
        name, _, value = line.decode("latin-1").partition(":")
        if name.strip().lower() == "sec-websocket-accept":
            accept = value.strip()
    if accept != _accept_key(key):
        writer.close()
        raise WsError("bad Sec-WebSocket-Accept")
    return WsConnection(reader, writer, client_side=True)


async def ws_handshake_server(reader: asyncio.StreamReader,
                              writer: asyncio.StreamWriter) -> WsConnection:
    request_line = await reader.readline()
    if not request_line.startswith(b"GET"):
        raise WsError(f"not a websocket upgrade: {request_line!r}")
    key = None
    while True:
        line = await reader.readline()
        if line in (b"\r\n", b"\n", b""):
            break
        name, _, value = line.decode("latin-1").partition(":")
        if name.strip().lower() == "sec-websocket-key":
            key = value.strip()
    if key is None:
        raise WsError("missing Sec-WebSocket-Key")
    response = (
        "HTTP/1.1 101 Switching Protocols\r\n"
        "Upgrade: websocket\r\n"
        "Connection: Upgrade\r\n"
        f"Sec-WebSocket-Accept: {_accept_key(key)}\r\n\r\n"
    )
    writer.write(response.encode("ascii"))
    await writer.drain()
    return WsConnection(reader, writer, client_side=False)
