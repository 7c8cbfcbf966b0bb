"""Framed binary protocol between environment servers and actors.

Frame layout: u32 little-endian payload length (counting the type byte),
one type byte, then the payload. Arrays travel as dtype code (0=u8, 1=i64,
2=f32), ndim, u32 dims, then raw little-endian row-major data. The server
speaks first: HELLO describing the environment, then an initial STEP with
done=true marking the episode boundary; afterwards ACTION and STEP frames
strictly alternate until BYE or an ERROR.
"""
from __future__ import annotations

import logging
import socket
import struct
import threading
from dataclasses import dataclass
from typing import Optional, Union

import numpy as np

from .rollout import EnvOutput

log = logging.getLogger(__name__)

MSG_HELLO = 0x01
MSG_STEP = 0x02
MSG_ACTION = 0x03
MSG_BYE = 0x04
MSG_ERROR = 0x05

ERR_INVALID_ACTION = 1
ERR_PROTOCOL = 2
ERR_CAPACITY = 3

PROTOCOL_VERSION = 1
MAX_FRAME_BYTES = 64 * 1024 * 1024

DTYPE_BY_CODE = {0: np.dtype(np.uint8), 1: np.dtype(np.int64), 2: np.dtype(np.float32)}
CODE_BY_DTYPE = {v: k for k, v in DTYPE_BY_CODE.items()}


class ProtocolError(Exception):
    """Malformed frame or a violation of the session contract."""


@dataclass(frozen=True)
class Hello:
    protocol_version: int
    obs_dtype_code: int
    obs_dims: tuple[int, ...]
    num_actions: int


@dataclass(frozen=True)
class Step:
    observation: np.ndarray
    reward: float
    done: bool
    episode_step: int
    episode_return: float


@dataclass(frozen=True)
class Action:
    value: int


@dataclass(frozen=True)
class Bye:
    pass


@dataclass(frozen=True)
class Error:
    code: int
    message: str


WireMessage = Union[Hello, Step, Action, Bye, Error]


def encode_array(arr: np.ndarray) -> bytes:
    dtype = np.dtype(arr.dtype)
    if dtype not in CODE_BY_DTYPE:
        raise ProtocolError(f"dtype {dtype} is not a wire dtype")
    if arr.ndim > 255:
        raise ProtocolError(f"too many dims: {arr.ndim}")
    header = struct.pack(
        f"<BB{arr.ndim}I", CODE_BY_DTYPE[dtype], arr.ndim, *arr.shape
    )
    data = np.ascontiguousarray(arr).astype(dtype.newbyteorder("<"), copy=False)
    return header + data.tobytes()


def _decode_array(payload: memoryview, offset: int) -> tuple[np.ndarray, int]:
    if len(payload) - offset < 2:
        raise ProtocolError("truncated array header")
    code, ndim = struct.unpack_from("<BB", payload, offset)
    offset += 2
    if code not in DTYPE_BY_CODE:
        raise ProtocolError(f"unknown dtype code {code}")
    if len(payload) - offset < 4 * ndim:
        raise ProtocolError("truncated array dims")
    dims = struct.unpack_from(f"<{ndim}I", payload, offset)
    offset += 4 * ndim
    dtype = DTYPE_BY_CODE[code]
    count = 1
    for d in dims:
        count *= d
    nbytes = count * dtype.itemsize
    if nbytes > MAX_FRAME_BYTES:
        raise ProtocolError(f"array of {nbytes} bytes exceeds frame limit")
    if len(payload) - offset < nbytes:
        raise ProtocolError("truncated array data")
    arr = np.frombuffer(payload[offset : offset + nbytes], dtype=dtype.newbyteorder("<"))
    # no-op on little-endian hosts; byte-swapping copy otherwise
    arr = arr.astype(dtype, copy=False).reshape(dims)
    return arr, offset + nbytes


def encode_frame(msg: WireMessage) -> bytes:
    if isinstance(msg, Hello):
        if msg.num_actions < 1:
            raise ProtocolError(f"num_actions must be >= 1, got {msg.num_actions}")
        msg_type = MSG_HELLO
        payload = struct.pack("<IBB", msg.protocol_version, msg.obs_dtype_code, len(msg.obs_dims))
        payload += struct.pack(f"<{len(msg.obs_dims)}I", *msg.obs_dims)
        payload += struct.pack("<I", msg.num_actions)
    elif isinstance(msg, Step):
        msg_type = MSG_STEP
        payload = encode_array(msg.observation)
        payload += struct.pack(
            "<fBqf", msg.reward, 1 if msg.done else 0, msg.episode_step, msg.episode_return
        )
    elif isinstance(msg, Action):
        # scalar i64 array frame, fused into one pack (hot path)
        return struct.pack("<IBBBq", 11, MSG_ACTION, 1, 0, msg.value)
    elif isinstance(msg, Bye):
        msg_type = MSG_BYE
        payload = b""
    elif isinstance(msg, Error):
        msg_type = MSG_ERROR
        payload = struct.pack("<I", msg.code) + msg.message.encode("utf-8")
    else:
        raise ProtocolError(f"cannot encode {type(msg).__name__}")
    length = 1 + len(payload)
    if length > MAX_FRAME_BYTES:
        raise ProtocolError(f"frame of {length} bytes exceeds limit")
    return struct.pack("<I", length) + bytes([msg_type]) + payload


def decode_frame(frame: bytes) -> WireMessage:
    """Strict inverse of encode_frame over one complete frame."""
    if len(frame) < 5:
        raise ProtocolError(f"frame too short: {len(frame)} bytes")
    (length,) = struct.unpack_from("<I", frame, 0)
    if length > MAX_FRAME_BYTES:
        raise ProtocolError(f"declared length {length} exceeds limit")
    if len(frame) != 4 + length:
        raise ProtocolError(
            f"declared payload length {length}, frame carries {len(frame) - 4}"
        )
    msg_type = frame[4]
    payload = memoryview(frame)[5:]
    if msg_type == MSG_HELLO:
        if len(payload) < 6:
            raise ProtocolError("truncated HELLO")
        version, code, ndim = struct.unpack_from("<IBB", payload, 0)
        offset = 6
        if code not in DTYPE_BY_CODE:
            raise ProtocolError(f"unknown dtype code {code}")
        if len(payload) - offset < 4 * ndim + 4:
            raise ProtocolError("truncated HELLO dims")
        dims = struct.unpack_from(f"<{ndim}I", payload, offset)
        offset += 4 * ndim
        (num_actions,) = struct.unpack_from("<I", payload, offset)
        offset += 4
        if offset != len(payload):
            raise ProtocolError("trailing bytes in HELLO")
        if num_actions < 1:
            raise ProtocolError(f"num_actions must be >= 1, got {num_actions}")
        return Hello(version, code, tuple(dims), num_actions)
    if msg_type == MSG_STEP:
        obs, offset = _decode_array(payload, 0)
        if len(payload) - offset != 17:
            raise ProtocolError("STEP trailer has wrong size")
        reward, done_byte, episode_step, episode_return = struct.unpack_from(
            "<fBqf", payload, offset
        )
        if done_byte not in (0, 1):
            raise ProtocolError(f"done byte must be 0 or 1, got {done_byte}")
        return Step(obs, reward, bool(done_byte), episode_step, episode_return)
    if msg_type == MSG_ACTION:
        arr, offset = _decode_array(payload, 0)
        if offset != len(payload):
            raise ProtocolError("trailing bytes in ACTION")
        if arr.dtype != np.int64 or arr.ndim != 0:
            raise ProtocolError(
                f"ACTION must be a scalar i64, got dtype {arr.dtype} ndim {arr.ndim}"
            )
        return Action(int(arr))
    if msg_type == MSG_BYE:
        if len(payload) != 0:
            raise ProtocolError("BYE carries no payload")
        return Bye()
    if msg_type == MSG_ERROR:
        if len(payload) < 4:
            raise ProtocolError("truncated ERROR")
        (code,) = struct.unpack_from("<I", payload, 0)
        try:
            message = bytes(payload[4:]).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise ProtocolError(f"ERROR message is not utf-8: {exc}") from exc
        return Error(code, message)
    raise ProtocolError(f"unknown msg_type 0x{msg_type:02X}")


def recv_exact(sock: socket.socket, n: int) -> Optional[bytes]:
    """Read exactly n bytes; None on clean EOF at a frame boundary."""
    chunks = []
    remaining = n
    while remaining > 0:
        chunk = sock.recv(remaining)
        if not chunk:
            if remaining == n:
                return None
            raise ProtocolError(f"connection closed mid-frame ({n - remaining}/{n} bytes)")
        chunks.append(chunk)
        remaining -= len(chunk)
    return b"".join(chunks)


class FrameReader:
    """Buffered frame reader over a socket.

    Accumulates into a persistent buffer, so a socket timeout raised
    mid-frame never loses data: the next call resumes where it left off.
    """

    def __init__(self, sock: socket.socket):
        self._sock = sock
        self._buf = bytearray()
        self._eof = False

    def _fill(self) -> None:
        chunk = self._sock.recv(65536)
        if not chunk:
            self._eof = True
            return
        self._buf.extend(chunk)

    def read_frame_raw(self) -> Optional[bytes]:
        """One complete frame's bytes; None on clean EOF at a boundary. May
        raise socket.timeout (safe to retry)."""
        while len(self._buf) < 4:
            if self._eof:
                if not self._buf:
                    return None
                raise ProtocolError("connection closed mid-frame")
            self._fill()
        (length,) = struct.unpack_from("<I", self._buf, 0)
        if length > MAX_FRAME_BYTES:
            raise ProtocolError(f"declared length {length} exceeds limit")
        total = 4 + length
        while len(self._buf) < total:
            if self._eof:
                raise ProtocolError("connection closed mid-frame")
            self._fill()
        frame = bytes(self._buf[:total])
        del self._buf[:total]
        return frame

    def read_frame(self) -> Optional[WireMessage]:
        """One frame; None on clean EOF at a frame boundary. May raise
        socket.timeout (safe to retry)."""
        raw = self.read_frame_raw()
        if raw is None:
            return None
        return decode_frame(raw)


def make_step_decoder(obs_dtype: np.dtype, obs_dims: tuple[int, ...]):
    """Per-session STEP parser exploiting the constant frame layout.

    Returns a function mapping a raw frame to a Step, or None when the frame
    is not a STEP of the declared shape (caller falls back to decode_frame).
    """
    dtype = np.dtype(obs_dtype)
    code = CODE_BY_DTYPE[dtype]
    ndim = len(obs_dims)
    count = 1
    for d in obs_dims:
        count *= d
    data_offset = 4 + 1 + 2 + 4 * ndim
    payload_len = 1 + 2 + 4 * ndim + count * dtype.itemsize + 17
    prefix = struct.pack(f"<IBBB{ndim}I", payload_len, MSG_STEP, code, ndim, *obs_dims)
    little = dtype.newbyteorder("<")
    trailer_offset = data_offset + count * dtype.itemsize

    def decode_step(raw: bytes) -> Optional[Step]:
        if len(raw) != 4 + payload_len or not raw.startswith(prefix):
            return None
        obs = np.frombuffer(raw, little, count, offset=data_offset)
        obs = obs.astype(dtype, copy=False).reshape(obs_dims)
        reward, done_byte, episode_step, episode_return = struct.unpack_from(
            "<fBqf", raw, trailer_offset
        )
        if done_byte not in (0, 1):
            return None
        return Step(obs, reward, bool(done_byte), episode_step, episode_return)

    return decode_step


def read_frame(sock: socket.socket) -> Optional[WireMessage]:
    """Read one frame; None on clean EOF before a length header."""
    header = recv_exact(sock, 4)
    if header is None:
        return None
    (length,) = struct.unpack("<I", header)
    if length > MAX_FRAME_BYTES:
        raise ProtocolError(f"declared length {length} exceeds limit")
    body = recv_exact(sock, length)
    if body is None:
        raise ProtocolError("connection closed after length header")
    return decode_frame(header + body)


def write_frame(sock: socket.socket, msg: WireMessage) -> None:
    sock.sendall(encode_frame(msg))


def make_step_encoder(obs_dtype: np.dtype, obs_dims: tuple[int, ...]):
    """Per-session STEP encoder with the constant frame prefix precomputed.

    Produces bytes identical to encode_frame(Step(...)) for observations of
    the declared shape and dtype (every STEP of a session, by contract).
    """
    dtype = np.dtype(obs_dtype)
    code = CODE_BY_DTYPE[dtype]
    ndim = len(obs_dims)
    count = 1
    for d in obs_dims:
        count *= d
    payload_len = 1 + 2 + 4 * ndim + count * dtype.itemsize + 17
    prefix = struct.pack(f"<IBBB{ndim}I", payload_len, MSG_STEP, code, ndim, *obs_dims)
    little = dtype.newbyteorder("<")

    def encode_step(out: EnvOutput) -> bytes:
        data = np.ascontiguousarray(out.observation).astype(little, copy=False)
        trailer = struct.pack(
            "<fBqf",
            out.reward,
            1 if out.done else 0,
            out.episode_step,
            out.episode_return,
        )
        return b"".join((prefix, data.tobytes(), trailer))

    return encode_step


def env_session(
    conn: socket.socket,
    env,
    stop_event: Optional[threading.Event] = None,
) -> None:
    """Serve one environment copy over one connection until BYE/EOF/stop.

    `env` is an episode-accounting wrapper exposing .spec, .initial() and
    .step(action). Sends HELLO, the initial STEP (done=true), then strictly
    alternates receive-ACTION / send-STEP with auto-reset on episode end.
    """
    spec = env.spec
    conn.settimeout(0.5)
    reader = FrameReader(conn)
    encode_step = make_step_encoder(spec.obs_dtype, tuple(spec.obs_dims))
    try:
        write_frame(
            conn,
            Hello(
                protocol_version=PROTOCOL_VERSION,
                obs_dtype_code=CODE_BY_DTYPE[np.dtype(spec.obs_dtype)],
                obs_dims=tuple(spec.obs_dims),
                num_actions=spec.num_actions,
            ),
        )
        conn.sendall(encode_step(env.initial()))
        while True:
            if stop_event is not None and stop_event.is_set():
                write_frame(conn, Bye())
                return
            try:
                msg = reader.read_frame()
            except socket.timeout:
                continue
            except ProtocolError as exc:
                log.debug("session protocol error: %s", exc)
                write_frame(conn, Error(ERR_PROTOCOL, str(exc)))
                return
            if msg is None or isinstance(msg, Bye):
                return
            if not isinstance(msg, Action):
                write_frame(
                    conn, Error(ERR_PROTOCOL, f"expected ACTION, got {type(msg).__name__}")
                )
                return
            if not 0 <= msg.value < spec.num_actions:
                write_frame(
                    conn,
                    Error(
                        ERR_INVALID_ACTION,
                        f"action {msg.value} outside [0, {spec.num_actions})",
                    ),
                )
                return
            conn.sendall(encode_step(env.step(msg.value)))
    except (OSError, ProtocolError) as exc:
        log.debug("session ended: %s", exc)
    finally:
        try:
            conn.close()
        except OSError:
            pass


def record_session(
    address: tuple[str, int], script: list[int], timeout: float = 10.0
) -> tuple[bytes, bytes, list[WireMessage]]:
    """Run a scripted client session, capturing both raw byte streams.

    Connects, reads HELLO and the initial STEP, then sends each scripted
    action and reads the STEP reply, and finally sends BYE. Returns
    (server_to_client_bytes, client_to_server_bytes, decoded server frames).
    """
    s2c = bytearray()
    c2s = bytearray()
    messages: list[WireMessage] = []
    with socket.create_connection(address, timeout=timeout) as sock:
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)

        def recv_one() -> WireMessage:
            header = recv_exact(sock, 4)
            if header is None:
                raise ProtocolError("server closed before frame")
            (length,) = struct.unpack("<I", header)
            body = recv_exact(sock, length)
            if body is None:
                raise ProtocolError("server closed mid-frame")
            s2c.extend(header + body)
            msg = decode_frame(header + body)
            messages.append(msg)
            return msg

        def send_one(msg: WireMessage) -> None:
            data = encode_frame(msg)
            c2s.extend(data)
            sock.sendall(data)

        hello = recv_one()
        if not isinstance(hello, Hello):
            raise ProtocolError(f"expected HELLO first, got {type(hello).__name__}")
        first = recv_one()
        if not isinstance(first, Step) or not first.done:
            raise ProtocolError("expected initial STEP with done=true")
        for action in script:
            send_one(Action(action))
            reply = recv_one()
            if not isinstance(reply, Step):
                raise ProtocolError(f"expected STEP, got {type(reply).__name__}")
        send_one(Bye())
    return bytes(s2c), bytes(c2s), messages
