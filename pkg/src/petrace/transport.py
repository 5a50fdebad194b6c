"""Wire messages and the simulated anonymizing channels.

Every message is ``kind (1 byte) | version (1 byte) | body``. Body fields are
laid out in declaration order: fixed-width big-endian integers, IEEE-754
big-endian doubles, and byte strings prefixed with a 16-bit length. Token
lists carry a 32-bit count followed by length-prefixed tokens.
"""

from __future__ import annotations

import enum
import heapq
import struct
from dataclasses import dataclass, field, fields
from typing import Callable, ClassVar

from .crypto import AuthToken, PetToken

WIRE_VERSION = 1


class WireError(ValueError):
    pass


class Kind(enum.IntEnum):
    REGISTER = 0x01
    REGISTER_OK = 0x02
    UPLOAD = 0x03
    UPLOAD_ACK = 0x04
    ESR_REQ = 0x05
    ESR_REP = 0x06
    TEST_RESULT = 0x07
    STATELESS_ESR = 0x08
    STATELESS_REP = 0x09
    TEST_RESULT_ACK = 0x0A
    ERROR = 0x0B


class Status(enum.IntEnum):
    NOT_AT_RISK = 0x00
    AT_RISK = 0x01
    RATE_LIMITED = 0x02
    AUTH_FAILURE = 0x03
    INVALID_TOKEN = 0x04
    TOKEN_REUSED = 0x05
    UNKNOWN_ID = 0x06
    MALFORMED = 0x07

    OK = 0x00


@dataclass(frozen=True)
class Message:
    KIND: ClassVar[Kind]
    SCHEMA: ClassVar[tuple[str, ...]]


@dataclass(frozen=True)
class Register(Message):
    KIND = Kind.REGISTER
    SCHEMA = ("auth",)
    token: AuthToken


@dataclass(frozen=True)
class RegisterOk(Message):
    KIND = Kind.REGISTER_OK
    SCHEMA = ("bytes", "bytes")
    id: bytes
    ek: bytes


@dataclass(frozen=True)
class Upload(Message):
    KIND = Kind.UPLOAD
    SCHEMA = ("pet", "u32", "u32", "auth")
    pet: PetToken
    day: int
    duration: int
    token: AuthToken


@dataclass(frozen=True)
class UploadAck(Message):
    KIND = Kind.UPLOAD_ACK
    SCHEMA = ("u8",)
    status: int


@dataclass(frozen=True)
class EsrReq(Message):
    KIND = Kind.ESR_REQ
    SCHEMA = ("bytes", "bytes", "pets")
    id: bytes
    ek: bytes
    tokens: tuple


@dataclass(frozen=True)
class EsrRep(Message):
    KIND = Kind.ESR_REP
    SCHEMA = ("u8",)
    status: int


@dataclass(frozen=True)
class TestResult(Message):
    __test__ = False  # not a pytest class
    KIND = Kind.TEST_RESULT
    SCHEMA = ("bytes", "bytes", "u8", "auth")
    id: bytes
    ek: bytes
    positive: int
    token: AuthToken


@dataclass(frozen=True)
class TestResultAck(Message):
    __test__ = False
    KIND = Kind.TEST_RESULT_ACK
    SCHEMA = ("u8",)
    status: int


@dataclass(frozen=True)
class StatelessEsr(Message):
    KIND = Kind.STATELESS_ESR
    SCHEMA = ("u32", "u32", "auth", "pets")
    key_day: int
    query_day: int
    token: AuthToken
    tokens: tuple


@dataclass(frozen=True)
class StatelessRep(Message):
    KIND = Kind.STATELESS_REP
    SCHEMA = ("u8", "f64")
    status: int
    score: float


@dataclass(frozen=True)
class Error(Message):
    KIND = Kind.ERROR
    SCHEMA = ("u8",)
    status: int


MESSAGE_TYPES: dict[int, type[Message]] = {
    cls.KIND: cls for cls in (Register, RegisterOk, Upload, UploadAck, EsrReq, EsrRep,
                              TestResult, TestResultAck, StatelessEsr, StatelessRep, Error)
}


def _put_bytes(out: bytearray, data: bytes) -> None:
    if len(data) > 0xFFFF:
        raise WireError("byte string too long")
    out += struct.pack(">H", len(data)) + data


def encode(msg: Message) -> bytes:
    out = bytearray([msg.KIND, WIRE_VERSION])
    for ftype, f in zip(msg.SCHEMA, fields(msg)):
        value = getattr(msg, f.name)
        if ftype == "u8":
            out += struct.pack(">B", value)
        elif ftype == "u32":
            out += struct.pack(">I", value)
        elif ftype == "f64":
            out += struct.pack(">d", value)
        elif ftype == "bytes":
            _put_bytes(out, value)
        elif ftype == "pet":
            _put_bytes(out, value.value)
        elif ftype == "pets":
            out += struct.pack(">I", len(value))
            for pet in value:
                _put_bytes(out, pet.value)
        elif ftype == "auth":
            _put_bytes(out, value.R)
            _put_bytes(out, value.sigma.to_bytes((value.sigma.bit_length() + 7) // 8 or 1, "big"))
    return bytes(out)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise WireError("truncated message")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))[0]

    def bytestring(self) -> bytes:
        return self.take(self.unpack(">H"))


def decode(data: bytes) -> Message:
    if len(data) < 2:
        raise WireError("truncated header")
    try:
        cls = MESSAGE_TYPES[data[0]]
    except KeyError:
        raise WireError(f"unknown message kind 0x{data[0]:02X}") from None
    if data[1] != WIRE_VERSION:
        raise WireError(f"unsupported wire version {data[1]}")
    r = _Reader(data[2:])
    values = []
    for ftype in cls.SCHEMA:
        if ftype == "u8":
            values.append(r.unpack(">B"))
        elif ftype == "u32":
            values.append(r.unpack(">I"))
        elif ftype == "f64":
            values.append(r.unpack(">d"))
        elif ftype == "bytes":
            values.append(r.bytestring())
        elif ftype == "pet":
            values.append(_pet(r.bytestring()))
        elif ftype == "pets":
            values.append(tuple(_pet(r.bytestring()) for _ in range(r.unpack(">I"))))
        elif ftype == "auth":
            R = r.bytestring()
            values.append(AuthToken(R, int.from_bytes(r.bytestring(), "big")))
    if r.pos != len(r.data):
        raise WireError(f"{len(r.data) - r.pos} trailing bytes")
    return cls(*values)


def _pet(raw: bytes) -> PetToken:
    try:
        return PetToken(raw)
    except ValueError as exc:
        raise WireError(str(exc)) from None


# -- channels -----------------------------------------------------------------

class ProxyChannel:
    """Request/reply relay that hides the sender from the server.

    The server endpoint is called with raw bytes only. The channel keeps the
    return path to the caller, which the server code never sees.
    """

    def __init__(self, endpoint: Callable[[bytes], bytes], rng=None, drop_rate: float = 0.0):
        self.endpoint = endpoint
        self.rng = rng
        self.drop_rate = drop_rate
        self.sent = 0
        self.dropped = 0

    def request(self, msg: Message) -> Message | None:
        self.sent += 1
        if self.drop_rate and self.rng.random() < self.drop_rate:
            self.dropped += 1
            return None
        return decode(self.endpoint(encode(msg)))


def proxy_send(channel: ProxyChannel, msg: Message) -> Message | None:
    return channel.request(msg)


@dataclass(order=True)
class _Pending:
    deliver_at: int
    tiebreak: float
    seq: int
    payload: bytes = field(compare=False)


class MixChannel:
    """Delays each upload independently so batches interleave on arrival.

    Delays are drawn i.i.d. uniform over ``[0, delay_max_sec]`` seconds of
    virtual time. With mixing disabled, messages are delivered immediately
    and in submission order.
    """

    def __init__(self, endpoint: Callable[[bytes], bytes], rng, delay_max_sec: int = 6 * 3600,
                 enabled: bool = True):
        self.endpoint = endpoint
        self.rng = rng
        self.delay_max_sec = delay_max_sec
        self.enabled = enabled
        self._queue: list[_Pending] = []
        self._seq = 0
        self.delivered = 0
        self.replies: list[Message] = []

    def __len__(self) -> int:
        return len(self._queue)

    def submit(self, msgs: list[Message], now: int) -> None:
        for msg in msgs:
            if self.enabled:
                at = now + self.rng.randint(0, self.delay_max_sec)
                tiebreak = self.rng.random()
            else:
                at, tiebreak = now, 0.0
            heapq.heappush(self._queue, _Pending(at, tiebreak, self._seq, encode(msg)))
            self._seq += 1

    def next_delivery(self) -> int | None:
        return self._queue[0].deliver_at if self._queue else None

    def deliver_due(self, now: int) -> int:
        count = 0
        while self._queue and self._queue[0].deliver_at <= now:
            item = heapq.heappop(self._queue)
            self.replies.append(decode(self.endpoint(item.payload)))
            count += 1
        self.delivered += count
        return count

    def flush(self) -> int:
        if not self._queue:
            return 0
        return self.deliver_due(max(p.deliver_at for p in self._queue))


def mix_send(channel: MixChannel, batches: list[list[Message]], now: int) -> None:
    """Submit several uploaders' batches; arrival order is set by the delays."""
    for batch in batches:
        channel.submit(batch, now)
