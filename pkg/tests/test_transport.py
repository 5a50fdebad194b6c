import dataclasses
import random
import struct
from collections import Counter

import pytest
from hypothesis import given, settings, strategies as st

from petrace.crypto import AuthToken, PetToken
from petrace.transport import (
    EsrRep, EsrReq, Error, Kind, MixChannel, ProxyChannel, Register, RegisterOk, StatelessEsr,
    StatelessRep, Status, TestResult, TestResultAck, Upload, UploadAck, WireError, decode,
    encode, mix_send, proxy_send,
)

pets = st.binary(min_size=32, max_size=32).map(PetToken)
tokens = st.builds(AuthToken, st.binary(min_size=32, max_size=32),
                   st.integers(0, 2**2048 - 1))
u32 = st.integers(0, 2**32 - 1)
u8 = st.integers(0, 255)
small_bytes = st.binary(max_size=64)

messages = st.one_of(
    st.builds(Register, tokens),
    st.builds(RegisterOk, small_bytes, small_bytes),
    st.builds(Upload, pets, u32, u32, tokens),
    st.builds(UploadAck, u8),
    st.builds(EsrReq, small_bytes, small_bytes, st.lists(pets, max_size=10).map(tuple)),
    st.builds(EsrRep, u8),
    st.builds(TestResult, small_bytes, small_bytes, st.integers(0, 1), tokens),
    st.builds(TestResultAck, u8),
    st.builds(StatelessEsr, u32, u32, tokens, st.lists(pets, max_size=10).map(tuple)),
    st.builds(StatelessRep, u8, st.floats(allow_nan=False)),
    st.builds(Error, u8),
)


@settings(max_examples=300)
@given(messages)
def test_roundtrip_every_kind(msg):
    assert decode(encode(msg)) == msg


@settings(max_examples=100)
@given(messages, st.data())
def test_truncation_rejected(msg, data):
    raw = encode(msg)
    cut = data.draw(st.integers(0, len(raw) - 1))
    with pytest.raises(WireError):
        decode(raw[:cut])


@settings(max_examples=50)
@given(messages)
def test_trailing_bytes_rejected(msg):
    with pytest.raises(WireError):
        decode(encode(msg) + b"\x00")


def test_unknown_kind_rejected():
    with pytest.raises(WireError):
        decode(bytes([0xFF, 1]))


def test_bad_version_rejected():
    raw = bytearray(encode(EsrRep(Status.AT_RISK)))
    raw[1] = 9
    with pytest.raises(WireError):
        decode(bytes(raw))


def test_esr_rep_layout():
    assert encode(EsrRep(Status.NOT_AT_RISK)) == bytes([Kind.ESR_REP, 1, 0x00])
    assert encode(EsrRep(Status.AT_RISK)) == bytes([Kind.ESR_REP, 1, 0x01])
    assert encode(EsrRep(Status.RATE_LIMITED)) == bytes([Kind.ESR_REP, 1, 0x02])
    assert encode(EsrRep(Status.AUTH_FAILURE)) == bytes([Kind.ESR_REP, 1, 0x03])


def test_upload_layout_big_endian():
    pet = PetToken(bytes(range(32)))
    raw = encode(Upload(pet, 10, 600, AuthToken(b"R", 5)))
    assert raw[:2] == bytes([Kind.UPLOAD, 1])
    assert raw[2:4] == struct.pack(">H", 32) and raw[4:36] == pet.value
    assert raw[36:44] == struct.pack(">II", 10, 600)


def test_esr_request_has_no_source_field():
    msg = EsrReq(b"i" * 16, b"k" * 32, (PetToken(bytes(32)),))
    assert [f.name for f in dataclasses.fields(msg)] == ["id", "ek", "tokens"]


class Echo:
    def __init__(self):
        self.seen = []

    def __call__(self, raw):
        msg = decode(raw)
        self.seen.append(msg)
        return encode(EsrRep(len(msg.tokens) % 2))


def test_proxy_routes_replies_to_each_caller():
    server = Echo()
    a, b = ProxyChannel(server), ProxyChannel(server)
    ra = proxy_send(a, EsrReq(b"a", b"k", (PetToken(bytes(32)),)))
    rb = proxy_send(b, EsrReq(b"b", b"k", ()))
    assert (ra.status, rb.status) == (1, 0)
    assert a.sent == b.sent == 1 and a.dropped == 0


def test_proxy_drop_rate():
    server = Echo()
    ch = ProxyChannel(server, random.Random(0), drop_rate=0.5)
    replies = [ch.request(EsrReq(b"a", b"k", ())) for _ in range(400)]
    assert 150 < sum(r is None for r in replies) < 250
    assert len(server.seen) == 400 - ch.dropped


class Sink:
    def __init__(self):
        self.arrivals = []

    def __call__(self, raw):
        self.arrivals.append(decode(raw))
        return encode(UploadAck(Status.OK))


def upload(tag, i):
    return Upload(PetToken(bytes([tag, i]) + bytes(30)), 0, 300, AuthToken(b"R", 1))


def test_mix_single_record_within_window():
    sink = Sink()
    mix = MixChannel(sink, random.Random(1), delay_max_sec=3600)
    mix.submit([upload(1, 0)], now=100)
    assert mix.next_delivery() is not None and 100 <= mix.next_delivery() <= 3700
    assert mix.deliver_due(99) == 0
    assert mix.flush() == 1 and len(mix) == 0
    assert mix.replies == [UploadAck(Status.OK)]


def test_mix_empty_batch():
    sink = Sink()
    mix = MixChannel(sink, random.Random(1))
    mix_send(mix, [[]], now=0)
    assert mix.flush() == 0 and sink.arrivals == []


def test_mix_disabled_is_fifo():
    sink = Sink()
    mix = MixChannel(sink, random.Random(1), enabled=False)
    batch = [upload(1, i) for i in range(3)]
    mix.submit(batch, now=5)
    assert mix.deliver_due(5) == 3
    assert sink.arrivals == batch


def test_mix_interleaving_is_chance_level():
    """Adjacent arrivals from the same uploader should occur at the rate a
    uniform permutation of 2x3 items gives (2/5)."""
    same = 0
    trials = 1000
    r = random.Random(7)
    for _ in range(trials):
        sink = Sink()
        mix = MixChannel(sink, r, delay_max_sec=21600)
        mix_send(mix, [[upload(1, i) for i in range(3)], [upload(2, i) for i in range(3)]], 0)
        mix.flush()
        owners = [m.pet.value[0] for m in sink.arrivals]
        same += sum(owners[i] == owners[i + 1] for i in range(5))
    rate = same / (5 * trials)
    assert abs(rate - 0.4) < 0.03


def test_mix_orders_are_spread():
    r = random.Random(3)
    seen = Counter()
    for _ in range(600):
        sink = Sink()
        mix = MixChannel(sink, r)
        mix.submit([upload(1, i) for i in range(3)], 0)
        mix.flush()
        seen[tuple(m.pet.value[1] for m in sink.arrivals)] += 1
    assert len(seen) == 6 and min(seen.values()) > 60


def test_mix_same_seed_same_schedule():
    def schedule(seed):
        sink = Sink()
        mix = MixChannel(sink, random.Random(seed))
        mix.submit([upload(1, i) for i in range(5)], 0)
        mix.flush()
        return sink.arrivals
    assert schedule(4) == schedule(4)
