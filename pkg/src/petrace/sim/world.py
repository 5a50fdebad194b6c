"""Virtual-clock world: devices, radio, anonymizing channels and one server.

Events live in a heap keyed by ``(time, priority, seq)``. At a given second,
epoch rotation runs first, then scripted trace events, radio beacons,
contact ends, peer-loss checks, status requests and finally daily
housekeeping. Radio beacons due at the same second are processed as one
batch, grouped by receiving device; in parallel mode the groups run on a
thread pool between two barriers. Devices share no state, so both modes
produce the same result.
"""

from __future__ import annotations

import heapq
import random
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable

from .. import ble
from ..authority import HealthAuthority, Role, TokenIssuer
from ..config import SECONDS_PER_DAY, SimConfig
from ..crypto import obtain_token
from ..device import Device, NoRequestDue, day_of
from ..risk import make_scorer
from ..server import Server
from ..transport import (MixChannel, ProxyChannel, Register, RegisterOk, StatelessEsr,
                         StatelessRep, Status, TestResult, TestResultAck)
from .trace import ContactTrace, TraceEvent

ROTATE, TRACE, BEACON, END, TICK, QUERY, DAILY = range(7)


@dataclass(order=True)
class _Event:
    time: int
    priority: int
    seq: int
    action: Callable = field(compare=False)
    args: tuple = field(compare=False, default=())


@dataclass
class Outcome:
    notified_ever: bool = False
    first_notified_sec: int | None = None
    at_risk_replies: int = 0
    requests: int = 0
    rate_limited: int = 0
    diagnosed_sec: int | None = None


class Emitter:
    """Something that puts EBID payloads on the air once per beacon interval."""

    def deliveries(self, world: World, now: int) -> list[tuple[int, bytes, list[bytes]]]:
        raise NotImplementedError

    def active(self, now: int) -> bool:
        raise NotImplementedError


class ContactEmitter(Emitter):
    def __init__(self, a: int, b: int):
        self.a, self.b = a, b
        self.ended = False

    def deliveries(self, world, now):
        return [(self.b, world.addr[self.a], world.payloads(self.a)),
                (self.a, world.addr[self.b], world.payloads(self.b))]

    def active(self, now):
        return not self.ended


class World:
    def __init__(self, config: SimConfig, population: int, seed: int, *,
                 mode: str = "stateful", parallel: bool = False, rsa_bits: int = 1024,
                 device_cls: type[Device] = Device, issuer_keys: dict | None = None):
        if mode not in ("stateful", "stateless"):
            raise ValueError(f"unknown mode {mode!r}")
        self.config = config
        self.protocol = config.protocol
        self.mode = mode
        self.parallel = parallel
        self.seed = seed
        self.now = 0
        self._heap: list[_Event] = []
        self._seq = 0

        def stream(name: str) -> random.Random:
            return random.Random(f"{seed}/{name}")

        self.authority = HealthAuthority(stream("authority"))
        quota = (self.protocol.ct_days + 1) * self.protocol.esr_per_day
        # issuer_keys lets several worlds share one (mutable) signing-key cache
        self.issuer = TokenIssuer(self.authority, bits=rsa_bits, day_quota=quota,
                                  keys=issuer_keys)
        self.server = Server(self.protocol, self.issuer,
                             scorer=make_scorer(config.scorer.name, self.protocol.ct_days),
                             min_match_count=config.scorer.min_match_count,
                             rng=stream("server"), notify_rng=stream("server-notify"),
                             clock=lambda: self.now)
        ch = config.channel
        self.proxy = ProxyChannel(self.server.dispatch, stream("proxy"), ch.proxy_drop_rate)
        self.mix = MixChannel(self.server.dispatch, stream("mix"), ch.mix_delay_max_sec,
                              enabled=ch.mixing)
        self.devices: list[Device] = []
        self.caches: list[ble.ReassemblyCache] = []
        self.addr: list[bytes] = []
        self.outcomes: list[Outcome] = []
        self._token_rngs: list[random.Random] = []
        self._addr_rngs: list[random.Random] = []
        self._payloads: dict[int, tuple[int, list[bytes]]] = {}
        self._pool = ThreadPoolExecutor(max_workers=8) if parallel else None
        self._contacts: dict[frozenset, ContactEmitter] = {}
        # ground truth of who sent what; the server only sees the messages
        self.sent: list[tuple[int, object]] = []
        for i in range(population):
            self.add_device(device_cls)
        self._schedule_clock()

    # -- setup ------------------------------------------------------------

    def add_device(self, device_cls: type[Device] = Device) -> int:
        i = len(self.devices)
        seed = self.seed

        def stream(name: str) -> random.Random:
            return random.Random(f"{seed}/device/{i}/{name}")

        dev = device_cls(self.protocol, stream("identity"), epoch=self.now // self.protocol.epoch_duration_sec,
                         query_rng=stream("query"), upload_rng=stream("upload"))
        self.devices.append(dev)
        self.caches.append(ble.ReassemblyCache())
        self._token_rngs.append(stream("tokens"))
        self._addr_rngs.append(stream("address"))
        self.addr.append(self._new_addr(i))
        self.outcomes.append(Outcome())
        if self.mode == "stateful":
            self._register(i)
        self._schedule_queries(i)
        return i

    def phone(self, i: int) -> str:
        return f"+000{self.seed}{i:06d}"

    def _new_addr(self, i: int) -> bytes:
        raw = bytearray(self._addr_rngs[i].randbytes(6))
        raw[0] |= 0xC0  # random static address
        return bytes(raw)

    def _register(self, i: int) -> None:
        key = self.issuer.public_key(Role.REGISTRATION)
        token = obtain_token(self._token_rngs[i], key,
                             lambda b: self.issuer.issue_registration(self.phone(i), b))
        reply = self.proxy.request(Register(token))
        if not isinstance(reply, RegisterOk):
            raise RuntimeError(f"device {i} failed to register: {reply}")
        self.devices[i].set_registration(reply.id, reply.ek)

    def _schedule_clock(self) -> None:
        dur = self.protocol.epoch_duration_sec
        self.schedule((self.now // dur + 1) * dur, ROTATE, self._rotate)
        self.schedule((self.now // SECONDS_PER_DAY + 1) * SECONDS_PER_DAY, DAILY, self._daily)

    def _schedule_queries(self, i: int) -> None:
        p = self.protocol
        esr_min = p.esr_min_epochs
        epoch = max(self.now // p.epoch_duration_sec + 1, esr_min) + i % esr_min
        offset = (37 * i) % p.epoch_duration_sec
        self.schedule(epoch * p.epoch_duration_sec + offset, QUERY, self._query, i)

    def schedule(self, time: int, priority: int, action: Callable, *args) -> None:
        heapq.heappush(self._heap, _Event(time, priority, self._seq, action, args))
        self._seq += 1

    def load_trace(self, trace: ContactTrace, offset: int = 0) -> None:
        for ev in trace.events:
            self.schedule(ev.time + offset, END if ev.kind == "end" else TRACE,
                          self._trace_event, ev)

    # -- main loop --------------------------------------------------------

    def run_until(self, t_end: int) -> None:
        while self._heap and self._heap[0].time <= t_end:
            t = self._heap[0].time
            self.now = t
            self.mix.deliver_due(t)
            ev = heapq.heappop(self._heap)
            if ev.priority == BEACON:
                batch = [ev]
                while (self._heap and self._heap[0].time == t
                       and self._heap[0].priority == BEACON):
                    batch.append(heapq.heappop(self._heap))
                self._beacons(t, [e.args[0] for e in batch])
            else:
                ev.action(*ev.args)
        self.now = t_end
        self.mix.deliver_due(t_end)

    def close(self) -> None:
        if self._pool:
            self._pool.shutdown()

    def _map_devices(self, fn: Callable[[int], None], indices) -> None:
        indices = list(indices)
        if self._pool and len(indices) > 1:
            list(self._pool.map(fn, indices))
        else:
            for i in indices:
                fn(i)

    # -- radio ------------------------------------------------------------

    def payloads(self, i: int) -> list[bytes]:
        dev = self.devices[i]
        cached = self._payloads.get(i)
        if cached is None or cached[0] != dev.epoch:
            if self.config.channel.ble_mode == "fragmentation":
                frames = ble.build_fragment_sequence(dev.ebid)
            else:
                frames = ble.build_beacon(dev.ebid)
            cached = (dev.epoch, frames)
            self._payloads[i] = cached
        return cached[1]

    def add_emitter(self, emitter: Emitter, start: int) -> None:
        self.schedule(start, BEACON, None, emitter)

    def _beacons(self, t: int, emitters: list[Emitter]) -> None:
        epoch = t // self.protocol.epoch_duration_sec
        per_receiver: dict[int, list[tuple[bytes, list[bytes]]]] = {}
        interval = self.config.channel.beacon_interval_sec
        for em in emitters:
            if not em.active(t):
                continue
            for receiver, addr, frames in em.deliveries(self, t):
                per_receiver.setdefault(receiver, []).append((addr, frames))
            self.schedule(t + interval, BEACON, None, em)

        def receive(i: int) -> None:
            dev, cache = self.devices[i], self.caches[i]
            for addr, frames in per_receiver[i]:
                for frame in frames:
                    try:
                        fragment = ble.parse_payload(frame)
                    except ble.CodecError:
                        continue
                    ebid = cache.observe(addr, fragment, epoch)
                    if ebid is not None:
                        dev.on_observation(ebid, t)

        self._map_devices(receive, sorted(per_receiver))

    # -- scheduled actions ------------------------------------------------

    def _rotate(self) -> None:
        t = self.now
        epoch = t // self.protocol.epoch_duration_sec

        def rotate(i: int) -> None:
            dev = self.devices[i]
            dev.tick(t)
            dev.on_epoch_start(epoch)

        self._map_devices(rotate, range(len(self.devices)))
        for i in range(len(self.devices)):
            self.addr[i] = self._new_addr(i)
        self.schedule(t + self.protocol.epoch_duration_sec, ROTATE, self._rotate)

    def _daily(self) -> None:
        t = self.now
        today = day_of(t)
        self.server.collect_garbage(today)
        horizon = self.protocol.ct_days * SECONDS_PER_DAY
        for i, out in enumerate(self.outcomes):
            if out.diagnosed_sec is not None and t - out.diagnosed_sec <= horizon:
                self.upload_etl(i)
        self.schedule(t + SECONDS_PER_DAY, DAILY, self._daily)

    def _tick(self, i: int) -> None:
        self.devices[i].tick(self.now)

    def schedule_tick(self, i: int, at: int) -> None:
        self.schedule(at, TICK, self._tick, i)

    def _trace_event(self, ev: TraceEvent) -> None:
        if ev.kind == "start":
            em = ContactEmitter(ev.a, ev.b)
            self._contacts[frozenset((ev.a, ev.b))] = em
            self.add_emitter(em, self.now)
        elif ev.kind == "end":
            self._contacts.pop(frozenset((ev.a, ev.b))).ended = True
            at = self.now + self.protocol.peer_loss_timeout_sec + 1
            self.schedule_tick(ev.a, at)
            self.schedule_tick(ev.b, at)
        elif ev.kind == "diagnose":
            self.diagnose(ev.a)
        elif ev.kind == "test":
            self.report_test(ev.a, ev.positive)

    # -- protocol flows -----------------------------------------------------

    def diagnose(self, i: int) -> None:
        dev = self.devices[i]
        dev.state.diagnosed = True
        dev.diagnosis_code = self.authority.issue_code("diagnosis")
        if self.outcomes[i].diagnosed_sec is None:
            self.outcomes[i].diagnosed_sec = self.now
        self.upload_etl(i)

    def upload_etl(self, i: int) -> int:
        dev = self.devices[i]
        pending = len(dev.pending_records())
        if not pending:
            return 0
        key = self.issuer.public_key(Role.DIAGNOSIS)
        code = dev.diagnosis_code
        while len(dev.auth_tokens) < pending:
            dev.auth_tokens.append(obtain_token(
                self._token_rngs[i], key, lambda b: self.issuer.issue_diagnosis(code, b)))
        batch = dev.build_upload_batch()
        self.sent.extend((i, m) for m in batch)
        self.mix.submit(batch, self.now)
        return len(batch)

    def report_test(self, i: int, positive: bool) -> Status | None:
        if self.mode != "stateful":
            return None
        dev = self.devices[i]
        code = self.authority.issue_code("test_result")
        token = obtain_token(self._token_rngs[i], self.issuer.public_key(Role.TEST_RESULT),
                             lambda b: self.issuer.issue_test_result(code, b))
        reply = self.proxy.request(TestResult(dev.state.id, dev.state.ek, int(positive), token))
        return Status(reply.status) if isinstance(reply, TestResultAck) else None

    def _query(self, i: int) -> None:
        p = self.protocol
        dev = self.devices[i]
        epoch = self.now // p.epoch_duration_sec
        if self.mode == "stateful":
            retry = self.query_stateful(i)
        else:
            retry = self.query_stateless(i)
        gap = 1 if retry else p.esr_min_epochs
        self.schedule((epoch + gap) * p.epoch_duration_sec + (37 * i) % p.epoch_duration_sec,
                      QUERY, self._query, i)

    def query_stateful(self, i: int) -> bool:
        """Send one status request; returns True when a retry should follow soon."""
        dev, out = self.devices[i], self.outcomes[i]
        try:
            req = dev.build_esr_request(self.now)
        except NoRequestDue:
            return False
        self.sent.append((i, req))
        reply = self.proxy.request(req)
        if reply is None:
            return True
        out.requests += 1
        dev.handle_esr_reply(reply.status, self.now)
        if reply.status == Status.RATE_LIMITED:
            out.rate_limited += 1
            return True
        if reply.status == Status.AT_RISK:
            self._mark_notified(out)
        return False

    def query_stateless(self, i: int) -> bool:
        p = self.protocol
        dev, out = self.devices[i], self.outcomes[i]
        epoch = self.now // p.epoch_duration_sec
        if not dev.stateless_round_due(epoch):
            return False
        today = day_of(self.now)
        key = self.issuer.public_key(Role.DAY, today)
        results = []
        for query_day, tokens in dev.build_daily_queries(today):
            token = obtain_token(self._token_rngs[i], key,
                                 lambda b: self.issuer.issue_day_token(self.phone(i), today, b))
            req = StatelessEsr(today, query_day, token, tuple(tokens))
            self.sent.append((i, req))
            reply = self.proxy.request(req)
            if not isinstance(reply, StatelessRep) or reply.status != Status.OK:
                continue
            results.append((query_day, reply.score))
        out.requests += 1
        if dev.apply_daily_scores(results, today, epoch):
            self._mark_notified(out)
        return False

    def _mark_notified(self, out: Outcome) -> None:
        out.at_risk_replies += 1
        if not out.notified_ever:
            out.notified_ever = True
            out.first_notified_sec = self.now
