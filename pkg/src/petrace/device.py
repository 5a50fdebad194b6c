"""Per-device protocol state: EBID rotation, encounters, token lists, requests."""

from __future__ import annotations

import enum
import io
import random
import struct
from collections import Counter
from dataclasses import dataclass, field

from . import risk
from .config import SECONDS_PER_DAY, ProtocolConfig
from .crypto import (CURVE25519, CryptoError, EphemeralIdentity, GroupMode, GroupParams,
                     PetToken, encounter_tokens, gen_identity, require_protocol_group)
from .transport import EsrReq, Status, Upload

SNAPSHOT_MAGIC = b"PTDS"
SNAPSHOT_VERSION = 1


class NoRequestDue(Exception):
    """The local throttle forbids a status request at this epoch."""


class NotEnoughTokens(Exception):
    pass


class FinalizeReason(enum.Enum):
    EBID_ROTATED = "ebid_rotated"
    PEER_LOST = "peer_lost"


def epoch_of(now_sec: int, config: ProtocolConfig) -> int:
    return now_sec // config.epoch_duration_sec


def day_of(now_sec: int) -> int:
    return now_sec // SECONDS_PER_DAY


@dataclass(frozen=True)
class EncounterRecord:
    pet: PetToken
    duration_sec: int
    day: int


@dataclass(frozen=True)
class RtlEntry:
    pet: PetToken
    day: int


@dataclass
class ActiveEncounter:
    start: int
    last_seen: int


@dataclass
class DeviceState:
    current: EphemeralIdentity
    id: bytes = b""
    ek: bytes = b""
    rtl: list[RtlEntry] = field(default_factory=list)
    etl: list[EncounterRecord] = field(default_factory=list)
    uploaded: set = field(default_factory=set)
    active: dict[bytes, ActiveEncounter] = field(default_factory=dict)
    notified: bool = False
    notification_events: int = 0
    sre_local: int | None = None
    retry_epoch: int | None = None
    diagnosed: bool = False
    notified_epoch: int | None = None
    daily_scores: list[tuple[int, float]] = field(default_factory=list)


class Device:
    """One app instance. All randomness comes from explicitly passed generators.

    ``rng`` drives identity generation; padding, shuffling and upload order use
    their own streams so that changing one behaviour does not perturb others.
    """

    def __init__(self, config: ProtocolConfig, rng=None, *, group: GroupParams = CURVE25519,
                 allow_insecure: bool = False, epoch: int = 0, query_rng=None,
                 upload_rng=None):
        require_protocol_group(group, allow_insecure)
        self.config = config
        self.group = group
        self.rng = rng or random.SystemRandom()
        self.query_rng = query_rng or self.rng
        self.upload_rng = upload_rng or self.rng
        self.state = DeviceState(current=gen_identity(self.rng, epoch, group))
        self.stats: Counter = Counter()
        self.auth_tokens: list = []
        self.diagnosis_code: str | None = None

    @property
    def ebid(self) -> bytes:
        return self.state.current.ebid

    @property
    def epoch(self) -> int:
        return self.state.current.epoch

    def set_registration(self, id: bytes, ek: bytes) -> None:
        self.state.id = id
        self.state.ek = ek

    # -- proximity --------------------------------------------------------

    def on_epoch_start(self, epoch: int) -> None:
        st = self.state
        if epoch <= st.current.epoch:
            raise ValueError(f"epoch {epoch} does not advance past {st.current.epoch}")
        rotation_time = epoch * self.config.epoch_duration_sec
        for peer in list(st.active):
            enc = st.active.pop(peer)
            self._finalize(peer, rotation_time - enc.start, day_of(enc.start),
                           FinalizeReason.EBID_ROTATED)
        # drop the old secret before anything else can reference it
        st.current = gen_identity(self.rng, epoch, self.group)
        today = epoch // self.config.epochs_per_day
        ct = self.config.ct_days
        st.rtl = [e for e in st.rtl if today - e.day <= ct]
        kept = [r for r in st.etl if today - r.day <= ct]
        st.uploaded &= {r.pet for r in kept}
        st.etl = kept

    def on_observation(self, peer_ebid: bytes, now: int) -> None:
        st = self.state
        if peer_ebid == st.current.ebid:
            return
        enc = st.active.get(peer_ebid)
        if enc is None:
            st.active[peer_ebid] = ActiveEncounter(now, now)
        else:
            enc.last_seen = now

    def tick(self, now: int) -> None:
        st = self.state
        timeout = self.config.peer_loss_timeout_sec
        for peer in [p for p, e in st.active.items() if now - e.last_seen > timeout]:
            enc = st.active.pop(peer)
            self._finalize(peer, enc.last_seen - enc.start, day_of(enc.start),
                           FinalizeReason.PEER_LOST)

    def _finalize(self, peer_ebid: bytes, duration: int, day: int,
                  reason: FinalizeReason) -> None:
        self.stats[f"finalized_{reason.value}"] += 1
        self.finalize_encounter(peer_ebid, duration, day)

    def finalize_encounter(self, peer_ebid: bytes, duration: int, day: int) -> bool:
        """Store the encounter's tokens; returns False when it was dropped."""
        self.state.active.pop(peer_ebid, None)
        if duration < self.config.min_encounter_sec:
            self.stats["discarded_short"] += 1
            return False
        try:
            rtl_pet, etl_pet = encounter_tokens(self.state.current, peer_ebid, self.group)
        except CryptoError:
            self.stats["discarded_invalid"] += 1
            return False
        self.state.rtl.append(RtlEntry(rtl_pet, day))
        self.state.etl.append(EncounterRecord(etl_pet, duration, day))
        self.stats["encounters"] += 1
        return True

    # -- status requests --------------------------------------------------

    def request_due(self, epoch: int) -> bool:
        st = self.state
        if st.retry_epoch is not None and epoch >= st.retry_epoch:
            return True
        return st.sre_local is None or epoch - st.sre_local >= self.config.esr_min_epochs

    def _padded(self, pets: list[PetToken]) -> list[PetToken]:
        T = self.config.padding_T
        chosen = pets[:T]
        chosen += [PetToken(self.query_rng.randbytes(32)) for _ in range(T - len(chosen))]
        self.query_rng.shuffle(chosen)
        return chosen

    def build_esr_request(self, now: int) -> EsrReq:
        epoch = epoch_of(now, self.config)
        if not self.request_due(epoch):
            raise NoRequestDue(f"next request allowed at epoch "
                               f"{self.state.sre_local + self.config.esr_min_epochs}")
        recent_first = [e.pet for e in reversed(self.state.rtl)]
        return EsrReq(self.state.id, self.state.ek, tuple(self._padded(recent_first)))

    def handle_esr_reply(self, status: int, now: int) -> bool:
        """Apply a reply; True when a new user-facing notification is raised."""
        st = self.state
        epoch = epoch_of(now, self.config)
        if status == Status.RATE_LIMITED:
            st.retry_epoch = epoch + 1
            self.stats["rate_limited"] += 1
            return False
        if status not in (Status.AT_RISK, Status.NOT_AT_RISK):
            self.stats["request_errors"] += 1
            return False
        st.sre_local = epoch
        st.retry_epoch = None
        if status == Status.AT_RISK:
            if st.notified:
                return False
            st.notified = True
            st.notification_events += 1
            return True
        st.notified = False
        return False

    # -- state-less variant -------------------------------------------------

    def build_daily_queries(self, today: int) -> list[tuple[int, list[PetToken]]]:
        """One padded token set per day of the contagious window, newest day first."""
        by_day: dict[int, list[PetToken]] = {}
        for e in reversed(self.state.rtl):
            by_day.setdefault(e.day, []).append(e.pet)
        return [(d, self._padded(by_day.get(d, [])))
                for d in range(today, max(today - self.config.ct_days, 0) - 1, -1)]

    def stateless_round_due(self, epoch: int) -> bool:
        """While notified, stay quiet until the status resets after ``reset_days``."""
        st = self.state
        if not st.notified:
            return True
        if epoch - st.notified_epoch >= self.config.reset_epochs:
            st.notified = False
            st.notified_epoch = None
            return True
        return False

    def apply_daily_scores(self, results: list[tuple[int, float]], today: int,
                           epoch: int) -> bool:
        """Fold a round of daily replies into the global score and decide locally."""
        st = self.state
        ct = self.config.ct_days
        st.daily_scores = [(d, s) for d, s in st.daily_scores + list(results) if today - d <= ct]
        if st.notified:
            return False
        if risk.decide(self.stateless_score(today), self.config.risk_threshold_sec):
            st.notified = True
            st.notified_epoch = epoch
            st.notification_events += 1
            return True
        return False

    def stateless_score(self, today: int) -> float:
        ct = self.config.ct_days
        return risk.aggregate_daily(s for d, s in self.state.daily_scores if today - d <= ct)

    # -- declaration --------------------------------------------------------

    def pending_records(self) -> list[EncounterRecord]:
        return [r for r in self.state.etl if r.pet not in self.state.uploaded]

    def build_upload_batch(self) -> list[Upload]:
        records = self.pending_records()
        if len(self.auth_tokens) < len(records):
            raise NotEnoughTokens(f"{len(records)} records, {len(self.auth_tokens)} tokens")
        msgs = [Upload(r.pet, r.day, r.duration_sec, self.auth_tokens.pop()) for r in records]
        self.upload_rng.shuffle(msgs)
        self.state.uploaded.update(r.pet for r in records)
        return msgs

    # -- checkpointing ------------------------------------------------------

    def snapshot(self) -> bytes:
        st = self.state
        out = io.BytesIO()
        w = out.write

        def blob(b: bytes):
            w(struct.pack(">H", len(b)) + b)

        w(SNAPSHOT_MAGIC + struct.pack(">B", SNAPSHOT_VERSION))
        blob(st.id)
        blob(st.ek)
        toy = self.group.mode is GroupMode.TOY_MODP
        w(struct.pack(">BII", int(toy), self.group.p or 0, self.group.g or 0))
        secret = st.current.secret
        w(struct.pack(">I", st.current.epoch))
        blob(secret.to_bytes(4, "big") if toy else bytes(secret))
        blob(st.current.ebid)
        w(struct.pack(">I", len(st.rtl)))
        for e in st.rtl:
            w(e.pet.value + struct.pack(">I", e.day))
        w(struct.pack(">I", len(st.etl)))
        for r in st.etl:
            w(r.pet.value + struct.pack(">IIB", r.duration_sec, r.day, r.pet in st.uploaded))
        w(struct.pack(">I", len(st.active)))
        for peer, enc in st.active.items():
            blob(peer)
            w(struct.pack(">QQ", enc.start, enc.last_seen))
        w(struct.pack(">BBIqqq", st.notified, st.diagnosed, st.notification_events,
                      -1 if st.sre_local is None else st.sre_local,
                      -1 if st.retry_epoch is None else st.retry_epoch,
                      -1 if st.notified_epoch is None else st.notified_epoch))
        w(struct.pack(">I", len(st.daily_scores)))
        for day, score in st.daily_scores:
            w(struct.pack(">Id", day, score))
        return out.getvalue()

    @classmethod
    def restore(cls, data: bytes, config: ProtocolConfig, rng=None, **kwargs) -> Device:
        r = io.BytesIO(data)

        def read(fmt):
            size = struct.calcsize(fmt)
            chunk = r.read(size)
            if len(chunk) != size:
                raise ValueError("truncated device snapshot")
            return struct.unpack(fmt, chunk)

        def blob():
            (n,) = read(">H")
            return r.read(n)

        if r.read(4) != SNAPSHOT_MAGIC:
            raise ValueError("not a device snapshot")
        (version,) = read(">B")
        if version != SNAPSHOT_VERSION:
            raise ValueError(f"unsupported device snapshot version {version}")
        id, ek = blob(), blob()
        toy, p, g = read(">BII")
        group = GroupParams.toy(p, g) if toy else CURVE25519
        (epoch,) = read(">I")
        raw_secret = blob()
        secret = int.from_bytes(raw_secret, "big") if toy else raw_secret
        current = EphemeralIdentity(secret, blob(), epoch)
        st = DeviceState(current=current, id=id, ek=ek)
        for _ in range(read(">I")[0]):
            pet = PetToken(r.read(32))
            st.rtl.append(RtlEntry(pet, read(">I")[0]))
        for _ in range(read(">I")[0]):
            pet = PetToken(r.read(32))
            duration, day, uploaded = read(">IIB")
            st.etl.append(EncounterRecord(pet, duration, day))
            if uploaded:
                st.uploaded.add(pet)
        for _ in range(read(">I")[0]):
            peer = blob()
            st.active[peer] = ActiveEncounter(*read(">QQ"))
        notified, diagnosed, events, sre, retry, notified_epoch = read(">BBIqqq")
        st.notified, st.diagnosed, st.notification_events = bool(notified), bool(diagnosed), events
        st.sre_local = None if sre < 0 else sre
        st.retry_epoch = None if retry < 0 else retry
        st.notified_epoch = None if notified_epoch < 0 else notified_epoch
        st.daily_scores = [read(">Id") for _ in range(read(">I")[0])]
        if r.read(1):
            raise ValueError("trailing bytes in device snapshot")
        kwargs.setdefault("allow_insecure", bool(toy))
        device = cls(config, rng, group=group, epoch=epoch, **kwargs)
        device.state = st
        return device
