"""Back-end server: registration, encrypted IDTable, EList and status requests."""

from __future__ import annotations

import contextlib
import json
import random
import threading
from collections import Counter
from dataclasses import dataclass, field, fields, replace
from typing import Callable, Iterable

from . import risk
from .authority import Role, TokenIssuer, window_name
from .config import ProtocolConfig
from .crypto import (AuthToken, EntryAuthError, PetToken, decrypt_entry, encrypt_entry,
                     new_entry_key, verify_token)
from .transport import (EsrRep, EsrReq, Error, Message, Register, RegisterOk, StatelessEsr,
                        StatelessRep, Status, TestResult, TestResultAck, Upload, UploadAck,
                        WireError, decode, encode)

SNAPSHOT_VERSION = 1
ID_SIZE = 16


class ServerError(Exception):
    status = Status.MALFORMED


class InvalidToken(ServerError):
    status = Status.INVALID_TOKEN


class TokenReused(ServerError):
    status = Status.TOKEN_REUSED


class UnknownId(ServerError):
    status = Status.UNKNOWN_ID


class AuthFailure(ServerError):
    status = Status.AUTH_FAILURE


@dataclass(frozen=True)
class ExposedTuple:
    token: PetToken
    day: int
    t: int


@dataclass
class IdTableEntry:
    """Decrypted view of one IDTable row; only ever lives inside a request."""

    id: bytes
    un: bool = False
    sre: int = 0
    lepm: list = field(default_factory=list)
    ers: float = 0
    notified_epoch: int | None = None

    def plaintext(self) -> dict:
        return {"un": self.un, "sre": self.sre, "lepm": [list(x) for x in self.lepm],
                "ers": self.ers, "notified_epoch": self.notified_epoch}

    @classmethod
    def from_plaintext(cls, id: bytes, data: dict) -> IdTableEntry:
        return cls(id, data["un"], data["sre"], [tuple(x) for x in data["lepm"]],
                   data["ers"], data["notified_epoch"])


class SpentTokenLedger:
    """Seeds of accepted tokens, partitioned by key/validity window."""

    def __init__(self):
        self._windows: dict[str, set[bytes]] = {}
        self._all: set[bytes] = set()
        self._lock = threading.Lock()

    def __contains__(self, R: bytes) -> bool:
        return R in self._all

    def __len__(self) -> int:
        return len(self._all)

    def spend(self, R: bytes, window: str) -> None:
        with self._lock:
            if R in self._all:
                raise TokenReused("authorization token already used")
            self._all.add(R)
            self._windows.setdefault(window, set()).add(R)

    def drop_window(self, window: str) -> None:
        with self._lock:
            self._all -= self._windows.pop(window, set())

    def to_dict(self) -> dict:
        return {w: sorted(r.hex() for r in rs) for w, rs in sorted(self._windows.items())}

    @classmethod
    def from_dict(cls, data: dict) -> SpentTokenLedger:
        ledger = cls()
        for window, seeds in data.items():
            for seed in seeds:
                ledger.spend(bytes.fromhex(seed), window)
        return ledger


def _redact(msg: Message) -> Message:
    if any(f.name == "ek" for f in fields(msg)):
        return replace(msg, ek=b"")
    return msg


class Server:
    def __init__(self, config: ProtocolConfig, issuer: TokenIssuer, *,
                 scorer: risk.Scorer | None = None, min_match_count: int = 1,
                 rng=None, notify_rng=None, clock: Callable[[], int] | None = None,
                 record_transcript: bool = True):
        self.config = config
        self.issuer = issuer
        self.scorer = scorer or risk.AdditiveScorer(config.ct_days)
        self.min_match_count = min_match_count
        self.rng = rng or random.SystemRandom()
        self.notify_rng = notify_rng or self.rng
        self.clock = clock or (lambda: 0)
        self.record_transcript = record_transcript
        self.idtable: dict[bytes, bytes] = {}
        self.elist: dict[bytes, list[ExposedTuple]] = {}
        self.ledger = SpentTokenLedger()
        self.transcript: list[Message] = []
        self.stats: Counter = Counter()
        self.matched_tokens: list[bytes] = []
        self._live_keys = 0
        self._lock = threading.RLock()
        self._key_hook: Callable[[str, bytes], None] | None = None

    # -- helpers ----------------------------------------------------------

    @property
    def live_keys(self) -> int:
        """Entry keys currently held; zero whenever no request is in flight."""
        return self._live_keys

    def set_key_audit_hook(self, hook: Callable[[str, bytes], None] | None) -> None:
        self._key_hook = hook

    def _accept_token(self, token: AuthToken, role: Role, day: int | None = None) -> None:
        if not verify_token(token, self.issuer.public_key(role, day)):
            raise InvalidToken(f"bad {role.value} token")
        self.ledger.spend(token.R, window_name(role, day))

    @contextlib.contextmanager
    def _open_entry(self, id: bytes, ek: bytes):
        """Decrypt an entry for the duration of one request, then re-seal it."""
        blob = self.idtable.get(id)
        if blob is None:
            raise UnknownId(id.hex())
        try:
            entry = IdTableEntry.from_plaintext(id, decrypt_entry(ek, blob, aad=id))
        except EntryAuthError:
            raise AuthFailure("entry key rejected") from None
        self._live_keys += 1
        if self._key_hook:
            self._key_hook("open", id)
        try:
            yield entry
        finally:
            self.idtable[id] = encrypt_entry(ek, entry.plaintext(), self.rng, aad=id)
            del ek
            self._live_keys -= 1
            if self._key_hook:
                self._key_hook("close", id)

    def _new_id(self) -> bytes:
        while True:
            candidate = self.rng.randbytes(ID_SIZE)
            if candidate not in self.idtable:
                return candidate

    def _match(self, tokens: Iterable[PetToken]) -> list[ExposedTuple]:
        matched = []
        for pet in tokens:
            hits = self.elist.pop(pet.value, None)
            if hits:
                matched.extend(hits)
                self.matched_tokens.extend(pet.value for _ in hits)
        self.stats["matches"] += len(matched)
        return matched

    @property
    def elist_size(self) -> int:
        return sum(len(v) for v in self.elist.values())

    def current_epoch(self) -> int:
        return self.clock() // self.config.epoch_duration_sec

    # -- endpoints --------------------------------------------------------

    def register(self, token: AuthToken) -> tuple[bytes, bytes]:
        with self._lock:
            self._accept_token(token, Role.REGISTRATION)
            id = self._new_id()
            ek = new_entry_key(self.rng)
            self.idtable[id] = encrypt_entry(ek, IdTableEntry(id).plaintext(), self.rng, aad=id)
            self.stats["registrations"] += 1
            return id, ek

    def handle_upload(self, pet: PetToken, day: int, duration: int, token: AuthToken) -> None:
        with self._lock:
            self._accept_token(token, Role.DIAGNOSIS)
            self.elist.setdefault(pet.value, []).append(ExposedTuple(pet, day, duration))
            self.stats["uploads"] += 1

    def handle_esr(self, id: bytes, ek: bytes, tokens: Iterable[PetToken],
                   epoch_now: int | None = None) -> Status:
        cfg = self.config
        epoch_now = self.current_epoch() if epoch_now is None else epoch_now
        with self._lock, self._open_entry(id, ek) as entry:
            self.stats["esr_requests"] += 1
            if epoch_now - entry.sre < cfg.esr_min_epochs:
                self.stats["rate_limited"] += 1
                return Status.RATE_LIMITED
            entry.sre = epoch_now
            if entry.un and epoch_now - entry.notified_epoch >= cfg.reset_epochs:
                entry.un = False
                entry.notified_epoch = None
            if entry.un:
                return Status.AT_RISK
            today = epoch_now // cfg.epochs_per_day
            entry.lepm.extend((t.day, t.t) for t in self._match(tokens))
            entry.lepm = [(d, t) for d, t in entry.lepm if today - d <= cfg.ct_days]
            entry.ers = self.scorer.score(entry.lepm, today)
            decision = (risk.decide(entry.ers, cfg.risk_threshold_sec)
                        and len(entry.lepm) >= self.min_match_count)
            if risk.probabilistic_notify(decision, cfg.notify_p, self.notify_rng):
                entry.un = True
                entry.notified_epoch = epoch_now
                self.stats["notified"] += 1
                return Status.AT_RISK
            return Status.NOT_AT_RISK

    def mark_tested(self, id: bytes, ek: bytes, positive: bool, token: AuthToken,
                    epoch_now: int | None = None) -> None:
        with self._lock:
            if id not in self.idtable:
                raise UnknownId(id.hex())
            self._accept_token(token, Role.TEST_RESULT)
            with self._open_entry(id, ek) as entry:
                if not positive:
                    entry.un = False
                    entry.notified_epoch = None

    def handle_esr_stateless(self, key_day: int, query_day: int, token: AuthToken,
                             tokens: Iterable[PetToken], today: int | None = None) -> float:
        cfg = self.config
        today = self.current_epoch() // cfg.epochs_per_day if today is None else today
        with self._lock:
            if key_day != today or not 0 <= today - query_day <= cfg.ct_days:
                raise InvalidToken("day token outside its validity window")
            self._accept_token(token, Role.DAY, key_day)
            self.stats["stateless_requests"] += 1
            matched = self._match(tokens)
            return self.scorer.score([(t.day, t.t) for t in matched], today)

    def collect_garbage(self, today: int) -> int:
        """Drop EList tuples older than CT+1 days; returns how many were removed."""
        horizon = self.config.ct_days + 1
        removed = 0
        with self._lock:
            for key in list(self.elist):
                keep = [t for t in self.elist[key] if today - t.day <= horizon]
                removed += len(self.elist[key]) - len(keep)
                if keep:
                    self.elist[key] = keep
                else:
                    del self.elist[key]
        return removed

    # -- wire -------------------------------------------------------------

    def dispatch(self, data: bytes) -> bytes:
        """Serve one encoded request. The caller's network identity never reaches here."""
        try:
            msg = decode(data)
        except WireError:
            return encode(Error(Status.MALFORMED))
        if self.record_transcript:
            self.transcript.append(_redact(msg))
        return encode(self._serve(msg))

    def _serve(self, msg: Message) -> Message:
        try:
            if isinstance(msg, Register):
                id, ek = self.register(msg.token)
                return RegisterOk(id, ek)
            if isinstance(msg, Upload):
                self.handle_upload(msg.pet, msg.day, msg.duration, msg.token)
                return UploadAck(Status.OK)
            if isinstance(msg, EsrReq):
                try:
                    return EsrRep(self.handle_esr(msg.id, msg.ek, msg.tokens))
                except (UnknownId, AuthFailure):
                    return EsrRep(Status.AUTH_FAILURE)
            if isinstance(msg, TestResult):
                self.mark_tested(msg.id, msg.ek, bool(msg.positive), msg.token)
                return TestResultAck(Status.OK)
            if isinstance(msg, StatelessEsr):
                score = self.handle_esr_stateless(msg.key_day, msg.query_day, msg.token,
                                                  msg.tokens)
                return StatelessRep(Status.OK, float(score))
        except ServerError as exc:
            if isinstance(msg, Upload):
                return UploadAck(exc.status)
            if isinstance(msg, TestResult):
                return TestResultAck(exc.status)
            if isinstance(msg, StatelessEsr):
                return StatelessRep(exc.status, 0.0)
            return Error(exc.status)
        return Error(Status.MALFORMED)

    # -- persistence ------------------------------------------------------

    def snapshot(self) -> bytes:
        with self._lock:
            state = {
                "version": SNAPSHOT_VERSION,
                "idtable": {k.hex(): v.hex() for k, v in sorted(self.idtable.items())},
                "elist": sorted([t.token.hex(), t.day, t.t]
                                for ts in self.elist.values() for t in ts),
                "spent": self.ledger.to_dict(),
            }
        return json.dumps(state, sort_keys=True).encode()

    def restore(self, data: bytes) -> None:
        state = json.loads(data)
        if state.get("version") != SNAPSHOT_VERSION:
            raise ValueError(f"unsupported snapshot version {state.get('version')}")
        with self._lock:
            self.idtable = {bytes.fromhex(k): bytes.fromhex(v)
                            for k, v in state["idtable"].items()}
            self.elist = {}
            for token, day, t in state["elist"]:
                pet = PetToken(bytes.fromhex(token))
                self.elist.setdefault(pet.value, []).append(ExposedTuple(pet, day, t))
            self.ledger = SpentTokenLedger.from_dict(state["spent"])
