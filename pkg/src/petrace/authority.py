"""Authorization-token issuance.

The back end signs blinded token seeds with a separate RSA key per token
role (and, for state-less queries, per validity day). Issuance policy is
enforced here: one registration per phone number, diagnosis and test-result
tokens only against a code from the (simulated) health authority, and a
daily quota of query tokens per subscriber.
"""

from __future__ import annotations

import enum
import hashlib
import random
import threading

from .crypto import PublicKey, ServerSigningKey, sign_blinded


class IssuanceRefused(Exception):
    pass


class Role(enum.Enum):
    REGISTRATION = "reg"
    DIAGNOSIS = "diag"
    TEST_RESULT = "test"
    DAY = "day"


def window_name(role: Role, day: int | None = None) -> str:
    return role.value if role is not Role.DAY else f"day:{day}"


class HealthAuthority:
    """Stand-in for the medical side: hands out single-purpose codes."""

    def __init__(self, rng=None):
        self.rng = rng or random.SystemRandom()
        self._codes: dict[str, str] = {}

    def issue_code(self, purpose: str) -> str:
        if purpose not in ("diagnosis", "test_result"):
            raise ValueError(f"unknown purpose {purpose!r}")
        code = self.rng.randbytes(12).hex()
        self._codes[code] = purpose
        return code

    def check(self, code: str, purpose: str) -> bool:
        return self._codes.get(code) == purpose

    def consume(self, code: str, purpose: str) -> None:
        if not self.check(code, purpose):
            raise IssuanceRefused("invalid authorization code")
        del self._codes[code]


class TokenIssuer:
    def __init__(self, authority: HealthAuthority | None = None, bits: int = 2048,
                 day_quota: int = 15, keys: dict | None = None):
        self.authority = authority or HealthAuthority()
        self.bits = bits
        self.day_quota = day_quota
        self._keys: dict[str, ServerSigningKey] = keys if keys is not None else {}
        self._phones: set[bytes] = set()
        self._day_counts: dict[tuple[str, int], int] = {}
        self._lock = threading.Lock()

    def _key(self, role: Role, day: int | None = None) -> ServerSigningKey:
        name = window_name(role, day)
        with self._lock:
            if name not in self._keys:
                self._keys[name] = ServerSigningKey.generate(self.bits)
            return self._keys[name]

    def public_key(self, role: Role, day: int | None = None) -> PublicKey:
        return self._key(role, day).public

    def issue_registration(self, phone_number: str, blinded: int) -> int:
        digest = hashlib.sha256(phone_number.encode()).digest()
        with self._lock:
            if digest in self._phones:
                raise IssuanceRefused("phone number already registered")
            self._phones.add(digest)
        return sign_blinded(blinded, self._key(Role.REGISTRATION))

    def issue_diagnosis(self, code: str, blinded: int) -> int:
        # one code covers the whole ETL plus later daily top-ups
        if not self.authority.check(code, "diagnosis"):
            raise IssuanceRefused("invalid diagnosis code")
        return sign_blinded(blinded, self._key(Role.DIAGNOSIS))

    def issue_test_result(self, code: str, blinded: int) -> int:
        self.authority.consume(code, "test_result")
        return sign_blinded(blinded, self._key(Role.TEST_RESULT))

    def issue_day_token(self, subscriber: str, day: int, blinded: int) -> int:
        slot = (subscriber, day)
        with self._lock:
            used = self._day_counts.get(slot, 0)
            if used >= self.day_quota:
                raise IssuanceRefused(f"daily quota of {self.day_quota} tokens exhausted")
            self._day_counts[slot] = used + 1
        return sign_blinded(blinded, self._key(Role.DAY, day))
