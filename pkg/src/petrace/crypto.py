"""Cryptographic primitives for encounter tokens and anonymous authorization.

Covers the key-exchange group used for ephemeral identifiers, derivation of
the two private encounter tokens, the role (list) assignment rule, RSA blind
signatures for unlinkable authorization tokens and the authenticated
encryption used for server-side records.
"""

from __future__ import annotations

import enum
import hashlib
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

from cryptography.exceptions import InvalidTag
from cryptography.hazmat.primitives.asymmetric import rsa, x25519
from cryptography.hazmat.primitives.ciphers.aead import AESGCM
from gmpy2 import invert, powmod

EBID_SIZE = 32
PET_SIZE = 32
ENTRY_KEY_SIZE = 32
NONCE_SIZE = 12
TOKEN_SEED_SIZE = 32
MIN_RSA_BITS = 1024


class CryptoError(Exception):
    """Base class for primitive-level failures."""


class InvalidPeer(CryptoError):
    """The peer's group element is malformed or of low order."""


class DegenerateEncounter(CryptoError):
    """Both sides of an encounter present the same identifier."""


class NotInvertible(CryptoError):
    """A blinding factor shares a factor with the RSA modulus."""


class EntryAuthError(CryptoError):
    """Authenticated decryption of a record failed."""


class InsecureParameters(CryptoError):
    """Toy parameters were requested outside of oracle tests."""


class GroupMode(enum.Enum):
    CURVE25519 = "curve25519"
    TOY_MODP = "toy-modp"


@dataclass(frozen=True)
class GroupParams:
    mode: GroupMode
    p: int | None = None
    g: int | None = None

    @classmethod
    def toy(cls, p: int, g: int) -> GroupParams:
        """Small multiplicative group mod p; only meant for hand-checkable vectors."""
        if p < 5 or not 1 < g < p:
            raise ValueError(f"bad toy group p={p} g={g}")
        return cls(GroupMode.TOY_MODP, p, g)

    @property
    def element_size(self) -> int:
        return EBID_SIZE if self.mode is GroupMode.CURVE25519 else 4

    @property
    def is_toy(self) -> bool:
        return self.mode is GroupMode.TOY_MODP


CURVE25519 = GroupParams(GroupMode.CURVE25519)


def require_protocol_group(group: GroupParams, allow_insecure: bool = False) -> None:
    if group.is_toy and not allow_insecure:
        raise InsecureParameters("toy group is reserved for oracle tests")


@dataclass(frozen=True)
class EphemeralIdentity:
    """Per-epoch secret and the public EBID derived from it."""

    secret: bytes | int
    ebid: bytes
    epoch: int


def identity_from_secret(secret: bytes | int, epoch: int,
                         group: GroupParams = CURVE25519) -> EphemeralIdentity:
    if group.mode is GroupMode.CURVE25519:
        priv = x25519.X25519PrivateKey.from_private_bytes(bytes(secret))
        ebid = priv.public_key().public_bytes_raw()
    else:
        ebid = pow(group.g, int(secret), group.p).to_bytes(4, "big")
    return EphemeralIdentity(secret, ebid, epoch)


def gen_identity(rng, epoch: int, group: GroupParams = CURVE25519) -> EphemeralIdentity:
    if epoch < 0:
        raise ValueError("epoch must be non-negative")
    if group.mode is GroupMode.CURVE25519:
        secret: bytes | int = rng.randbytes(32)
    else:
        secret = rng.randrange(1, group.p - 1)
    return identity_from_secret(secret, epoch, group)


def dh_shared(secret: bytes | int, peer_ebid: bytes,
              group: GroupParams = CURVE25519) -> bytes:
    """Raise the peer's element to our secret; fixed-width canonical output."""
    if len(peer_ebid) != group.element_size:
        raise InvalidPeer(f"expected {group.element_size}-byte element, got {len(peer_ebid)}")
    if group.mode is GroupMode.CURVE25519:
        priv = x25519.X25519PrivateKey.from_private_bytes(bytes(secret))
        try:
            # the library rejects low-order points via an all-zero output check
            return priv.exchange(x25519.X25519PublicKey.from_public_bytes(peer_ebid))
        except ValueError as exc:
            raise InvalidPeer(str(exc)) from None
    y = int.from_bytes(peer_ebid, "big")
    if not 1 < y < group.p - 1:
        raise InvalidPeer(f"element {y} outside the valid range for p={group.p}")
    return pow(y, int(secret), group.p).to_bytes(4, "big")


@dataclass(frozen=True)
class PetToken:
    value: bytes

    def __post_init__(self):
        if len(self.value) != PET_SIZE:
            raise ValueError(f"PET must be {PET_SIZE} bytes")

    def hex(self) -> str:
        return self.value.hex()


def derive_pet_pair(shared: bytes) -> tuple[PetToken, PetToken]:
    pet1 = hashlib.sha256(b"1" + shared).digest()
    pet2 = hashlib.sha256(b"2" + shared).digest()
    return PetToken(pet1), PetToken(pet2)


def assign_roles(my_ebid: bytes, peer_ebid: bytes, pet1: PetToken,
                 pet2: PetToken) -> tuple[PetToken, PetToken]:
    """Return ``(rtl_pet, etl_pet)`` for this side of the encounter.

    The side with the lexicographically greater EBID keeps PET1 for its
    requests, so the peer necessarily uploads PET1 and requests with PET2.
    """
    if my_ebid == peer_ebid:
        raise DegenerateEncounter("identical EBIDs on both sides")
    if my_ebid > peer_ebid:
        return pet1, pet2
    return pet2, pet1


def encounter_tokens(identity: EphemeralIdentity, peer_ebid: bytes,
                     group: GroupParams = CURVE25519) -> tuple[PetToken, PetToken]:
    shared = dh_shared(identity.secret, peer_ebid, group)
    return assign_roles(identity.ebid, peer_ebid, *derive_pet_pair(shared))


# -- blind RSA authorization tokens -----------------------------------------

@dataclass(frozen=True)
class PublicKey:
    n: int
    e: int


@dataclass(frozen=True, repr=False)
class ServerSigningKey:
    n: int
    e: int
    d: int
    p: int | None = None
    q: int | None = None
    insecure: bool = False

    def __post_init__(self):
        if self.n.bit_length() < MIN_RSA_BITS and not self.insecure:
            raise InsecureParameters(f"{self.n.bit_length()}-bit modulus below {MIN_RSA_BITS}")

    def __repr__(self) -> str:
        return f"ServerSigningKey(bits={self.n.bit_length()}, e={self.e})"

    @classmethod
    def generate(cls, bits: int = 2048) -> ServerSigningKey:
        if bits < MIN_RSA_BITS:
            raise InsecureParameters(f"{bits}-bit modulus below {MIN_RSA_BITS}")
        priv = rsa.generate_private_key(public_exponent=65537, key_size=bits)
        nums = priv.private_numbers()
        pub = nums.public_numbers
        return cls(pub.n, pub.e, nums.d, nums.p, nums.q)

    @property
    def public(self) -> PublicKey:
        return PublicKey(self.n, self.e)


@dataclass(frozen=True)
class AuthToken:
    R: bytes
    sigma: int


Hasher = Callable[[bytes, int], int]


def hash_to_int(R: bytes, n: int) -> int:
    """Full-domain hash: SHA-256 in counter mode, reduced mod n."""
    want = (n.bit_length() + 7) // 8 + 16
    out = b""
    counter = 0
    while len(out) < want:
        out += hashlib.sha256(counter.to_bytes(4, "big") + R).digest()
        counter += 1
    return int.from_bytes(out[:want], "big") % n


def blind(R: bytes, c: int, key: PublicKey, hasher: Hasher = hash_to_int) -> int:
    if math.gcd(c, key.n) != 1:
        raise NotInvertible("blinding factor not invertible mod n")
    return int(powmod(c, key.e, key.n)) * hasher(R, key.n) % key.n


def sign_blinded(blinded: int, key: ServerSigningKey) -> int:
    if not 0 <= blinded < key.n:
        raise ValueError("blinded message out of range")
    if key.p is None or key.q is None:
        return int(powmod(blinded, key.d, key.n))
    # CRT speed-up
    sp = int(powmod(blinded % key.p, key.d % (key.p - 1), key.p))
    sq = int(powmod(blinded % key.q, key.d % (key.q - 1), key.q))
    h = int(invert(key.q, key.p)) * (sp - sq) % key.p
    return sq + h * key.q


def unblind(rep: int, c: int, n: int) -> int:
    try:
        return rep * int(invert(c, n)) % n
    except ZeroDivisionError:
        raise NotInvertible("blinding factor not invertible mod n") from None


def verify_token(token: AuthToken, key: PublicKey, hasher: Hasher = hash_to_int) -> bool:
    if not 0 <= token.sigma < key.n:
        return False
    return int(powmod(token.sigma, key.e, key.n)) == hasher(token.R, key.n)


def random_blinding_factor(rng, n: int) -> int:
    while True:
        c = rng.randrange(2, n)
        if math.gcd(c, n) == 1:
            return c


def obtain_token(rng, key: PublicKey, sign: Callable[[int], int]) -> AuthToken:
    """Client side of one blind issuance round.

    ``sign`` carries the blinded value to the issuer and returns its reply.
    """
    R = rng.randbytes(TOKEN_SEED_SIZE)
    c = random_blinding_factor(rng, key.n)
    sigma = unblind(sign(blind(R, c, key)), c, key.n)
    token = AuthToken(R, sigma)
    if not verify_token(token, key):
        raise CryptoError("issuer returned an invalid signature")
    return token


# -- per-entry authenticated encryption -------------------------------------

def new_entry_key(rng) -> bytes:
    return rng.randbytes(ENTRY_KEY_SIZE)


def encrypt_entry(ek: bytes, fields: dict, rng, aad: bytes = b"") -> bytes:
    if len(ek) != ENTRY_KEY_SIZE:
        raise ValueError(f"entry key must be {ENTRY_KEY_SIZE} bytes")
    nonce = rng.randbytes(NONCE_SIZE)
    plaintext = json.dumps(fields, sort_keys=True, separators=(",", ":")).encode()
    return nonce + AESGCM(ek).encrypt(nonce, plaintext, aad)


def decrypt_entry(ek: bytes, blob: bytes, aad: bytes = b"") -> dict:
    if len(ek) != ENTRY_KEY_SIZE:
        raise EntryAuthError("wrong key size")
    if len(blob) < NONCE_SIZE + 16:
        raise EntryAuthError("ciphertext too short")
    try:
        plaintext = AESGCM(ek).decrypt(blob[:NONCE_SIZE], blob[NONCE_SIZE:], aad)
    except InvalidTag:
        raise EntryAuthError("entry failed authentication") from None
    return json.loads(plaintext)


# -- conformance vectors ------------------------------------------------------

def load_vectors(path: str | Path) -> list[dict]:
    """Parse a vector file: ``<mode> key=value ...`` per line, ``#`` comments.

    Values are hex strings except ``p`` and ``g`` which are decimal.
    """
    records = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        mode, *pairs = line.split()
        rec: dict = {"mode": mode, "line": lineno}
        for pair in pairs:
            key, sep, value = pair.partition("=")
            if not sep:
                raise ValueError(f"{path}:{lineno}: expected key=value, got {pair!r}")
            rec[key] = int(value) if key in ("p", "g") else bytes.fromhex(value)
        records.append(rec)
    return records
