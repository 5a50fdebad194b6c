"""Server-side privacy audits over a finished run."""

from __future__ import annotations

import random
from dataclasses import dataclass, field

from ..crypto import EntryAuthError, decrypt_entry
from ..server import Server
from ..transport import EsrReq, StatelessEsr, Upload, encode

PLAINTEXT_MARKERS = (b'"un"', b'"sre"', b'"lepm"', b'"ers"', b'"notified_epoch"')


@dataclass
class AuditResult:
    name: str
    passed: bool
    detail: dict = field(default_factory=dict)

    @property
    def verdict(self) -> str:
        return "PASS" if self.passed else "FAIL"

    def to_dict(self) -> dict:
        return {"verdict": self.verdict, **self.detail}


def audit_linkability(records) -> AuditResult:
    """Per-sender disjointness of request and upload tokens.

    ``records`` holds messages or ``(sender, message)`` pairs; senders are
    simulator ground truth the server never sees. A sender's uploads must
    not share a token with its own requests, and no token may appear in
    the requests of two senders. Uploads of unknown origin are checked
    against every request. Overlap between one sender's requests and
    another's uploads is a legitimate match and is only counted.
    """
    requested: dict[bytes, object] = {}
    uploaded: dict[bytes, set] = {}
    shared = 0
    for rec in records:
        sender, msg = rec if isinstance(rec, tuple) else (None, rec)
        if isinstance(msg, (EsrReq, StatelessEsr)):
            if sender is None and isinstance(msg, EsrReq):
                sender = msg.id
            for pet in msg.tokens:
                owner = requested.setdefault(pet.value, sender)
                if sender is not None and owner is not None and owner != sender:
                    shared += 1
        elif isinstance(msg, Upload):
            uploaded.setdefault(msg.pet.value, set()).add(sender)
    self_overlap = sum(1 for tok, senders in uploaded.items() if tok in requested
                       and (None in senders or requested[tok] in senders))
    matches = sum(1 for tok in uploaded if tok in requested) - self_overlap
    return AuditResult("unlinkability", self_overlap == 0 and shared == 0, {
        "request_tokens": len(requested), "upload_tokens": len(uploaded),
        "self_overlap": self_overlap, "cross_device_shared": shared,
        "cross_device_matches": matches})


def audit_key_amnesia(server: Server, entry_keys) -> AuditResult:
    snapshot = server.snapshot()
    wire = b"".join(encode(m) for m in server.transcript)
    retained = sum(1 for ek in entry_keys
                   if ek and (ek in snapshot or ek.hex().encode() in snapshot or ek in wire))
    return AuditResult("key_amnesia", retained == 0 and server.live_keys == 0, {
        "retained_keys": retained, "live_keys": server.live_keys})


def audit_match_once(server: Server) -> AuditResult:
    matched = server.matched_tokens
    duplicates = len(matched) - len(set(matched))
    lingering = sum(1 for t in set(matched) if t in server.elist)
    return AuditResult("match_once", duplicates == 0 and lingering == 0, {
        "matched": len(matched), "duplicates": duplicates, "lingering": lingering})


def audit_encryption_at_rest(server: Server, seed: int = 0) -> AuditResult:
    snapshot = server.snapshot()
    markers = [m.decode() for m in PLAINTEXT_MARKERS if m in snapshot]
    rng = random.Random(seed)
    readable = 0
    for id, blob in server.idtable.items():
        try:
            decrypt_entry(rng.randbytes(32), blob, aad=id)
            readable += 1
        except EntryAuthError:
            pass
    return AuditResult("encryption_at_rest", not markers and readable == 0, {
        "entries": len(server.idtable), "readable_without_key": readable,
        "plaintext_markers": markers})
