"""Adversarial scenarios: replay/relay of beacons and the single-entry attack."""

from __future__ import annotations

import dataclasses
import math
import random
from dataclasses import dataclass, field
from typing import Callable

from ..config import SimConfig
from ..authority import HealthAuthority, Role, TokenIssuer
from ..crypto import PetToken, obtain_token
from ..server import Server
from ..transport import Status
from ..risk import make_scorer
from .audit import audit_linkability
from .trace import ContactTrace
from .world import Emitter, World


@dataclass
class AttackVerdict:
    name: str
    passed: bool
    detail: dict = field(default_factory=dict)

    @property
    def verdict(self) -> str:
        return "PASS" if self.passed else "FAIL"

    def to_dict(self) -> dict:
        return {"verdict": self.verdict, **self.detail}


class ScriptedEmitter(Emitter):
    """An attacker radio; ``script(world, now)`` returns the deliveries."""

    def __init__(self, script: Callable, until: int):
        self.script = script
        self.until = until

    def deliveries(self, world, now):
        return self.script(world, now)

    def active(self, now):
        return now <= self.until


def _attacker_addr(rng: random.Random) -> bytes:
    raw = bytearray(rng.randbytes(6))
    raw[0] |= 0xC0
    return bytes(raw)


def _attributable(world: World, i: int) -> int:
    """EList matches that landed on tokens held by device ``i``."""
    held = {e.pet.value for e in world.devices[i].state.rtl}
    return sum(1 for t in world.server.matched_tokens if t in held)


def attack_replay(trace: ContactTrace, config: SimConfig, seed: int, *,
                  rsa_bits: int = 1024, issuer_keys: dict | None = None,
                  attack_epoch: int | None = None) -> AttackVerdict:
    """Eve records a victim's beacons and plays them to bystanders.

    Four extra devices sit next to Eve (never next to the victim):
    one hears a replay in a later epoch, one hears it in the same epoch,
    and two are relayed live to the victim, inside one epoch and with a
    one-epoch store-and-forward delay. The victim is then diagnosed.
    """
    p = config.protocol
    dur = p.epoch_duration_sec
    world = World(config, trace.population, seed, mode="stateful", rsa_bits=rsa_bits,
                  issuer_keys=issuer_keys)
    try:
        world.load_trace(trace)
        victim, cross, same, relay_in, relay_cross = (world.add_device() for _ in range(5))
        rng = random.Random(f"{seed}/eve")
        eve = [_attacker_addr(rng) for _ in range(4)]
        e = attack_epoch if attack_epoch is not None else 2
        t_e, t_next = e * dur, (e + 1) * dur
        session = 10 * 60
        if session < p.min_encounter_sec or session + 120 > dur:
            raise ValueError("epoch too short for the attack sessions")
        captured: dict[str, list[bytes]] = {}

        def capture():
            captured["victim"] = list(world.payloads(victim))

        def same_epoch(w, now):
            return [(same, eve[0], captured["victim"]),
                    (relay_in, eve[1], w.payloads(victim)),
                    (victim, eve[2], w.payloads(relay_in))]

        def next_epoch(w, now):
            return [(cross, eve[0], captured["victim"]),
                    (relay_cross, eve[1], captured["victim"]),
                    (victim, eve[3], w.payloads(relay_cross))]

        world.schedule(t_e + 30, 1, capture)
        world.schedule(t_e + 60, 1, lambda: world.add_emitter(
            ScriptedEmitter(same_epoch, t_e + 60 + session), world.now))
        world.schedule(t_next + 60, 1, lambda: world.add_emitter(
            ScriptedEmitter(next_epoch, t_next + 60 + session), world.now))
        for i in (victim, cross, same, relay_in, relay_cross):
            for t in (t_e, t_next):
                world.schedule_tick(i, t + 60 + session + p.peer_loss_timeout_sec + 1)
        world.schedule(t_next + 3 * dur, 1, world.diagnose, victim)
        end = max(trace.horizon_sec,
                  t_next + 3 * dur + config.channel.mix_delay_max_sec + 3 * p.esr_min_epochs * dur)
        world.run_until(end)
        world.mix.flush()
        counts = {name: _attributable(world, i) for name, i in
                  (("replay_across_epochs", cross), ("replay_same_epoch", same),
                   ("relay_within_epoch", relay_in), ("relay_across_epochs", relay_cross))}
        notified = {name: world.outcomes[i].notified_ever for name, i in
                    (("replay_across_epochs", cross), ("replay_same_epoch", same),
                     ("relay_within_epoch", relay_in), ("relay_across_epochs", relay_cross))}
        passed = (counts["replay_across_epochs"] == 0 and counts["replay_same_epoch"] == 0
                  and counts["relay_across_epochs"] == 0)
        return AttackVerdict("replay", passed, {
            "matches": counts, "notified": notified,
            "known_bound": "a live relay inside a single epoch can create a match"})
    finally:
        world.close()


def _one_entry_world(config: SimConfig, seed: int, rsa_bits: int, issuer_keys) -> tuple:
    """A victim and an adversary meet once; the victim is then diagnosed."""
    p = config.protocol
    dur = p.epoch_duration_sec
    world = World(config, 0, seed, mode="stateful", rsa_bits=rsa_bits, issuer_keys=issuer_keys)
    victim, adversary = world.add_device(), world.add_device()
    duration = p.risk_threshold_sec + 60
    if duration > dur - 120:
        raise ValueError("one-entry scenario needs risk_threshold_sec < epoch_duration_sec - 180")
    start = 2 * dur + 60

    def meet(w, now):
        return [(adversary, w.addr[victim], w.payloads(victim)),
                (victim, w.addr[adversary], w.payloads(adversary))]

    world.add_emitter(ScriptedEmitter(meet, start + duration), start)
    for i in (victim, adversary):
        world.schedule_tick(i, start + duration + p.peer_loss_timeout_sec + 1)
    world.schedule(start + duration + dur, 1, world.diagnose, victim)
    return world, victim, adversary


def _adversary_learns(config: SimConfig, seed: int, rsa_bits: int, issuer_keys) -> dict:
    world, victim, adversary = _one_entry_world(config, seed, rsa_bits, issuer_keys)
    p = config.protocol
    try:
        # long enough for the upload to leave the mix and two request rounds to follow
        world.run_until(6 * p.epoch_duration_sec + config.channel.mix_delay_max_sec
                        + 2 * p.esr_min_epochs * p.epoch_duration_sec)
        out = world.outcomes[adversary]
        return {"rtl_entries": len(world.devices[adversary].state.rtl),
                "requests": out.requests, "reply_at_risk": out.notified_ever,
                "victim_uploads": world.server.stats["uploads"]}
    finally:
        world.close()


def attack_one_entry(trace: ContactTrace, config: SimConfig, seed: int, *,
                     rsa_bits: int = 1024, issuer_keys: dict | None = None,
                     trials: int = 2000, p_notify: float = 0.05) -> AttackVerdict:
    """The adversary holds exactly one RTL entry (its encounter with the
    victim), so an at-risk reply identifies the victim."""
    # a single encounter lives inside one epoch, so the threshold must fit in it
    threshold = min(config.protocol.risk_threshold_sec, config.protocol.epoch_duration_sec // 2)
    base = dataclasses.replace(config.protocol, notify_p=0.0, risk_threshold_sec=threshold)
    off = dataclasses.replace(config, protocol=base,
                              scorer=dataclasses.replace(config.scorer, min_match_count=1))
    count_rule = dataclasses.replace(off, scorer=dataclasses.replace(off.scorer,
                                                                     min_match_count=2))
    without = _adversary_learns(off, seed, rsa_bits, issuer_keys)
    with_count = _adversary_learns(count_rule, seed, rsa_bits, issuer_keys)
    rate = rate_limit_probe(base, seed, rsa_bits, issuer_keys)
    fp = false_positive_rate(base, seed, trials, p_notify, rsa_bits, issuer_keys)
    passed = (without["reply_at_risk"] and not with_count["reply_at_risk"]
              and rate["allowed_per_day"] <= base.esr_per_day and fp["within_3_sigma"])
    return AttackVerdict("one-entry", passed, {
        "mitigations_off": {**without, "adversary_learns_status": without["reply_at_risk"]},
        "min_count_rule": {**with_count, "adversary_learns_status": with_count["reply_at_risk"]},
        "rate_limiting": rate,
        "probabilistic": fp,
    })


def _bare_server(protocol, seed: int, rsa_bits: int, issuer_keys, clock) -> tuple:
    authority = HealthAuthority(random.Random(f"{seed}/authority"))
    issuer = TokenIssuer(authority, bits=rsa_bits, keys=issuer_keys)
    server = Server(protocol, issuer, scorer=make_scorer("additive", protocol.ct_days),
                    rng=random.Random(f"{seed}/server"),
                    notify_rng=random.Random(f"{seed}/server-notify"), clock=clock)
    return server, issuer


def _register(server: Server, issuer, rng: random.Random, phone: str) -> tuple[bytes, bytes]:
    key = issuer.public_key(Role.REGISTRATION)
    token = obtain_token(rng, key, lambda b: issuer.issue_registration(phone, b))
    return server.register(token)


def rate_limit_probe(protocol, seed: int, rsa_bits: int = 1024,
                     issuer_keys: dict | None = None) -> dict:
    """One adversary asks once per epoch for a whole day."""
    now = [0]
    server, issuer = _bare_server(protocol, seed, rsa_bits, issuer_keys, lambda: now[0])
    rng = random.Random(f"{seed}/probe")
    id, ek = _register(server, issuer, rng, "+probe")
    statuses = []
    start = protocol.esr_min_epochs
    for epoch in range(start, start + protocol.epochs_per_day):
        now[0] = epoch * protocol.epoch_duration_sec
        statuses.append(server.handle_esr(id, ek, [], epoch))
    allowed = sum(1 for s in statuses if s != Status.RATE_LIMITED)
    return {"attempts": len(statuses), "allowed_per_day": allowed,
            "limit": protocol.esr_per_day}


def false_positive_rate(protocol, seed: int, trials: int, p_notify: float,
                        rsa_bits: int = 1024, issuer_keys: dict | None = None) -> dict:
    """Non-exposed users asking with random tokens; counts "1" replies."""
    proto = dataclasses.replace(protocol, notify_p=p_notify)
    epoch = proto.esr_min_epochs
    server, issuer = _bare_server(proto, seed, rsa_bits, issuer_keys,
                                  lambda: epoch * proto.epoch_duration_sec)
    rng = random.Random(f"{seed}/fp")
    ones = 0
    for k in range(trials):
        id, ek = _register(server, issuer, rng, f"+fp{k}")
        tokens = [PetToken(rng.randbytes(32)) for _ in range(4)]
        if server.handle_esr(id, ek, tokens, epoch) == Status.AT_RISK:
            ones += 1
    rate = ones / trials if trials else 0.0
    sigma = math.sqrt(p_notify * (1 - p_notify) / trials) if trials else 0.0
    return {"trials": trials, "p": p_notify, "ones": ones, "rate": rate,
            "within_3_sigma": abs(rate - p_notify) <= 3 * sigma}


def attack_linkability(trace: ContactTrace, config: SimConfig, seed: int, *,
                       rsa_bits: int = 1024, issuer_keys: dict | None = None,
                       device_cls=None) -> AttackVerdict:
    """Honest-but-curious server: try to link request tokens to uploads."""
    kw = {"device_cls": device_cls} if device_cls else {}
    world = World(config, trace.population, seed, rsa_bits=rsa_bits,
                  issuer_keys=issuer_keys, **kw)
    try:
        world.load_trace(trace)
        world.run_until(trace.horizon_sec)
        world.mix.flush()
        result = audit_linkability(world.sent)
        return AttackVerdict("linkability", result.passed, result.detail)
    finally:
        world.close()
