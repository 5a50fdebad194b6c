"""Scenario driver and reports."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

from ..config import SimConfig
from ..crypto import decrypt_entry
from ..device import Device, day_of
from .audit import (AuditResult, audit_encryption_at_rest, audit_key_amnesia,
                    audit_linkability, audit_match_once)
from .trace import ContactTrace
from .world import World


@dataclass
class ScenarioReport:
    mode: str
    seed: int
    population: int
    horizon_days: int
    devices: list[dict] = field(default_factory=list)
    counters: dict = field(default_factory=dict)
    audits: dict[str, dict] = field(default_factory=dict)
    attacks: dict[str, dict] = field(default_factory=dict)

    @property
    def all_passed(self) -> bool:
        verdicts = [a["verdict"] for a in self.audits.values()]
        verdicts += [a["verdict"] for a in self.attacks.values()]
        return all(v == "PASS" for v in verdicts)

    def notified(self) -> set[int]:
        return {d["device"] for d in self.devices if d["notified"]}

    def to_dict(self) -> dict:
        return {"mode": self.mode, "seed": self.seed, "population": self.population,
                "horizon_days": self.horizon_days, "devices": self.devices,
                "counters": self.counters, "audits": self.audits, "attacks": self.attacks}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"

    def to_table(self) -> str:
        cols = ["device", "diagnosed", "notified", "first_notified_sec", "at_risk_replies",
                "requests", "encounters", "final_score"]
        rows = ["\t".join(cols)]
        for d in self.devices:
            rows.append("\t".join("" if d[c] is None else str(d[c]) for c in cols))
        return "\n".join(rows) + "\n"

    def summary(self) -> str:
        lines = [f"mode={self.mode} seed={self.seed} population={self.population} "
                 f"horizon_days={self.horizon_days}",
                 f"notified: {len(self.notified())} device(s) {sorted(self.notified())}"]
        lines += [f"{k}: {v}" for k, v in sorted(self.counters.items())]
        for name, audit in sorted({**self.audits, **self.attacks}.items()):
            lines.append(f"[{audit['verdict']}] {name}")
        return "\n".join(lines) + "\n"


def final_score(world: World, i: int, today: int) -> float:
    dev = world.devices[i]
    if world.mode == "stateless":
        return dev.stateless_score(today)
    blob = world.server.idtable[dev.state.id]
    # read with the device's own key, as the device would on its next request
    lepm = [tuple(x) for x in decrypt_entry(dev.state.ek, blob, aad=dev.state.id)["lepm"]]
    return world.server.scorer.score(lepm, today)


def run_audits(world: World) -> dict[str, AuditResult]:
    server = world.server
    keys = [d.state.ek for d in world.devices]
    results = [audit_linkability(world.sent), audit_key_amnesia(server, keys),
               audit_match_once(server), audit_encryption_at_rest(server, world.seed)]
    return {r.name: r for r in results}


def build_report(world: World, horizon_days: int) -> ScenarioReport:
    today = day_of(world.now)
    report = ScenarioReport(world.mode, world.seed, len(world.devices), horizon_days)
    for i, (dev, out) in enumerate(zip(world.devices, world.outcomes)):
        report.devices.append({
            "device": i,
            "diagnosed": out.diagnosed_sec is not None,
            "notified": out.notified_ever,
            "first_notified_sec": out.first_notified_sec,
            "at_risk_replies": out.at_risk_replies,
            "requests": out.requests,
            "encounters": dev.stats["encounters"],
            "final_score": final_score(world, i, today),
        })
    stats = world.server.stats
    report.counters = {
        "registrations": stats["registrations"],
        "uploads": stats["uploads"],
        "esr_requests": stats["esr_requests"],
        "stateless_requests": stats["stateless_requests"],
        "rate_limited": stats["rate_limited"],
        "matches": stats["matches"],
        "elist_remaining": world.server.elist_size,
        "uploads_in_flight": len(world.mix),
        "encounters": sum(d.stats["encounters"] for d in world.devices),
        "discarded_short": sum(d.stats["discarded_short"] for d in world.devices),
    }
    report.audits = {name: r.to_dict() for name, r in sorted(run_audits(world).items())}
    return report


def run(trace: ContactTrace, config: SimConfig, seed: int, mode: str = "stateful", *,
        parallel: bool = False, rsa_bits: int = 1024, device_cls: type[Device] = Device,
        issuer_keys: dict | None = None) -> ScenarioReport:
    world = World(config, trace.population, seed, mode=mode, parallel=parallel,
                  rsa_bits=rsa_bits, device_cls=device_cls, issuer_keys=issuer_keys)
    try:
        world.load_trace(trace)
        world.run_until(trace.horizon_sec)
        return build_report(world, trace.horizon_days)
    finally:
        world.close()
