"""Acceptance criteria 1-12.

Each test records a one-line verdict through ``criterion``; conftest prints
the lines at the end of the session, and a criterion that never recorded a
result (because it raised) is shown as FAIL.
"""

import hashlib
import random
import time

import pytest

from petrace.ble import (build_beacon, build_fragment_sequence, parse_adv, parse_scan_rsp,
                         reassemble)
from petrace.config import ProtocolConfig, SimConfig
from petrace.crypto import (AuthToken, GroupParams, ServerSigningKey, blind, dh_shared,
                            derive_pet_pair, encounter_tokens, gen_identity,
                            identity_from_secret, obtain_token, random_blinding_factor,
                            sign_blinded, unblind, verify_token)
from petrace.authority import Role
from petrace.server import TokenReused
from petrace.sim.attacks import attack_linkability, attack_replay, false_positive_rate
from petrace.sim.harness import run
from petrace.sim.trace import generate_trace
from petrace.transport import Status

from conftest import criterion, register
from oracles import expected_notified, pet_pair
from test_attacks import LeakyDevice
from test_ble import golden

SEED = 7


@pytest.fixture(scope="module")
def trace():
    return generate_trace(50, 14, seed=SEED)


@pytest.fixture(scope="module")
def stateful(trace, signing_keys):
    t0 = time.perf_counter()
    report = run(trace, SimConfig(), SEED, "stateful", issuer_keys=signing_keys)
    return report, time.perf_counter() - t0


@pytest.fixture(scope="module")
def stateless(trace, signing_keys):
    return run(trace, SimConfig(), SEED, "stateless", issuer_keys=signing_keys)


def test_c01_pet_symmetry():
    rng = random.Random(101)
    t0 = time.perf_counter()
    failures = 0
    for _ in range(1000):
        a, b = gen_identity(rng, 0), gen_identity(rng, 0)
        shared_a, shared_b = dh_shared(a.secret, b.ebid), dh_shared(b.secret, a.ebid)
        a_rtl, a_etl = encounter_tokens(a, b.ebid)
        b_rtl, b_etl = encounter_tokens(b, a.ebid)
        ok = (shared_a == shared_b and derive_pet_pair(shared_a) == derive_pet_pair(shared_b)
              and a_rtl == b_etl and b_rtl == a_etl and a_rtl != a_etl)
        failures += not ok
    elapsed = time.perf_counter() - t0
    passed = failures == 0 and elapsed < 5
    criterion(1, passed, f"PET symmetry: {failures} failures / 1000, {elapsed:.2f}s (< 5s)")
    assert passed


def test_c02_toy_modp_vector():
    group = GroupParams.toy(23, 5)
    a, b = identity_from_secret(4, 0, group), identity_from_secret(3, 0, group)
    shared = dh_shared(4, b.ebid, group)
    assert shared == dh_shared(3, a.ebid, group)
    pet1, pet2 = derive_pet_pair(shared)
    oracle1, oracle2 = pet_pair((18).to_bytes(4, "big"))
    # the greater EBID (B = 10) keeps PET1
    a_rtl, a_etl = encounter_tokens(a, b.ebid, group)
    passed = (int.from_bytes(shared, "big") == 18 and pet1.value == oracle1
              and pet2.value == oracle2
              and oracle1 == hashlib.sha256(b"1" + bytes([0, 0, 0, 18])).digest()
              and (a_rtl, a_etl) == (pet2, pet1))
    criterion(2, passed, f"toy group: shared={int.from_bytes(shared, 'big')} (want 18), "
                         f"PET1={pet1.hex()[:16]}.. matches hash oracle")
    assert passed


def test_c03_blind_tokens(make_server):
    toy = ServerSigningKey(33, 3, 7, insecure=True)
    fdh = lambda R, n: 4  # noqa: E731
    blinded = blind(b"R", 2, toy.public, fdh)
    rep = sign_blinded(blinded, toy)
    sigma = unblind(rep, 2, 33)
    toy_ok = (blinded, rep, sigma) == (32, 32, 16) and pow(16, 3, 33) == 4

    key = ServerSigningKey.generate(2048)
    rng = random.Random(303)
    agree = 0
    for _ in range(100):
        R = rng.randbytes(32)
        c1 = random_blinding_factor(rng, key.n)
        c2 = random_blinding_factor(rng, key.n)
        while c2 == c1:
            c2 = random_blinding_factor(rng, key.n)
        s1 = unblind(sign_blinded(blind(R, c1, key.public), key), c1, key.n)
        s2 = unblind(sign_blinded(blind(R, c2, key.public), key), c2, key.n)
        agree += s1 == s2 and verify_token(AuthToken(R, s1), key.public)

    server, issuer = make_server()
    rejected = 0
    for k in range(100):
        token = obtain_token(rng, issuer.public_key(Role.REGISTRATION),
                             lambda b: issuer.issue_registration(f"+ds{k}", b))
        server.register(token)
        try:
            server.register(token)
        except TokenReused:
            rejected += 1
    passed = toy_ok and agree == 100 and rejected == 100
    criterion(3, passed, f"blind tokens: toy sigma={sigma} (want 16), 2048-bit blinding "
                         f"invariance {agree}/100, double-spend rejected {rejected}/100")
    assert passed


def test_c04_end_to_end(trace, stateful):
    report, elapsed = stateful
    p = ProtocolConfig()
    expected, exposure = expected_notified(trace, threshold=p.risk_threshold_sec)
    got = report.notified()
    at_risk_outside = [d["device"] for d in report.devices
                       if d["at_risk_replies"] and d["device"] not in expected]
    passed = got == expected and not at_risk_outside and elapsed < 60
    criterion(4, passed, f"end to end: notified {len(got)} devices, oracle {len(expected)}, "
                         f"missing={sorted(expected - got)} extra={sorted(got - expected)}, "
                         f"{elapsed:.1f}s (< 60s)")
    assert passed


def test_c05_unlinkability(trace, stateful, signing_keys):
    report, _ = stateful
    honest = report.audits["unlinkability"]
    leaky = attack_linkability(trace, SimConfig(), SEED, issuer_keys=signing_keys,
                               device_cls=LeakyDevice)
    passed = honest["verdict"] == "PASS" and not leaky.passed
    criterion(5, passed,
              f"unlinkability: honest self_overlap={honest['self_overlap']} "
              f"cross_device_shared={honest['cross_device_shared']} -> {honest['verdict']}; "
              f"negative control self_overlap={leaky.detail['self_overlap']} -> {leaky.verdict}")
    assert passed


def test_c06_replay_relay(signing_keys):
    empty = generate_trace(2, 3, seed=1, contacts_per_day=0, long_contacts_per_day=0,
                           short_contacts_per_day=0, n_diagnosed=0, diagnosis_day=1,
                           test_results=0)
    v = attack_replay(empty, SimConfig(), SEED, issuer_keys=signing_keys)
    m = v.detail["matches"]
    passed = m["replay_across_epochs"] == 0 and m["relay_within_epoch"] >= 1
    criterion(6, passed, f"replay/relay: replay across epochs {m['replay_across_epochs']} "
                         f"matches (want 0), relay within epoch {m['relay_within_epoch']} (want >= 1)")
    assert passed


def test_c07_rate_limiting(make_server, rng):
    p = ProtocolConfig(esr_per_day=4, epoch_duration_sec=900)
    server, issuer = make_server(p)
    id, ek = register(server, issuer, rng, "+rate")
    last = 1000
    first = server.handle_esr(id, ek, [], last)
    at23 = server.handle_esr(id, ek, [], last + 23)
    at24 = server.handle_esr(id, ek, [], last + 24)
    passed = (p.esr_min_epochs == 24 and first == Status.NOT_AT_RISK
              and at23 == Status.RATE_LIMITED and at24 == Status.NOT_AT_RISK)
    criterion(7, passed, f"rate limit: esr_min={p.esr_min_epochs}, +23 epochs -> "
                         f"{Status(at23).name}, +24 epochs -> {Status(at24).name}")
    assert passed


def test_c08_data_breach(stateful, stateless):
    lines = []
    passed = True
    for report in (stateful[0], stateless):
        enc, amnesia = report.audits["encryption_at_rest"], report.audits["key_amnesia"]
        ok = (enc["verdict"] == "PASS" and enc["readable_without_key"] == 0
              and not enc["plaintext_markers"] and amnesia["retained_keys"] == 0
              and amnesia["live_keys"] == 0)
        passed &= ok
        lines.append(f"{report.mode}: {enc['entries']} entries, "
                     f"{enc['readable_without_key']} readable, "
                     f"markers={enc['plaintext_markers']}, "
                     f"retained_keys={amnesia['retained_keys']}")
    criterion(8, passed, "data breach: " + "; ".join(lines))
    assert passed


def test_c09_probabilistic_notification(signing_keys):
    t0 = time.perf_counter()
    fp = false_positive_rate(ProtocolConfig(), SEED, 10_000, 0.05, issuer_keys=signing_keys)
    elapsed = time.perf_counter() - t0
    passed = 0.04 <= fp["rate"] <= 0.06 and elapsed < 10
    criterion(9, passed, f"probabilistic reply: {fp['ones']}/10000 = {fp['rate']:.4f} "
                         f"in [0.04, 0.06], {elapsed:.1f}s (< 10s)")
    assert passed


def test_c10_stateful_stateless(stateful, stateless):
    full = stateful[0]
    diffs = [a["device"] for a, b in zip(full.devices, stateless.devices)
             if a["final_score"] != b["final_score"]]
    passed = not diffs and full.notified() == stateless.notified()
    criterion(10, passed, f"mode equivalence: {len(diffs)} score mismatches over "
                          f"{len(full.devices)} devices, notified sets "
                          f"{'identical' if full.notified() == stateless.notified() else 'differ'}"
                          f" ({len(full.notified())} devices)")
    assert passed


def test_c11_ble_codec():
    rng = random.Random(1111)
    bad = 0
    for _ in range(1000):
        ebid = rng.randbytes(32)
        adv, rsp = build_beacon(ebid)
        low, high = build_fragment_sequence(ebid)
        ok = (len(adv), len(rsp), len(low), len(high)) == (29, 24, 29, 29)
        ok &= reassemble(parse_adv(adv).half, parse_scan_rsp(rsp)) == ebid
        ok &= reassemble(parse_adv(low).half, parse_adv(high).half) == ebid
        bad += not ok
    ebid = bytes(range(32))
    golden_ok = (list(build_beacon(ebid)) == [golden("adv_ind"), golden("scan_rsp")]
                 and list(build_fragment_sequence(ebid)) == [golden("frag_low"),
                                                             golden("frag_high")])
    passed = bad == 0 and golden_ok
    criterion(11, passed, f"BLE codec: {bad} failures / 1000 in both encodings, "
                          f"29/24-byte payloads, golden fixtures {'match' if golden_ok else 'differ'}")
    assert passed


def test_c12_determinism(trace, stateful, signing_keys):
    first = stateful[0].to_json()
    again = run(trace, SimConfig(), SEED, "stateful", issuer_keys=signing_keys).to_json()
    parallel = run(trace, SimConfig(), SEED, "stateful", parallel=True,
                   issuer_keys=signing_keys).to_json()
    passed = first == again == parallel
    criterion(12, passed, f"determinism: repeat run {'identical' if first == again else 'differs'}, "
                          f"parallel run {'identical' if first == parallel else 'differs'} "
                          f"({len(first)} bytes)")
    assert passed
