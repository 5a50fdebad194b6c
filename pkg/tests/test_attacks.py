import pytest

from petrace.config import ProtocolConfig, SimConfig
from petrace.crypto import AuthToken, PetToken
from petrace.device import Device
from petrace.sim.attacks import (attack_linkability, attack_one_entry, attack_replay,
                                 false_positive_rate, rate_limit_probe)
from petrace.sim.audit import audit_linkability
from petrace.sim.trace import generate_trace, parse_trace
from petrace.transport import EsrReq, StatelessEsr, Upload

EMPTY = parse_trace("population 2\nhorizon_days 2\n")


class LeakyDevice(Device):
    """Uploads its own RTL tokens: the mistake the linkability audit must catch."""

    def build_upload_batch(self):
        batch = super().build_upload_batch()
        by_pet = {r.pet: r for r in self.state.etl}
        own = [e.pet for e in self.state.rtl]
        return [Upload(own[k % len(own)], by_pet[m.pet].day, m.duration, m.token)
                for k, m in enumerate(batch)]


def tok(i):
    return PetToken(bytes([i]) * 32)


def up(i):
    return Upload(tok(i), 0, 300, AuthToken(b"R", 1))


def test_audit_linkability_clean():
    recs = [(0, EsrReq(b"a", b"", (tok(1), tok(2)))), (1, up(1)), (1, up(3)),
            (1, EsrReq(b"b", b"", (tok(4),)))]
    r = audit_linkability(recs)
    assert r.passed and r.detail["cross_device_matches"] == 1


def test_audit_linkability_self_overlap():
    r = audit_linkability([(0, EsrReq(b"a", b"", (tok(1),))), (0, up(1))])
    assert not r.passed and r.detail["self_overlap"] == 1


def test_audit_linkability_shared_request_token():
    r = audit_linkability([(0, EsrReq(b"a", b"", (tok(1),))),
                           (1, EsrReq(b"b", b"", (tok(1),)))])
    assert not r.passed and r.detail["cross_device_shared"] == 1


def test_audit_linkability_anonymous_upload_checked_against_all():
    r = audit_linkability([EsrReq(b"a", b"", (tok(1),)), up(1)])
    assert not r.passed


def test_audit_linkability_stateless_needs_sender():
    recs = [(0, StatelessEsr(1, 1, AuthToken(b"R", 1), (tok(1),))),
            (0, StatelessEsr(1, 0, AuthToken(b"S", 1), (tok(1),)))]
    assert audit_linkability(recs).passed


def test_replay_attack(signing_keys):
    v = attack_replay(EMPTY, SimConfig(), seed=2, issuer_keys=signing_keys)
    assert v.passed, v.detail
    m = v.detail["matches"]
    assert m["replay_across_epochs"] == m["replay_same_epoch"] == 0
    assert m["relay_across_epochs"] == 0
    assert m["relay_within_epoch"] == 1
    assert not v.detail["notified"]["replay_across_epochs"]


def test_replay_rejects_short_epochs(signing_keys):
    cfg = SimConfig(protocol=ProtocolConfig(epoch_duration_sec=600))
    with pytest.raises(ValueError):
        attack_replay(EMPTY, cfg, seed=2, issuer_keys=signing_keys)


def test_one_entry_attack(signing_keys):
    v = attack_one_entry(EMPTY, SimConfig(), seed=4, issuer_keys=signing_keys, trials=400,
                         p_notify=0.1)
    assert v.passed, v.detail
    assert v.detail["mitigations_off"]["adversary_learns_status"]
    assert v.detail["mitigations_off"]["rtl_entries"] == 1
    assert not v.detail["min_count_rule"]["adversary_learns_status"]


def test_rate_limit_probe(signing_keys):
    r = rate_limit_probe(ProtocolConfig(), 1, issuer_keys=signing_keys)
    assert r == {"attempts": 96, "allowed_per_day": 4, "limit": 4}


def test_false_positive_rate_edges(signing_keys):
    assert false_positive_rate(ProtocolConfig(), 1, 50, 0.0, issuer_keys=signing_keys)["ones"] == 0
    assert false_positive_rate(ProtocolConfig(), 1, 50, 1.0, issuer_keys=signing_keys)["ones"] == 50


@pytest.fixture(scope="module")
def trace():
    return generate_trace(10, 4, seed=8, diagnosis_day=2, n_diagnosed=2, contacts_per_day=20)


def test_linkability_honest(signing_keys, trace):
    v = attack_linkability(trace, SimConfig(), seed=1, issuer_keys=signing_keys)
    assert v.passed, v.detail
    assert v.detail["upload_tokens"] > 0


def test_linkability_catches_leaky_device(signing_keys, trace):
    v = attack_linkability(trace, SimConfig(), seed=1, issuer_keys=signing_keys,
                           device_cls=LeakyDevice)
    assert not v.passed and v.detail["self_overlap"] > 0
