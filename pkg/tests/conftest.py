import random
from pathlib import Path

import pytest

from petrace.authority import HealthAuthority, Role, TokenIssuer
from petrace.config import ProtocolConfig
from petrace.crypto import obtain_token
from petrace.risk import make_scorer
from petrace.server import Server

HERE = Path(__file__).parent


@pytest.fixture(scope="session")
def signing_keys():
    """RSA keys shared by every issuer in the session; generation is the slow part."""
    return {}


@pytest.fixture
def rng():
    return random.Random(1234)


class Clock:
    def __init__(self, now=0):
        self.now = now

    def __call__(self):
        return self.now


@pytest.fixture
def clock():
    return Clock()


@pytest.fixture
def make_server(signing_keys, clock):
    def build(config=None, *, min_match_count=1, seed=0):
        config = config or ProtocolConfig()
        authority = HealthAuthority(random.Random(f"{seed}/authority"))
        issuer = TokenIssuer(authority, bits=1024, keys=signing_keys)
        server = Server(config, issuer, scorer=make_scorer("additive", config.ct_days),
                        min_match_count=min_match_count, rng=random.Random(f"{seed}/server"),
                        notify_rng=random.Random(f"{seed}/notify"), clock=clock)
        return server, issuer
    return build


def register(server, issuer, rng, phone):
    key = issuer.public_key(Role.REGISTRATION)
    token = obtain_token(rng, key, lambda b: issuer.issue_registration(phone, b))
    return server.register(token)


def diagnosis_token(issuer, rng, code):
    key = issuer.public_key(Role.DIAGNOSIS)
    return obtain_token(rng, key, lambda b: issuer.issue_diagnosis(code, b))


# -- acceptance verdict lines -------------------------------------------------

ACCEPTANCE_COUNT = 12
_verdicts: dict[int, str] = {}


def criterion(number: int, passed: bool, detail: str) -> None:
    line = f"[{'PASS' if passed else 'FAIL'}] criterion {number}: {detail}"
    _verdicts[number] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    ran = [r for key in ("passed", "failed")
           for r in terminalreporter.stats.get(key, []) if "test_acceptance" in r.nodeid]
    if not ran:
        return
    terminalreporter.section("acceptance criteria")
    for n in range(1, ACCEPTANCE_COUNT + 1):
        terminalreporter.write_line(_verdicts.get(n, f"[FAIL] criterion {n}: did not complete"))
