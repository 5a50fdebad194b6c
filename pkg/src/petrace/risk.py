"""Exposure risk scoring and the notification decision.

Scoring is a strategy: anything with a ``score(lepm, today)`` method can be
plugged into the server. The default adds up exposure seconds over the
contagious window, which keeps daily scores additive so the state-less
variant aggregates to exactly the same value.
"""

from __future__ import annotations

from typing import Iterable, Protocol, Sequence


class Scorer(Protocol):
    def score(self, lepm: Sequence[tuple[int, float]], today: int) -> float: ...


class AdditiveScorer:
    def __init__(self, ct_days: int = 14):
        self.ct_days = ct_days

    def score(self, lepm, today):
        return score(lepm, today, self.ct_days)


def score(lepm: Iterable[tuple[int, float]], today: int, ct_days: int = 14) -> float:
    total = 0
    for day, duration in lepm:
        if duration < 0:
            raise ValueError("negative exposure duration")
        if today - day <= ct_days:
            total += duration
    return total


def decide(value: float, threshold: float) -> bool:
    return value > threshold


def probabilistic_notify(decision: bool, p: float, rng) -> bool:
    """OR the decision with a Bernoulli(p) draw to give "1" replies deniability."""
    if decision:
        return True
    return p > 0 and rng.random() < p


def aggregate_daily(daily_scores: Iterable[float]) -> float:
    return sum(daily_scores)


def make_scorer(name: str, ct_days: int) -> Scorer:
    if name == "additive":
        return AdditiveScorer(ct_days)
    raise ValueError(f"unknown scorer {name!r}")
