"""Contact traces: a line-oriented text format plus a synthetic generator.

Grammar (one item per line, ``#`` starts a comment)::

    population <N>
    horizon_days <D>
    <time_sec> start <a> <b>
    <time_sec> end <a> <b>
    <time_sec> diagnose <a>
    <time_sec> test <a> positive|negative

Header lines come first. Event times are non-decreasing, every ``start`` of a
pair is closed by an ``end`` of the same (unordered) pair, and device ids are
in ``[0, N)``.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field
from pathlib import Path

from ..config import SECONDS_PER_DAY


class TraceError(ValueError):
    pass


@dataclass(frozen=True)
class TraceEvent:
    time: int
    kind: str
    a: int
    b: int | None = None
    positive: bool | None = None

    def format(self) -> str:
        if self.kind in ("start", "end"):
            return f"{self.time} {self.kind} {self.a} {self.b}"
        if self.kind == "diagnose":
            return f"{self.time} diagnose {self.a}"
        return f"{self.time} test {self.a} {'positive' if self.positive else 'negative'}"


@dataclass
class ContactTrace:
    population: int
    horizon_days: int
    events: list[TraceEvent] = field(default_factory=list)

    @property
    def horizon_sec(self) -> int:
        return self.horizon_days * SECONDS_PER_DAY

    def contacts(self) -> list[tuple[int, int, int, int]]:
        """``(a, b, start, end)`` for every closed contact, in start order."""
        open_: dict[frozenset, tuple[int, int, int]] = {}
        out = []
        for ev in self.events:
            if ev.kind == "start":
                open_[frozenset((ev.a, ev.b))] = (ev.a, ev.b, ev.time)
            elif ev.kind == "end":
                a, b, start = open_.pop(frozenset((ev.a, ev.b)))
                out.append((a, b, start, ev.time))
        return sorted(out, key=lambda c: (c[2], c[0], c[1]))

    def diagnoses(self) -> dict[int, int]:
        return {ev.a: ev.time for ev in self.events if ev.kind == "diagnose"}

    def dumps(self) -> str:
        lines = [f"population {self.population}", f"horizon_days {self.horizon_days}"]
        lines += [ev.format() for ev in self.events]
        return "\n".join(lines) + "\n"

    def validate(self) -> None:
        parse_trace(self.dumps())


def parse_trace(text: str, source: str = "<trace>") -> ContactTrace:
    header: dict[str, int] = {}
    events: list[TraceEvent] = []
    open_pairs: dict[frozenset, int] = {}
    last_time = 0

    def fail(lineno: int, msg: str):
        raise TraceError(f"{source}:{lineno}: {msg}")

    def device(lineno: int, token: str) -> int:
        try:
            value = int(token)
        except ValueError:
            fail(lineno, f"device id {token!r} is not an integer")
        if not 0 <= value < header["population"]:
            fail(lineno, f"device id {value} outside [0, {header['population']})")
        return value

    for lineno, raw in enumerate(text.splitlines(), 1):
        parts = raw.split("#", 1)[0].split()
        if not parts:
            continue
        if parts[0] in ("population", "horizon_days"):
            if events:
                fail(lineno, f"{parts[0]} must precede events")
            if len(parts) != 2 or not parts[1].isdigit() or int(parts[1]) <= 0:
                fail(lineno, f"{parts[0]} expects one positive integer")
            header[parts[0]] = int(parts[1])
            continue
        missing = {"population", "horizon_days"} - set(header)
        if missing:
            fail(lineno, f"missing header {sorted(missing)}")
        try:
            time = int(parts[0])
        except ValueError:
            fail(lineno, f"bad time {parts[0]!r}")
        if time < last_time:
            fail(lineno, f"time {time} goes backwards (previous {last_time})")
        if time >= header["horizon_days"] * SECONDS_PER_DAY:
            fail(lineno, f"time {time} beyond the horizon")
        last_time = time
        kind = parts[1] if len(parts) > 1 else ""
        if kind in ("start", "end"):
            if len(parts) != 4:
                fail(lineno, f"{kind} expects two device ids")
            a, b = device(lineno, parts[2]), device(lineno, parts[3])
            if a == b:
                fail(lineno, "a device cannot meet itself")
            pair = frozenset((a, b))
            if kind == "start":
                if pair in open_pairs:
                    fail(lineno, f"contact {a}-{b} already open since line {open_pairs[pair]}")
                open_pairs[pair] = lineno
            else:
                if pair not in open_pairs:
                    fail(lineno, f"end without start for {a}-{b}")
                del open_pairs[pair]
            events.append(TraceEvent(time, kind, a, b))
        elif kind == "diagnose":
            if len(parts) != 3:
                fail(lineno, "diagnose expects one device id")
            events.append(TraceEvent(time, kind, device(lineno, parts[2])))
        elif kind == "test":
            if len(parts) != 4 or parts[3] not in ("positive", "negative"):
                fail(lineno, "test expects a device id and positive|negative")
            events.append(TraceEvent(time, kind, device(lineno, parts[2]),
                                     positive=parts[3] == "positive"))
        else:
            fail(lineno, f"unknown event {kind!r}")
    if len(header) < 2:
        raise TraceError(f"{source}: missing population/horizon_days header")
    if open_pairs:
        lines = sorted(open_pairs.values())
        raise TraceError(f"{source}:{lines[0]}: contact never ends")
    return ContactTrace(header["population"], header["horizon_days"], events)


def load_trace(path: str | Path) -> ContactTrace:
    return parse_trace(Path(path).read_text(), str(path))


def generate_trace(population: int = 50, days: int = 14, seed: int = 0, *,
                   contacts_per_day: int = 25, long_contacts_per_day: int = 2,
                   short_contacts_per_day: int = 3, n_diagnosed: int = 5,
                   diagnosis_day: int = 10, epoch_duration_sec: int = 900,
                   test_results: int = 2) -> ContactTrace:
    """Random contacts aligned so that every measured duration is exact.

    Contacts start on whole minutes. Ordinary contacts stay inside one epoch
    and end at least two minutes before the next rotation; long contacts span
    one or more rotations with every per-epoch piece of at least three
    minutes. Short contacts (one minute) fall below the encounter threshold.
    Diagnoses all happen on ``diagnosis_day``, after the last contact.
    """
    if not 0 < diagnosis_day < days:
        raise ValueError("diagnosis_day must fall inside the horizon")
    rng = random.Random(seed)
    epochs_per_day = SECONDS_PER_DAY // epoch_duration_sec
    intervals: list[tuple[int, int, int, int]] = []
    used: set[tuple[frozenset, int]] = set()

    def place(a: int, b: int, start: int, end: int) -> bool:
        pair = frozenset((a, b))
        first, last = start // epoch_duration_sec, end // epoch_duration_sec
        # a pair meets at most once per epoch and its peer-loss timeout stays clear
        span = range(first, last + 2)
        if any((pair, e) in used for e in span):
            return False
        used.update((pair, e) for e in span)
        intervals.append((start, end, a, b))
        return True

    for day in range(diagnosis_day):
        base = day * SECONDS_PER_DAY
        kinds = (["normal"] * contacts_per_day + ["long"] * long_contacts_per_day
                 + ["short"] * short_contacts_per_day)
        for kind in kinds:
            for _ in range(20):
                a, b = rng.sample(range(population), 2)
                epoch = rng.randrange(epochs_per_day - 4)
                epoch_start = base + epoch * epoch_duration_sec
                start = epoch_start + 60 * rng.randint(1, 3)
                if kind == "normal":
                    end = start + 60 * rng.randint(3, 10)
                elif kind == "short":
                    end = start + 60
                else:
                    spans = rng.randint(1, 3)
                    end = epoch_start + spans * epoch_duration_sec + 60 * rng.randint(3, 12)
                if place(a, b, start, end):
                    break

    events = []
    for start, end, a, b in intervals:
        events.append(TraceEvent(start, "start", a, b))
        events.append(TraceEvent(end, "end", a, b))
    diag_base = diagnosis_day * SECONDS_PER_DAY
    diagnosed = rng.sample(range(population), n_diagnosed)
    for dev in diagnosed:
        events.append(TraceEvent(diag_base + rng.randrange(3600, 12 * 3600), "diagnose", dev))
    test_base = min(diagnosis_day + 2, days - 1) * SECONDS_PER_DAY
    for dev in rng.sample(range(population), test_results):
        events.append(TraceEvent(test_base + rng.randrange(3600, 12 * 3600), "test", dev,
                                 positive=rng.random() < 0.5))
    order = {"start": 1, "end": 0, "diagnose": 2, "test": 3}
    events.sort(key=lambda ev: (ev.time, order[ev.kind], ev.a, ev.b or 0))
    return ContactTrace(population, days, events)
