"""Behavior-log parsing, tokenization and calendar time partitioning."""
from __future__ import annotations

import calendar
import json
import re
import string
from collections import Counter
from dataclasses import dataclass
from datetime import datetime, timezone
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np

GRANULARITIES = ("month", "quarter", "year")

_PUNCT = re.compile(f"[{re.escape(string.punctuation)}]")


@dataclass(frozen=True)
class BehaviorEvent:
    user_id: str
    timestamp: int
    tokens: tuple[str, ...]

    def __post_init__(self):
        if self.timestamp <= 0:
            raise ValueError(f"timestamp must be positive, got {self.timestamp}")


def simple_tokenize(text: str) -> list[str]:
    """Lowercase, strip ASCII punctuation, split on whitespace."""
    return _PUNCT.sub(" ", text.lower()).split()


def whitespace_tokenize(text: str) -> list[str]:
    return text.split()


TOKENIZERS: dict[str, Callable[[str], list[str]]] = {
    "simple": simple_tokenize,
    "whitespace": whitespace_tokenize,
}


def truncate_tokens(tokens: Sequence[str], tr: int) -> list[str]:
    if tr < 1:
        raise ValueError(f"truncation threshold must be >= 1, got {tr}")
    return list(tokens[:tr])


class LogStream:
    """Iterator over the events of a line-delimited JSON behavior log.

    Each line is ``{"user_id": str, "ts": int, "text": str}``.  Lines that do
    not parse are counted in ``skipped``; events whose token list is empty
    after tokenization and truncation are counted in ``dropped``.  The file
    is opened on construction, so an unreadable path fails immediately.
    """

    def __init__(self, path, tokenizer: str | Callable[[str], list[str]] = "simple",
                 truncate: int | None = None):
        self.path = path
        self.tokenize = TOKENIZERS[tokenizer] if isinstance(tokenizer, str) else tokenizer
        self.truncate = truncate
        self.skipped = 0
        self.dropped = 0
        self.emitted = 0
        self._fh = open(path, "r", encoding="utf-8")
        self._lines = self._iterate()

    def __iter__(self) -> Iterator[BehaviorEvent]:
        return self

    def __next__(self) -> BehaviorEvent:
        return next(self._lines)

    def _iterate(self) -> Iterator[BehaviorEvent]:
        cache: dict[str, tuple[str, ...]] = {}
        with self._fh:
            for line in self._fh:
                if not line.strip():
                    continue
                try:
                    rec = json.loads(line)
                    user, ts, text = rec["user_id"], rec["ts"], rec["text"]
                    if not isinstance(user, str) or not isinstance(text, str):
                        raise TypeError
                    if isinstance(ts, bool) or not isinstance(ts, int) or ts <= 0:
                        raise TypeError
                except (ValueError, KeyError, TypeError):
                    self.skipped += 1
                    continue
                tokens = cache.get(text)
                if tokens is None:
                    toks = self.tokenize(text)
                    if self.truncate is not None:
                        toks = truncate_tokens(toks, self.truncate)
                    tokens = cache[text] = tuple(toks)
                if not tokens:
                    self.dropped += 1
                    continue
                self.emitted += 1
                yield BehaviorEvent(user, ts, tokens)


def parse_log(path, tokenizer="simple", truncate: int | None = None) -> LogStream:
    return LogStream(path, tokenizer=tokenizer, truncate=truncate)


def group_by_user(events: Iterable[BehaviorEvent]) -> dict[str, list[BehaviorEvent]]:
    """Group events per user, each list stably sorted by timestamp."""
    users: dict[str, list[BehaviorEvent]] = {}
    for ev in events:
        users.setdefault(ev.user_id, []).append(ev)
    for evs in users.values():
        evs.sort(key=lambda e: e.timestamp)
    return dict(sorted(users.items()))


# --- calendar periods ------------------------------------------------------

def to_epoch(s: str) -> int:
    """Parse ``YYYY-MM-DD`` (UTC midnight) or an integer string to seconds."""
    if s.lstrip("-").isdigit():
        return int(s)
    dt = datetime.strptime(s, "%Y-%m-%d").replace(tzinfo=timezone.utc)
    return int(dt.timestamp())


def _unit_of(ts: np.ndarray, granularity: str) -> np.ndarray:
    secs = np.asarray(ts, dtype="int64").astype("datetime64[s]")
    if granularity == "year":
        return secs.astype("datetime64[Y]").astype(np.int64)
    months = secs.astype("datetime64[M]").astype(np.int64)
    if granularity == "month":
        return months
    if granularity == "quarter":
        return months // 3
    raise ValueError(f"unknown granularity {granularity!r}; expected one of {GRANULARITIES}")


def _unit_start(unit: int, granularity: str) -> int:
    if granularity == "year":
        y, m = 1970 + unit, 1
    elif granularity == "month":
        y, m = 1970 + unit // 12, unit % 12 + 1
    elif granularity == "quarter":
        y, m = 1970 + (unit * 3) // 12, (unit * 3) % 12 + 1
    else:
        raise ValueError(f"unknown granularity {granularity!r}")
    return calendar.timegm((y, m, 1, 0, 0, 0))


@dataclass(frozen=True)
class TimePartition:
    granularity: str
    periods: tuple[tuple[int, int], ...]

    @property
    def n(self) -> int:
        return len(self.periods)


def time_partition(granularity: str, window: tuple[int, int]) -> TimePartition:
    """Calendar-aligned periods covering ``window = [start, end)``.

    The first and last periods are clipped to the window when it does not
    start or end on a boundary.
    """
    start, end = window
    if end <= start:
        raise ValueError(f"empty window {window}")
    first, last = (int(u) for u in _unit_of(np.array([start, end - 1]), granularity))
    periods = []
    for u in range(first, last + 1):
        lo = max(start, _unit_start(u, granularity))
        hi = min(end, _unit_start(u + 1, granularity))
        periods.append((lo, hi))
    return TimePartition(granularity, tuple(periods))


def period_index(timestamps, granularity: str, window: tuple[int, int]) -> np.ndarray:
    """Vectorized period lookup; -1 marks timestamps outside the window."""
    ts = np.asarray(timestamps, dtype=np.int64)
    start, end = window
    idx = _unit_of(ts, granularity) - int(_unit_of(np.array([start]), granularity)[0])
    idx[(ts < start) | (ts >= end)] = -1
    return idx


def partition_time(events: Sequence[BehaviorEvent], granularity: str, window: tuple[int, int],
                   counter: Counter | None = None):
    """Bucket one user's events into calendar periods of ``window``.

    Returns ``[(period, events_in_period), ...]`` for every period, empty ones
    included.  Events outside the window are left out and tallied under
    ``counter["outside_window"]`` when a counter is given.
    """
    if len({e.user_id for e in events}) > 1:
        raise ValueError("partition_time expects the events of a single user")
    part = time_partition(granularity, window)
    ordered = sorted(events, key=lambda e: e.timestamp)
    buckets: list[list[BehaviorEvent]] = [[] for _ in part.periods]
    if ordered:
        idx = period_index([e.timestamp for e in ordered], granularity, window)
        outside = 0
        for ev, i in zip(ordered, idx):
            if i < 0:
                outside += 1
            else:
                buckets[i].append(ev)
        if counter is not None:
            counter["outside_window"] += outside
    return list(zip(part.periods, buckets))
