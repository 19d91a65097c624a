import json
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from userrep.ingest import (BehaviorEvent, group_by_user, parse_log, partition_time, period_index,
                            simple_tokenize, time_partition, to_epoch, truncate_tokens)

W5 = (to_epoch("2015-01-01"), to_epoch("2020-01-01"))


def _write(path, lines):
    path.write_text("".join(line + "\n" for line in lines))
    return path


def test_empty_file(tmp_path):
    s = parse_log(_write(tmp_path / "e.jsonl", []))
    assert list(s) == [] and s.skipped == 0


def test_truncated_json_line_skipped(tmp_path):
    p = _write(tmp_path / "e.jsonl", ['{"user_id": "a", "ts": 5, "text": "Hello, World!"}',
                                      '{"user_id": "b", "ts": 6, "te'])
    s = parse_log(p)
    events = list(s)
    assert events == [BehaviorEvent("a", 5, ("hello", "world"))]
    assert s.skipped == 1


def test_fixture_of_100_lines(tmp_path):
    rng = np.random.default_rng(0)
    words = ["alpha", "beta", "gamma", "delta", "eps"]
    recs = [{"user_id": f"u{rng.integers(7)}", "ts": int(rng.integers(1, 10**9)),
             "text": " ".join(rng.choice(words, size=rng.integers(1, 6)))} for _ in range(100)]
    p = _write(tmp_path / "e.jsonl", [json.dumps(r) for r in recs])
    events = list(parse_log(p))
    assert len(events) == 100
    for ev, r in zip(events, recs):
        assert (ev.user_id, ev.timestamp, " ".join(ev.tokens)) == (r["user_id"], r["ts"], r["text"])


@pytest.mark.parametrize("line", [
    '{"user_id": "a", "ts": "12", "text": "x"}',
    '{"user_id": "a", "ts": 0, "text": "x"}',
    '{"user_id": "a", "ts": -4, "text": "x"}',
    '{"user_id": "a", "ts": true, "text": "x"}',
    '{"user_id": 3, "ts": 4, "text": "x"}',
    '{"user_id": "a", "text": "x"}',
    '[1, 2, 3]',
    'not json',
])
def test_malformed_records_counted(tmp_path, line):
    s = parse_log(_write(tmp_path / "e.jsonl", [line]))
    assert list(s) == [] and s.skipped == 1


def test_empty_content_dropped_not_skipped(tmp_path):
    s = parse_log(_write(tmp_path / "e.jsonl", ['{"user_id": "a", "ts": 4, "text": "?!"}']))
    assert list(s) == [] and (s.skipped, s.dropped) == (0, 1)


def test_unreadable_file_fails_fast(tmp_path):
    with pytest.raises(OSError):
        parse_log(tmp_path / "missing.jsonl")


def test_truncation_applied(tmp_path):
    p = _write(tmp_path / "e.jsonl", ['{"user_id": "a", "ts": 4, "text": "a b c d"}'])
    assert list(parse_log(p, truncate=2))[0].tokens == ("a", "b")


def test_truncate_examples():
    toks = [f"w{i}" for i in range(40)]
    assert truncate_tokens(toks, 35) == toks[:35]
    assert truncate_tokens(toks[:10], 24) == toks[:10]
    assert truncate_tokens([], 5) == []
    with pytest.raises(ValueError):
        truncate_tokens(toks, 0)


def test_tokenizer():
    assert simple_tokenize("Hello, WORLD!  it's") == ["hello", "world", "it", "s"]


def test_group_by_user_sorted_stably():
    evs = [BehaviorEvent("b", 5, ("x",)), BehaviorEvent("a", 9, ("y",)),
           BehaviorEvent("a", 3, ("z",)), BehaviorEvent("a", 9, ("w",))]
    g = group_by_user(evs)
    assert list(g) == ["a", "b"]
    assert [e.tokens[0] for e in g["a"]] == ["z", "y", "w"]


def test_event_requires_positive_timestamp():
    with pytest.raises(ValueError):
        BehaviorEvent("a", 0, ("x",))


# --- time partitioning -------------------------------------------------------

def test_five_year_window_counts():
    assert time_partition("month", W5).n == 60
    assert time_partition("year", W5).n == 5
    assert time_partition("quarter", W5).n == 20


def test_periods_calendar_aligned_and_contiguous():
    part = time_partition("month", W5)
    assert part.periods[0] == (to_epoch("2015-01-01"), to_epoch("2015-02-01"))
    assert part.periods[1][1] - part.periods[1][0] == 28 * 86400
    for (a, b), (c, d) in zip(part.periods, part.periods[1:]):
        assert b == c and a < b


def test_partial_window_clipped():
    w = (to_epoch("2020-01-15"), to_epoch("2020-03-10"))
    assert time_partition("month", w).periods == (
        (w[0], to_epoch("2020-02-01")), (to_epoch("2020-02-01"), to_epoch("2020-03-01")),
        (to_epoch("2020-03-01"), w[1]))


def test_single_event_at_window_start():
    out = partition_time([BehaviorEvent("a", W5[0], ("x",))], "month", W5)
    assert len(out) == 60
    assert len(out[0][1]) == 1 and all(not b for _, b in out[1:])


def test_outside_window_counted():
    c = Counter()
    evs = [BehaviorEvent("a", W5[0] - 1, ("x",)), BehaviorEvent("a", W5[1], ("x",)),
           BehaviorEvent("a", W5[1] - 1, ("x",))]
    out = partition_time(evs, "year", W5, c)
    assert c["outside_window"] == 2
    assert [len(b) for _, b in out] == [0, 0, 0, 0, 1]


def test_mixed_users_rejected():
    with pytest.raises(ValueError):
        partition_time([BehaviorEvent("a", W5[0], ("x",)), BehaviorEvent("b", W5[0], ("x",))], "year", W5)


def test_unknown_granularity():
    with pytest.raises(ValueError):
        time_partition("week", W5)


timestamps = st.lists(st.integers(W5[0] - 10**7, W5[1] + 10**7), max_size=60)


@settings(max_examples=100, deadline=None)
@given(timestamps, st.sampled_from(["month", "quarter", "year"]))
def test_partition_complete(ts, g):
    evs = [BehaviorEvent("a", t, (str(k),)) for k, t in enumerate(ts)]
    out = partition_time(evs, g, W5)
    got = sorted(e.tokens for _, b in out for e in b)
    want = sorted(e.tokens for e in evs if W5[0] <= e.timestamp < W5[1])
    assert got == want
    for (lo, hi), b in out:
        assert all(lo <= e.timestamp < hi for e in b)
        assert [e.timestamp for e in b] == sorted(e.timestamp for e in b)


@settings(max_examples=100, deadline=None)
@given(timestamps)
def test_months_nest_in_years(ts):
    evs = [BehaviorEvent("a", t, (str(k),)) for k, t in enumerate(ts)]
    months = partition_time(evs, "month", W5)
    years = partition_time(evs, "year", W5)
    for y, (_, ybucket) in enumerate(years):
        merged = [e for _, b in months[12 * y:12 * y + 12] for e in b]
        assert merged == ybucket


def test_period_index_matches_partition(rng):
    ts = rng.integers(W5[0] - 10**6, W5[1] + 10**6, size=500)
    idx = period_index(ts, "month", W5)
    periods = time_partition("month", W5).periods
    for t, i in zip(ts, idx):
        if i < 0:
            assert not W5[0] <= t < W5[1]
        else:
            lo, hi = periods[i]
            assert lo <= t < hi
