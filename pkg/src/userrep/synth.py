"""Synthetic behavior logs with recorded latent structure.

Items belong to ``n_topics`` topics, each split into subtopics.  Users browse
in short single-subtopic sessions; their topic mixture is a Dirichlet draw
that may be redrawn once (drift).  Two labels are planted:

* ``category_preference`` -- which of the two reserved "preference"
  subtopics (the last two of each topic) the user favors; favorite sessions
  appear only in the last ``recent_months`` months, and ordinary sessions
  never visit the reserved subtopics;
* ``long_horizon_attribute`` -- a binary trait that routes a share of the
  sessions in the first ``early_fraction`` of the window to subtopic 0 or 1
  of the chosen topic.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .ingest import time_partition, to_epoch
from .probe import write_labels

TASKS = ("category_preference", "long_horizon_attribute")


@dataclass
class SynthConfig:
    n_users: int = 1000
    n_topics: int = 20
    subtopics_per_topic: int = 8
    vocab_per_topic: int = 20
    vocab_per_subtopic: int = 8
    n_common_words: int = 30
    items_per_subtopic: int = 10
    words_per_item: tuple[int, int] = (5, 9)
    window_start: str = "2020-01-01"
    window_end: str = "2022-01-01"
    sessions_per_month: float = 3.0
    activity_sigma: float = 0.3
    events_per_session: float = 3.0
    session_hours: float = 6.0
    topic_alpha: float = 0.5
    subtopic_alpha: float = 1.0
    drift: bool = True
    repeat_prob: float = 0.5
    recent_months: int = 12
    recent_share: float = 0.6
    early_fraction: float = 0.5
    attribute_share: float = 0.15
    seed: int = 0

    def validate(self) -> None:
        problems = []
        if self.n_users < 0:
            problems.append("n_users must be >= 0")
        if self.n_topics < 2:
            problems.append("n_topics must be >= 2")
        if self.subtopics_per_topic < 4:
            problems.append("subtopics_per_topic must be >= 4 (two are reserved for preferences)")
        lo, hi = self.words_per_item
        if not 1 <= lo <= hi:
            problems.append(f"bad words_per_item {self.words_per_item}")
        if min(self.vocab_per_topic, self.vocab_per_subtopic, self.items_per_subtopic) < 1:
            problems.append("vocabulary and item counts must be positive")
        if self.n_months < 13:
            problems.append(f"window spans {self.n_months} months; need >= 13")
        if not all(0 <= x <= 1 for x in (self.recent_share, self.attribute_share, self.repeat_prob)):
            problems.append("shares must lie in [0, 1]")
        if self.recent_months < 0 or self.recent_months > self.n_months:
            problems.append("recent_months outside the window")
        if not 0 <= self.early_fraction <= 1:
            problems.append("early_fraction must lie in [0, 1]")
        if self.sessions_per_month <= 0 or self.events_per_session < 1:
            problems.append("activity rates must be positive (events_per_session >= 1)")
        if problems:
            raise ValueError("inconsistent synth config: " + "; ".join(problems))

    @property
    def window(self) -> tuple[int, int]:
        return to_epoch(self.window_start), to_epoch(self.window_end)

    @property
    def n_months(self) -> int:
        start, end = self.window
        if end <= start:
            return 0
        return time_partition("month", (start, end)).n


def _catalog(cfg: SynthConfig, rng: np.random.Generator) -> list[dict]:
    common = [f"common{k}" for k in range(cfg.n_common_words)]
    items = []
    seen = set()
    for t in range(cfg.n_topics):
        topic_words = [f"t{t}w{k}" for k in range(cfg.vocab_per_topic)]
        for s in range(cfg.subtopics_per_topic):
            sub_words = [f"t{t}s{s}w{k}" for k in range(cfg.vocab_per_subtopic)]
            made = 0
            while made < cfg.items_per_subtopic:
                n = int(rng.integers(cfg.words_per_item[0], cfg.words_per_item[1] + 1))
                n_sub = max(1, n // 2)
                n_topic = max(0, (n - n_sub) * 2 // 3)
                n_common = n - n_sub - n_topic
                words = (list(rng.choice(sub_words, n_sub)) + list(rng.choice(topic_words, n_topic))
                         + (list(rng.choice(common, n_common)) if common else []))
                rng.shuffle(words)
                text = " ".join(words)
                text = text[0].upper() + text[1:]
                if text in seen:
                    continue
                seen.add(text)
                items.append({"text": text, "topic": t, "subtopic": s})
                made += 1
    return items


def generate(cfg: SynthConfig, out_dir) -> dict:
    """Write ``events.jsonl``, ``labels_<task>.csv`` and ``manifest.json``.

    The corpus is a pure function of ``cfg``; users are emitted in id order
    and each user's events in time order.  Returns the manifest.
    """
    cfg.validate()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(cfg.seed)
    items = _catalog(cfg, rng)
    T, S = cfg.n_topics, cfg.subtopics_per_topic
    by_sub = np.arange(len(items)).reshape(T, S, cfg.items_per_subtopic)
    months = time_partition("month", cfg.window).periods
    n_months = len(months)
    early_end = int(round(cfg.early_fraction * n_months))
    recent_start = n_months - cfg.recent_months

    users = {}
    labels = {task: {} for task in TASKS}
    width = max(5, len(str(max(cfg.n_users - 1, 0))))
    with open(out / "events.jsonl", "w") as fh:
        for u in range(cfg.n_users):
            uid = f"u{u:0{width}d}"
            urng = np.random.default_rng([cfg.seed, u])
            theta = urng.dirichlet(np.full(T, cfg.topic_alpha))
            theta_late = urng.dirichlet(np.full(T, cfg.topic_alpha)) if cfg.drift else theta
            switch = int(urng.integers(n_months // 4, 3 * n_months // 4 + 1)) if cfg.drift else n_months
            phi = urng.dirichlet(np.full(S - 2, cfg.subtopic_alpha), size=T)
            fav = (int(urng.integers(T)), S - 2 + int(urng.integers(2)))
            attribute = int(urng.integers(2))
            rate = cfg.sessions_per_month * float(np.exp(urng.normal(0.0, cfg.activity_sigma)
                                                         - cfg.activity_sigma ** 2 / 2))
            topic_counts = np.zeros(T, dtype=np.int64)
            n_events = 0
            last = None
            rows: list[tuple[int, int]] = []
            for m, (lo, hi) in enumerate(months):
                mix = theta if m < switch else theta_late
                span = int(cfg.session_hours * 3600)
                n_sessions = int(urng.poisson(rate))
                for start in np.sort(urng.integers(lo, max(lo + 1, hi - span), size=n_sessions)).tolist():
                    draw = urng.random()
                    if m >= recent_start and draw < cfg.recent_share:
                        t, s = fav
                    elif m < early_end and draw < cfg.attribute_share:
                        t = int(urng.choice(T, p=mix))
                        s = attribute
                    elif last is not None and urng.random() < cfg.repeat_prob:
                        t, s = last
                    else:
                        t = int(urng.choice(T, p=mix))
                        s = int(urng.choice(S - 2, p=phi[t]))
                        topic_counts[t] += 1
                        last = (t, s)
                    k = 1 + int(urng.poisson(cfg.events_per_session - 1))
                    stamps = np.sort(start + urng.integers(0, span, size=k))
                    stamps = np.minimum(stamps, hi - 1)
                    picks = urng.choice(by_sub[t, s], size=k)
                    rows.extend(zip(stamps.tolist(), picks.tolist()))
                    n_events += k
            rows.sort(key=lambda r: r[0])
            for ts, it in rows:
                fh.write(json.dumps({"user_id": uid, "ts": ts, "text": items[it]["text"]}) + "\n")
            labels["category_preference"][uid] = fav[1] - (S - 2)
            labels["long_horizon_attribute"][uid] = attribute
            users[uid] = {
                "theta": theta.tolist(), "theta_late": theta_late.tolist(), "switch_month": switch,
                "favorite": list(fav), "attribute": attribute, "session_rate": rate,
                "regular_topic_counts": topic_counts.tolist(), "n_events": n_events,
            }
    for task in TASKS:
        write_labels(out / f"labels_{task}.csv", labels[task])
    manifest = {"config": asdict(cfg), "window": list(cfg.window), "n_months": n_months,
                "early_months": early_end, "recent_start_month": recent_start,
                "tasks": {t: f"labels_{t}.csv" for t in TASKS}, "items": items, "users": users}
    with open(out / "manifest.json", "w") as fh:
        json.dump(manifest, fh, sort_keys=True)
    return manifest
