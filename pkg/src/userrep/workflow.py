"""Glue between stages: loading logs, building count stores, extracting features."""
from __future__ import annotations

import json
from typing import Iterable, Mapping, Sequence

import numpy as np

from .ingest import BehaviorEvent, group_by_user, parse_log, time_partition
from .interest_vocab import BoIEncoder, coarse_map, merge_counts, user_counts
from .smen import BoIStore, SmenParams, UserSequences, represent
from .sparse import SparseVec


def load_users(path, tokenizer="simple", truncate: int | None = None) -> tuple[dict[str, list[BehaviorEvent]], dict]:
    stream = parse_log(path, tokenizer=tokenizer, truncate=truncate)
    users = group_by_user(stream)
    return users, {"events": stream.emitted, "skipped": stream.skipped, "dropped": stream.dropped}


def build_store(users: Mapping[str, Sequence[BehaviorEvent]], boi: BoIEncoder, window: tuple[int, int],
                scales: Sequence[str] = ("month", "year"), user_ids: Iterable[str] | None = None) -> BoIStore:
    fine = scales[0]
    coarse = scales[1] if len(scales) > 1 else None
    if coarse:
        coarse_map(fine, coarse, window)  # validates nesting
    store = BoIStore(boi.D, window, fine, coarse)
    for uid in (user_ids if user_ids is not None else users):
        store.users[uid] = user_counts(users.get(uid, []), boi, fine, window, uid)
    return store


def period_range(store: BoIStore, last: int | None = None) -> tuple[int, int]:
    """Fine-period index range covering the whole window or its last ``last`` periods."""
    n = time_partition(store.fine, store.window).n
    if last is None or last >= n:
        return 0, n - 1
    return n - last, n - 1


def boi_features(store: BoIStore, periods: tuple[int, int] | None = None) -> dict[str, np.ndarray]:
    """Dense ``log(1 + count)`` over the given fine periods (whole window by default)."""
    lo, hi = periods if periods is not None else period_range(store)
    out = {}
    for uid, uc in store.users.items():
        ids, cnt = merge_counts(uc.periods[lo:hi + 1])
        vec = np.zeros(store.D)
        vec[ids] = np.log1p(cnt)
        out[uid] = vec
    return out


def smen_features(params: SmenParams, store: BoIStore, periods: tuple[int, int] | None = None) -> dict[str, np.ndarray]:
    fmap = coarse_map(store.fine, store.coarse, store.window) if store.coarse else None
    seqs = [UserSequences(store.users[u], fmap) for u in store.users]
    reps = represent(params, seqs, periods)
    return {r.user_id: r.concat.astype(np.float64) for r in reps}


# --- BoI store persistence ---------------------------------------------------

def write_boi_records(store: BoIStore, path, granularities: Sequence[str] | None = None) -> None:
    """Line-delimited records ``{user_id, granularity, period_index, entries}``.

    Only nonempty periods are written; ``entries`` is ``[[cluster_id, value], ...]``
    with ``value = log(1 + count)``.  Coarser granularities are derived by
    summing fine counts before the log.
    """
    grans = list(granularities or [g for g in (store.fine, store.coarse) if g])
    with open(path, "w") as fh:
        for uid in sorted(store.users):
            uc = store.users[uid]
            for g in grans:
                if g == store.fine:
                    periods = uc.periods
                else:
                    groups = coarse_map(store.fine, g, store.window)
                    n = int(groups.max()) + 1
                    periods = [merge_counts([uc.periods[k] for k in np.flatnonzero(groups == c)]) for c in range(n)]
                for p, (ids, cnt) in enumerate(periods):
                    if ids.size == 0:
                        continue
                    entries = [[int(i), float(v)] for i, v in zip(ids.tolist(), np.log1p(cnt).tolist())]
                    fh.write(json.dumps({"user_id": uid, "granularity": g, "period_index": p,
                                         "entries": entries}) + "\n")


def read_boi_records(path, meta: Mapping) -> BoIStore:
    """Rebuild a count store from the fine-granularity records.

    ``meta`` supplies ``D``, ``window``, ``fine``, ``coarse`` and ``users``.
    Counts are recovered as ``expm1(value)``, rounded for hard assignment.
    """
    window = tuple(meta["window"])
    n = time_partition(meta["fine"], window).n
    store = BoIStore(meta["D"], window, meta["fine"], meta.get("coarse"))
    empty = (np.zeros(0, dtype=np.int64), np.zeros(0))
    from .interest_vocab import UserCounts

    for uid in meta["users"]:
        store.users[uid] = UserCounts(uid, [empty] * n)
    hard = meta.get("mode", "hard") == "hard"
    with open(path) as fh:
        for line in fh:
            rec = json.loads(line)
            if rec["granularity"] != store.fine:
                continue
            ent = np.array(rec["entries"], dtype=np.float64).reshape(-1, 2)
            cnt = np.expm1(ent[:, 1])
            if hard:
                cnt = np.rint(cnt)
            uc = store.users.setdefault(rec["user_id"], UserCounts(rec["user_id"], [empty] * n))
            uc.periods[rec["period_index"]] = (ent[:, 0].astype(np.int64), cnt)
    return store


def boi_vector_from_record(rec: Mapping, D: int) -> SparseVec:
    ent = np.array(rec["entries"], dtype=np.float64).reshape(-1, 2)
    return SparseVec(D, ent[:, 0].astype(np.int64), ent[:, 1])
