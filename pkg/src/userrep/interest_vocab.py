"""Interest vocabulary (spherical k-means over item embeddings) and
bag-of-interests encoding of behavior slices."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .ingest import BehaviorEvent, partition_time, period_index, time_partition
from .item_embed import ItemEncoder
from .sparse import SparseVec

log = logging.getLogger(__name__)

# cosines closer than this to the row maximum count as ties (lowest id wins)
TIE_TOL = 1e-12


@dataclass
class VocabConfig:
    D: int = 1000
    sample_size: int | None = None
    iters: int = 100
    minibatch_iters: int = 20
    batch_size: int = 1024
    tol: float = 1e-6
    seed: int = 0
    mode: str = "hard"
    soft_k: int = 3
    soft_temperature: float = 0.1


@dataclass
class InterestVocabulary:
    centroids: np.ndarray
    mode: str = "hard"
    soft_k: int = 3
    soft_temperature: float = 0.1
    objective_trace: list[float] = field(default_factory=list)

    def __post_init__(self):
        c = np.asarray(self.centroids, dtype=np.float64)
        if c.ndim != 2 or c.shape[0] < 2:
            raise ValueError(f"need a (D >= 2, H) centroid matrix, got shape {c.shape}")
        if not np.all(np.isfinite(c)):
            raise ValueError("centroids contain NaN or Inf")
        if np.max(np.abs(np.linalg.norm(c, axis=1) - 1.0)) > 1e-6:
            raise ValueError("centroids must be unit norm")
        if self.mode not in ("hard", "soft"):
            raise ValueError(f"unknown assignment mode {self.mode!r}")
        self.centroids = c

    @property
    def D(self) -> int:
        return self.centroids.shape[0]

    @property
    def H(self) -> int:
        return self.centroids.shape[1]

    def save(self, path, extra_meta: Mapping | None = None) -> None:
        meta = {"kind": "interest_vocabulary", "D": self.D, "mode": self.mode, "soft_k": self.soft_k,
                "soft_temperature": self.soft_temperature, "objective_trace": self.objective_trace,
                **(extra_meta or {})}
        save_checkpoint(path, {"centroids": self.centroids}, meta)

    @classmethod
    def load(cls, path) -> "InterestVocabulary":
        arrays, meta = load_checkpoint(path)
        if meta.get("kind") != "interest_vocabulary":
            raise ValueError(f"{path} is not a vocabulary checkpoint")
        return cls(arrays["centroids"], meta["mode"], meta["soft_k"], meta["soft_temperature"],
                   list(meta.get("objective_trace", [])))


# --- spherical k-means -----------------------------------------------------

def _normalize_rows(x: np.ndarray) -> np.ndarray:
    return x / np.maximum(np.linalg.norm(x, axis=1, keepdims=True), 1e-12)


def _nearest(x: np.ndarray, centroids: np.ndarray, chunk: int = 8192) -> tuple[np.ndarray, np.ndarray]:
    labels = np.empty(len(x), dtype=np.int64)
    best = np.empty(len(x))
    for lo in range(0, len(x), chunk):
        cos = x[lo:lo + chunk] @ centroids.T
        top = cos.max(axis=1, keepdims=True)
        labels[lo:lo + chunk] = np.argmax(cos >= top - TIE_TOL, axis=1)
        best[lo:lo + chunk] = top[:, 0]
    return labels, best


def kmeans_pp_seed(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """k-means++ seeding with cosine distance ``1 - cos``."""
    n = len(x)
    chosen = [int(rng.integers(n))]
    dist = np.clip(1.0 - x @ x[chosen[0]], 0.0, None)
    for _ in range(1, k):
        weights = dist ** 2
        total = weights.sum()
        if total <= 0:
            # fewer distinct directions than k; fall back to unused points
            unused = np.setdiff1d(np.arange(n), chosen)
            nxt = int(rng.choice(unused))
        else:
            nxt = int(rng.choice(n, p=weights / total))
        chosen.append(nxt)
        dist = np.minimum(dist, np.clip(1.0 - x @ x[nxt], 0.0, None))
    return x[np.array(chosen)].copy()


def _lloyd_step(x: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    labels, best = _nearest(x, centroids)
    sums = np.zeros_like(centroids)
    np.add.at(sums, labels, x)
    counts = np.bincount(labels, minlength=len(centroids))
    new = centroids.copy()
    filled = counts > 0
    new[filled] = _normalize_rows(sums[filled])
    empty = np.flatnonzero(~filled)
    if empty.size:
        # re-seed empty clusters at the points worst served by their centroid
        worst = np.argsort(best, kind="stable")[:empty.size]
        new[empty] = x[worst]
    return new


def _objective(x: np.ndarray, centroids: np.ndarray) -> float:
    return float(_nearest(x, centroids)[1].mean())


def fit_vocabulary(embeddings: np.ndarray, D: int, config: VocabConfig | None = None) -> InterestVocabulary:
    """Cluster unit-norm item embeddings into ``D`` unit centroids.

    A sample of ``min(n, config.sample_size or 50 * D)`` points is drawn,
    seeded with k-means++, refined with mini-batch updates and finished with
    full-batch steps.  Any step that would lower the mean cosine objective is
    replaced by a full-batch step, so the recorded trace never decreases.
    """
    config = config or VocabConfig(D=D)
    x = np.asarray(embeddings, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError(f"expected an (n, H) embedding matrix, got shape {x.shape}")
    if np.max(np.abs(np.linalg.norm(x, axis=1) - 1.0)) > 1e-6:
        raise ValueError("embeddings must be unit norm")
    if len(x) < D:
        raise ValueError(f"need at least D={D} embeddings to fit the vocabulary, got {len(x)}")
    rng = np.random.default_rng(config.seed)
    size = min(len(x), config.sample_size or 50 * D)
    if size < len(x):
        x = x[np.sort(rng.choice(len(x), size=size, replace=False))]

    centroids = kmeans_pp_seed(x, D, rng)
    trace = [_objective(x, centroids)]
    counts = np.zeros(D)
    for it in range(config.iters):
        if it < config.minibatch_iters and config.batch_size < len(x):
            batch = x[rng.choice(len(x), size=config.batch_size, replace=False)]
            labels, _ = _nearest(batch, centroids)
            sums = np.zeros_like(centroids)
            np.add.at(sums, labels, batch)
            hits = np.bincount(labels, minlength=D)
            touched = hits > 0
            total = counts + hits
            cand = centroids.copy()
            cand[touched] = _normalize_rows(
                centroids[touched] * (counts[touched] / total[touched])[:, None]
                + sums[touched] / total[touched][:, None])
            obj = _objective(x, cand)
            if obj >= trace[-1]:
                counts = total
                centroids = cand
                trace.append(obj)
                continue
        cand = _lloyd_step(x, centroids)
        obj = _objective(x, cand)
        if obj < trace[-1]:
            # only possible through floating-point noise at convergence
            break
        gain = (obj - trace[-1]) / max(abs(trace[-1]), 1e-12)
        centroids = cand
        trace.append(obj)
        if it >= config.minibatch_iters and gain < config.tol:
            break
    log.info("vocabulary D=%d objective %.6f after %d iterations", D, trace[-1], len(trace) - 1)
    return InterestVocabulary(_normalize_rows(centroids), config.mode, config.soft_k,
                              config.soft_temperature, trace)


# --- assignment ------------------------------------------------------------

def assign(e: np.ndarray, vocab: InterestVocabulary):
    """Hard mode: nearest centroid id.  Soft mode: ``[(id, weight), ...]``
    over the top-k centroids with softmax(cos / temperature) weights."""
    e = np.asarray(e, dtype=np.float64).reshape(1, -1)
    if vocab.mode == "hard":
        return int(assign_hard(e, vocab.centroids)[0])
    ids, weights = assign_soft(e, vocab.centroids, vocab.soft_k, vocab.soft_temperature)
    return list(zip(ids[0].tolist(), weights[0].tolist()))


def assign_hard(x: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    return _nearest(np.asarray(x, dtype=np.float64), centroids)[0]


def assign_soft(x: np.ndarray, centroids: np.ndarray, k: int, temperature: float):
    cos = np.asarray(x, dtype=np.float64) @ centroids.T
    k = min(k, centroids.shape[0])
    order = np.argsort(-cos, axis=1, kind="stable")[:, :k]
    top = np.take_along_axis(cos, order, axis=1) / temperature
    w = np.exp(top - top.max(axis=1, keepdims=True))
    return order, w / w.sum(axis=1, keepdims=True)


# --- bag of interests ------------------------------------------------------

@dataclass(frozen=True)
class BoIVector:
    inner: SparseVec
    period: tuple[int, int] | None = None
    user_id: str | None = None

    @property
    def dim(self) -> int:
        return self.inner.dim


class BoIEncoder:
    """Maps item token lists to interests, caching per distinct item text."""

    def __init__(self, encoder: ItemEncoder, vocab: InterestVocabulary):
        if encoder.H != vocab.H:
            raise ValueError(f"encoder dim {encoder.H} != vocabulary dim {vocab.H}")
        self.encoder = encoder
        self.vocab = vocab
        self._cache: dict[tuple[str, ...], int] = {}
        self._soft: list[tuple[np.ndarray, np.ndarray]] = []

    @property
    def D(self) -> int:
        return self.vocab.D

    def _intern(self, token_lists: Sequence[tuple[str, ...]]) -> None:
        fresh = list(dict.fromkeys(t for t in token_lists if t not in self._cache))
        if not fresh:
            return
        emb = self.encoder.encode(fresh).astype(np.float64)
        if self.vocab.mode == "hard":
            ids = assign_hard(emb, self.vocab.centroids)
            for toks, c in zip(fresh, ids.tolist()):
                self._cache[toks] = c
        else:
            ids, w = assign_soft(emb, self.vocab.centroids, self.vocab.soft_k, self.vocab.soft_temperature)
            for toks, i, ww in zip(fresh, ids, w):
                self._cache[toks] = len(self._soft)
                self._soft.append((i, ww))

    def counts(self, events: Iterable[BehaviorEvent], chunk: int = 65536) -> dict[int, float]:
        """Per-interest event counts, streamed in chunks (memory ~ nnz)."""
        acc: dict[int, float] = {}
        buf: list[tuple[str, ...]] = []

        def flush():
            self._intern(buf)
            keys = np.fromiter((self._cache[t] for t in buf), dtype=np.int64, count=len(buf))
            if self.vocab.mode == "hard":
                uniq, cnt = np.unique(keys, return_counts=True)
                for c, n in zip(uniq.tolist(), cnt.tolist()):
                    acc[c] = acc.get(c, 0) + n
            else:
                for key in keys.tolist():
                    ids, w = self._soft[key]
                    for c, ww in zip(ids.tolist(), w.tolist()):
                        acc[c] = acc.get(c, 0.0) + ww
            buf.clear()

        for ev in events:
            buf.append(ev.tokens)
            if len(buf) >= chunk:
                flush()
        if buf:
            flush()
        return acc

    def interests_of(self, token_lists: Sequence[tuple[str, ...]]) -> np.ndarray:
        """Hard-assignment interest id per token list."""
        if self.vocab.mode != "hard":
            raise ValueError("interests_of is defined for hard assignment only")
        self._intern(token_lists)
        return np.fromiter((self._cache[t] for t in token_lists), dtype=np.int64, count=len(token_lists))


def counts_to_sparse(counts: Mapping[int, float], D: int) -> SparseVec:
    if not counts:
        return SparseVec(D)
    idx = np.fromiter(counts.keys(), dtype=np.int64, count=len(counts))
    cnt = np.fromiter(counts.values(), dtype=np.float64, count=len(counts))
    keep = cnt > 0
    return SparseVec(D, idx[keep], np.log1p(cnt[keep]))


def boi_encode(events: Iterable[BehaviorEvent], boi: BoIEncoder, period=None, user_id=None) -> BoIVector:
    """``log(1 + count)`` per interest over ``events``; empty input gives an empty vector."""
    return BoIVector(counts_to_sparse(boi.counts(events), boi.D), period, user_id)


def build_boi_sequences(user_events: Sequence[BehaviorEvent], boi: BoIEncoder,
                        granularities: Sequence[str], window: tuple[int, int]) -> dict[str, list[BoIVector]]:
    """One BoI vector per calendar period, for each requested granularity."""
    out = {}
    user = user_events[0].user_id if user_events else None
    for g in granularities:
        out[g] = [boi_encode(evs, boi, period, user)
                  for period, evs in partition_time(user_events, g, window)]
    return out


# --- per-user count store ---------------------------------------------------

@dataclass
class UserCounts:
    """Interest counts of one user at the finest granularity.

    ``periods[i]`` is ``(interest_ids, counts)`` for fine period ``i``.
    """

    user_id: str
    periods: list[tuple[np.ndarray, np.ndarray]]

    def nonempty(self) -> np.ndarray:
        return np.array([p[0].size > 0 for p in self.periods], dtype=bool)


def user_counts(user_events: Sequence[BehaviorEvent], boi: BoIEncoder, granularity: str,
                window: tuple[int, int], user_id: str | None = None) -> UserCounts:
    n = time_partition(granularity, window).n
    periods = [(np.zeros(0, dtype=np.int64), np.zeros(0)) for _ in range(n)]
    if user_events:
        ts = np.array([e.timestamp for e in user_events], dtype=np.int64)
        pidx = period_index(ts, granularity, window)
        keep = pidx >= 0
        if boi.vocab.mode == "hard":
            ids = boi.interests_of([e.tokens for e in user_events])
            for p in np.unique(pidx[keep]).tolist():
                u, c = np.unique(ids[pidx == p], return_counts=True)
                periods[p] = (u, c.astype(np.float64))
        else:
            for p in np.unique(pidx[keep]).tolist():
                cnt = boi.counts(e for e, q in zip(user_events, pidx) if q == p)
                u = np.array(sorted(cnt), dtype=np.int64)
                periods[p] = (u, np.array([cnt[k] for k in u.tolist()]))
    uid = user_id if user_id is not None else (user_events[0].user_id if user_events else "")
    return UserCounts(uid, periods)


def coarse_map(fine: str, coarse: str, window: tuple[int, int]) -> np.ndarray:
    """Index of the coarse period containing each fine period."""
    periods = np.array(time_partition(fine, window).periods, dtype=np.int64)
    idx = period_index(periods[:, 0], coarse, window)
    if np.any(idx < 0) or np.any(period_index(periods[:, 1] - 1, coarse, window) != idx):
        raise ValueError(f"{fine} periods do not nest in {coarse} periods")
    return idx


def merge_counts(parts: Sequence[tuple[np.ndarray, np.ndarray]]) -> tuple[np.ndarray, np.ndarray]:
    parts = [p for p in parts if p[0].size]
    if not parts:
        return np.zeros(0, dtype=np.int64), np.zeros(0)
    if len(parts) == 1:
        return parts[0]
    ids = np.concatenate([p[0] for p in parts])
    cnt = np.concatenate([p[1] for p in parts])
    u, inv = np.unique(ids, return_inverse=True)
    return u, np.bincount(inv, weights=cnt, minlength=u.size)
