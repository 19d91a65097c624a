"""Contrastive item embeddings learned from co-occurring user behaviors.

An item's embedding is the mean of its word vectors passed through two
residual blocks and L2-normalized.  Two items of one user that occur less
than ``beta`` seconds apart form a positive pair; other items of the batch
serve as negatives under a temperature-scaled InfoNCE objective.
"""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass
from typing import Mapping, Sequence

import numpy as np
import scipy.sparse as sp

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .checkpoint import load_checkpoint, save_checkpoint
from .ingest import BehaviorEvent
from .optim import Adam

log = logging.getLogger(__name__)

DAY = 86400


@dataclass
class ItemEmbedConfig:
    H: int = 128
    tau: float = 0.1
    beta_days: float = 5.0
    lr: float = 1e-3
    batch_size: int = 256
    epochs: int = 10
    seed: int = 0

    @property
    def beta_seconds(self) -> float:
        return self.beta_days * DAY


@dataclass(frozen=True)
class PositivePair:
    x: BehaviorEvent
    y: BehaviorEvent
    user_id: str


def _uniform(rng: np.random.Generator, shape, fan: int) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan)
    return rng.uniform(-bound, bound, size=shape).astype(ad.default_dtype())


class ItemEncoder:
    """Word-average encoder with two residual blocks and L2 normalization.

    Row ``len(vocab)`` of ``word_embeddings`` is the shared out-of-vocabulary
    row.  Each block computes ``u + W2 relu(W1 u + b1) + b2``.
    """

    def __init__(self, vocab: Sequence[str], H: int = 128, tau: float = 0.1,
                 beta_seconds: float = 5 * DAY, rng: np.random.Generator | None = None):
        if tau <= 0:
            raise ValueError(f"tau must be positive, got {tau}")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.vocab = {w: i for i, w in enumerate(vocab)}
        self.words = list(vocab)
        self.H = H
        self.tau = tau
        self.beta_seconds = beta_seconds
        self.word_embeddings = Tensor(_uniform(rng, (len(vocab) + 1, H), H), True, "word_embeddings")
        self.blocks: list[tuple[Tensor, Tensor, Tensor, Tensor]] = []
        for b in range(2):
            self.blocks.append((
                Tensor(_uniform(rng, (H, H), H), True, f"block{b}.W1"),
                Tensor(_uniform(rng, (H,), H), True, f"block{b}.b1"),
                Tensor(_uniform(rng, (H, H), H), True, f"block{b}.W2"),
                Tensor(_uniform(rng, (H,), H), True, f"block{b}.b2"),
            ))

    @property
    def oov(self) -> int:
        return len(self.words)

    def parameters(self) -> list[Tensor]:
        return [self.word_embeddings] + [t for blk in self.blocks for t in blk]

    def token_ids(self, tokens: Sequence[str]) -> np.ndarray:
        return np.fromiter((self.vocab.get(t, self.oov) for t in tokens), dtype=np.int64, count=len(tokens))

    def averaging_matrix(self, items: Sequence[np.ndarray]) -> sp.csr_matrix:
        """Row i averages the word rows of item i (duplicates counted)."""
        lengths = np.array([len(ids) for ids in items], dtype=np.int64)
        if np.any(lengths == 0):
            raise ValueError("cannot encode an item with no tokens")
        indptr = np.concatenate([[0], np.cumsum(lengths)])
        cols = np.concatenate(items) if items else np.zeros(0, dtype=np.int64)
        vals = np.repeat(1.0 / lengths, lengths).astype(self.word_embeddings.data.dtype)
        mat = sp.csr_matrix((vals, cols, indptr), shape=(len(items), self.oov + 1))
        mat.sum_duplicates()
        return mat

    def forward(self, items: Sequence[np.ndarray]) -> Tensor:
        """Embed a batch of token-id arrays; returns unit rows of shape (B, H)."""
        u = ad.spmm(self.averaging_matrix(items), self.word_embeddings)
        for w1, b1, w2, b2 in self.blocks:
            hidden = ad.relu(u @ w1.T + b1)
            u = u + hidden @ w2.T + b2
        return ad.l2_normalize(u, axis=1)

    def encode(self, token_lists: Sequence[Sequence[str]], chunk: int = 4096) -> np.ndarray:
        """Inference-mode embeddings for raw token lists."""
        out = np.empty((len(token_lists), self.H), dtype=self.word_embeddings.data.dtype)
        for lo in range(0, len(token_lists), chunk):
            ids = [self.token_ids(t) for t in token_lists[lo:lo + chunk]]
            out[lo:lo + len(ids)] = self.forward(ids).data
        return out

    # --- persistence -------------------------------------------------------

    def state(self) -> dict[str, np.ndarray]:
        return {(p.name or f"p{i}"): p.data for i, p in enumerate(self.parameters())}

    def save(self, path, extra_meta: Mapping | None = None) -> None:
        meta = {"kind": "item_encoder", "H": self.H, "tau": self.tau,
                "beta_seconds": self.beta_seconds, "vocab": self.words, **(extra_meta or {})}
        save_checkpoint(path, self.state(), meta)

    @classmethod
    def load(cls, path) -> "ItemEncoder":
        arrays, meta = load_checkpoint(path)
        if meta.get("kind") != "item_encoder":
            raise ValueError(f"{path} is not an item encoder checkpoint")
        enc = cls(meta["vocab"], H=meta["H"], tau=meta["tau"], beta_seconds=meta["beta_seconds"])
        for p in enc.parameters():
            p.data = arrays[p.name]
        return enc


def encode_item(tokens: Sequence[str], params: ItemEncoder) -> Tensor:
    if len(tokens) == 0:
        raise ValueError("encode_item requires at least one token")
    return params.forward([params.token_ids(tokens)]).reshape(params.H)


def build_vocab(token_lists) -> list[str]:
    words = set()
    for toks in token_lists:
        words.update(toks)
    return sorted(words)


# --- positive pairs --------------------------------------------------------

def pair_counts(timestamps: np.ndarray, beta_seconds: float) -> np.ndarray:
    """For sorted timestamps, number of later events within ``beta`` of each."""
    ts = np.asarray(timestamps)
    hi = np.searchsorted(ts, ts + beta_seconds, side="left")
    return hi - np.arange(ts.size) - 1


def _decode_pairs(flat: np.ndarray, counts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    offsets = np.concatenate([[0], np.cumsum(counts)])
    first = np.searchsorted(offsets, flat, side="right") - 1
    second = first + 1 + (flat - offsets[first])
    return first, second


def sample_pair_indices(timestamps: np.ndarray, beta_seconds: float, rng: np.random.Generator,
                        k: int = 1) -> list[tuple[int, int]]:
    """Up to ``k`` admissible index pairs, uniform without replacement."""
    counts = pair_counts(timestamps, beta_seconds)
    total = int(counts.sum())
    if total == 0:
        return []
    flat = rng.choice(total, size=min(k, total), replace=False)
    first, second = _decode_pairs(np.asarray(flat), counts)
    return list(zip(first.tolist(), second.tolist()))


def sample_positive_pairs(user_events: Sequence[BehaviorEvent], beta_seconds: float,
                          rng_seed: int | np.random.Generator, k: int = 1) -> list[PositivePair]:
    """Sample up to ``k`` distinct positive pairs from one user's sorted events.

    Users without two events closer than ``beta_seconds`` contribute nothing.
    """
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    ts = np.array([e.timestamp for e in user_events], dtype=np.int64)
    if np.any(np.diff(ts) < 0):
        raise ValueError("events must be sorted by timestamp")
    return [PositivePair(user_events[i], user_events[j], user_events[i].user_id)
            for i, j in sample_pair_indices(ts, beta_seconds, rng, k)]


# --- loss ------------------------------------------------------------------

def info_nce_loss(z: Tensor, tau: float) -> Tensor:
    """Symmetric InfoNCE over rows ordered ``(x1, y1, x2, y2, ...)``.

    Each row's positive is its partner; the denominator runs over every other
    row of the batch.  Rows must already be unit length.
    """
    if z.ndim != 2 or z.shape[0] == 0 or z.shape[0] % 2:
        raise ValueError(f"expected 2n unit rows with n >= 1, got shape {z.shape}")
    if tau <= 0:
        raise ValueError(f"tau must be positive, got {tau}")
    norms = np.linalg.norm(z.data, axis=1)
    if np.max(np.abs(norms - 1.0)) > 1e-4:
        raise ValueError("info_nce_loss expects L2-normalized embeddings")
    return _info_nce(z, tau)


def _info_nce(z: Tensor, tau: float) -> Tensor:
    m = z.shape[0]
    logits = (z @ z.T) * (1.0 / tau)
    probs = ad.softmax(logits, axis=1, mask=~np.eye(m, dtype=bool))
    rows = np.arange(m)
    positive = probs[rows, rows ^ 1]
    return -ad.mean(ad.log(positive))


# --- training --------------------------------------------------------------

class PairCorpus:
    """Per-user timestamps and item ids prepared for fast pair sampling."""

    def __init__(self, users: Mapping[str, Sequence[BehaviorEvent]]):
        self.items: list[tuple[str, ...]] = []
        index: dict[tuple[str, ...], int] = {}
        self.user_ids: list[str] = []
        self.times: list[np.ndarray] = []
        self.item_ids: list[np.ndarray] = []
        for uid, evs in users.items():
            ids = np.empty(len(evs), dtype=np.int64)
            for k, ev in enumerate(evs):
                j = index.get(ev.tokens)
                if j is None:
                    j = index[ev.tokens] = len(self.items)
                    self.items.append(ev.tokens)
                ids[k] = j
            ts = np.array([e.timestamp for e in evs], dtype=np.int64)
            order = np.argsort(ts, kind="stable")
            self.user_ids.append(uid)
            self.times.append(ts[order])
            self.item_ids.append(ids[order])

    def eligible(self, beta_seconds: float) -> np.ndarray:
        return np.array([pair_counts(t, beta_seconds).sum() > 0 for t in self.times], dtype=bool)


def train_item_encoder(users: Mapping[str, Sequence[BehaviorEvent]], config: ItemEmbedConfig,
                       vocab: Sequence[str] | None = None) -> tuple[ItemEncoder, list[float]]:
    """Fit an :class:`ItemEncoder`; returns it with the per-step loss curve.

    Every epoch draws one fresh pair per eligible user, shuffles users, and
    cuts the pairs into batches, so a batch never holds two pairs of one user.
    """
    corpus = PairCorpus(users)
    eligible = np.flatnonzero(corpus.eligible(config.beta_seconds))
    if eligible.size < 2:
        raise ValueError(f"need >= 2 users with a pair closer than {config.beta_days} days; "
                         f"found {eligible.size} of {len(corpus.user_ids)} users")
    rng = np.random.default_rng(config.seed)
    if vocab is None:
        vocab = build_vocab(corpus.items)
    enc = ItemEncoder(vocab, H=config.H, tau=config.tau, beta_seconds=config.beta_seconds, rng=rng)
    item_tokens = [enc.token_ids(t) for t in corpus.items]
    opt = Adam(enc.parameters(), lr=config.lr)
    curve: list[float] = []
    for epoch in range(config.epochs):
        order = rng.permutation(eligible)
        pairs = []
        for u in order:
            (i, j), = sample_pair_indices(corpus.times[u], config.beta_seconds, rng, 1)
            pairs.append((corpus.item_ids[u][i], corpus.item_ids[u][j]))
        for lo in range(0, len(pairs), config.batch_size):
            chunk = pairs[lo:lo + config.batch_size]
            if len(chunk) < 2:
                continue
            batch = [item_tokens[k] for pair in chunk for k in pair]
            opt.zero_grad()
            with Tape() as tape:
                loss = info_nce_loss(enc.forward(batch), enc.tau)
                tape.backward(loss)
            opt.step()
            curve.append(loss.item())
        log.info("item epoch %d loss %.4f", epoch, curve[-1] if curve else float("nan"))
    return enc, curve


def config_dict(config: ItemEmbedConfig) -> dict:
    return asdict(config)
