"""Multi-anchor encoder compressing multi-scale BoI sequences into user vectors.

Pipeline per user and scale: each period's BoI vector is split over ``M``
anchors by attention (``multi_anchor_forward``), the per-anchor sequences are
summarized by a GRU, and the two scales are fused by a learned gate.  During
training a projection head maps the fused anchors into the space where the
InfoNCE loss compares two sub-sequence views of each user.
"""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

import numpy as np
import scipy.sparse as sp

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .checkpoint import load_checkpoint, save_checkpoint
from .interest_vocab import UserCounts, coarse_map, merge_counts
from .item_embed import _info_nce
from .optim import Adam
from .sparse import SparseVec

log = logging.getLogger(__name__)


@dataclass
class SmenConfig:
    D: int = 1000
    M: int = 10
    H: int = 128
    tau: float = 0.1
    lr: float = 1e-3
    batch_size: int = 256
    epochs: int = 10
    seed: int = 0
    scales: tuple[str, ...] = ("month", "year")
    shared_gru: bool = True
    vector_gate: bool = False

    def __post_init__(self):
        self.scales = tuple(self.scales)
        if self.M < 1 or self.H < 1 or self.D < 2:
            raise ValueError(f"invalid sizes D={self.D} M={self.M} H={self.H}")
        if not 1 <= len(self.scales) <= 2:
            raise ValueError(f"one or two scales supported, got {self.scales}")


class SmenParams:
    """All learned tensors.  ``We`` holds one row per interest, ``Wa`` one row
    per anchor; ``Wp`` and the head matrices act on column vectors."""

    def __init__(self, config: SmenConfig, rng: np.random.Generator | None = None):
        rng = rng if rng is not None else np.random.default_rng(config.seed)
        self.config = config
        D, M, H = config.D, config.M, config.H
        bound = 1.0 / math.sqrt(H)
        dt = ad.default_dtype()

        def uni(*shape, name):
            return Tensor(rng.uniform(-bound, bound, size=shape).astype(dt), True, name)

        def zeros(*shape, name):
            return Tensor(np.zeros(shape, dtype=dt), True, name)

        self.We = uni(D, H, name="We")
        self.Wa = uni(M, H, name="Wa")
        self.Wp = uni(H, H, name="Wp")
        g = () if config.shared_gru else (M,)
        gb = (H,) if config.shared_gru else (M, 1, H)
        self.gru = {}
        for gate in ("z", "r", "n"):
            self.gru[f"W{gate}"] = uni(*g, H, H, name=f"gru.W{gate}")
            self.gru[f"U{gate}"] = uni(*g, H, H, name=f"gru.U{gate}")
            self.gru[f"b{gate}"] = zeros(*gb, name=f"gru.b{gate}")
        if config.vector_gate:
            self.Ws = uni(M, 2 * H, H, name="Ws")
            self.bs = uni(M, 1, H, name="bs")
        else:
            self.Ws = uni(M, 2 * H, name="Ws")
            self.bs = uni(M, name="bs")
        self.Wh1 = uni(M, H, H, name="Wh1")
        self.Wh2 = uni(M * H, M * H, name="Wh2")
        self.Wh3 = uni(M, M, name="Wh3")

    def parameters(self) -> list[Tensor]:
        return [self.We, self.Wa, self.Wp, *self.gru.values(), self.Ws, self.bs,
                self.Wh1, self.Wh2, self.Wh3]

    def save(self, path, extra_meta: Mapping | None = None) -> None:
        meta = {"kind": "smen", "config": asdict(self.config), **(extra_meta or {})}
        save_checkpoint(path, {p.name: p.data for p in self.parameters()}, meta)

    @classmethod
    def load(cls, path) -> "SmenParams":
        arrays, meta = load_checkpoint(path)
        if meta.get("kind") != "smen":
            raise ValueError(f"{path} is not a SMEN checkpoint")
        params = cls(SmenConfig(**meta["config"]), np.random.default_rng(0))
        for p in params.parameters():
            p.data = arrays[p.name]
        return params


# --- multi-anchor module ---------------------------------------------------

def anchor_table(params: SmenParams, active: np.ndarray) -> tuple[Tensor, Tensor]:
    """Attention-weighted interest embeddings for the ``active`` interests.

    Returns ``(A, alpha)`` with ``A[j] = concat_i(alpha[j, i] * We[active[j]])``
    of shape (len(active), M*H) and ``alpha`` of shape (len(active), M).
    """
    M, H, D = params.config.M, params.config.H, params.config.D
    n = active.size
    sel = sp.csr_matrix((np.ones(n), active, np.arange(n + 1)), shape=(n, D))
    we = ad.spmm(sel, params.We)
    keys = ad.relu(we) @ params.Wp.T
    alpha = ad.softmax(keys @ params.Wa.T, axis=1)
    table = alpha.reshape(n, M, 1) * we.reshape(n, 1, H)
    return table.reshape(n, M * H), alpha


def attention_weights(params: SmenParams, interests: np.ndarray) -> np.ndarray:
    """alpha[i, j]: share of interest ``interests[j]`` routed to anchor i."""
    _, alpha = anchor_table(params, np.asarray(interests, dtype=np.int64))
    return alpha.data.T


def multi_anchor_forward(b: SparseVec, params: SmenParams) -> Tensor:
    """``r^i = relu(sum_j alpha_ij b_j We_j)`` for one BoI vector; shape (M, H)."""
    b = getattr(b, "inner", b)
    M, H, D = params.config.M, params.config.H, params.config.D
    if b.dim != D:
        raise ValueError(f"BoI dim {b.dim} does not match D={D}")
    if b.nnz == 0:
        return Tensor(np.zeros((M, H), dtype=params.We.data.dtype))
    table, _ = anchor_table(params, b.indices)
    row = sp.csr_matrix((b.values, np.arange(b.nnz), [0, b.nnz]), shape=(1, b.nnz))
    return ad.relu(ad.spmm(row, table)).reshape(M, H)


# --- time aggregation ------------------------------------------------------

def _gru_run(params: SmenParams, steps: Sequence[Tensor], masks: Sequence[np.ndarray], batch: int) -> Tensor:
    """Run the GRU over ``steps`` (each (batch, M*H)); returns (batch, M, H).

    ``masks[t]`` (bool, per sequence) marks real steps; padded steps leave the
    hidden state untouched.  The initial state is zero.
    """
    M, H = params.config.M, params.config.H
    g = params.gru
    shared = params.config.shared_gru
    dt = params.We.data.dtype
    if shared:
        h = Tensor(np.zeros((batch * M, H), dtype=dt))
    else:
        h = Tensor(np.zeros((M, batch, H), dtype=dt))
    for x, m in zip(steps, masks):
        if shared:
            x = x.reshape(batch * M, H)
            keep = np.repeat(m, M).astype(dt).reshape(-1, 1)
        else:
            x = x.reshape(batch, M, H).transpose(1, 0, 2)
            keep = m.astype(dt).reshape(1, -1, 1)
        z = ad.sigmoid(x @ g["Wz"] + h @ g["Uz"] + g["bz"])
        r = ad.sigmoid(x @ g["Wr"] + h @ g["Ur"] + g["br"])
        cand = ad.tanh(x @ g["Wn"] + (r * h) @ g["Un"] + g["bn"])
        step = z * (cand - h)
        h = h + (step if keep.all() else step * keep)
    if shared:
        return h.reshape(batch, M, H)
    return h.transpose(1, 0, 2)


def gru_aggregate(sequence: Sequence, params: SmenParams) -> Tensor:
    """Final hidden state per anchor for one sequence of (M, H) inputs."""
    if len(sequence) == 0:
        raise ValueError("gru_aggregate needs at least one time step")
    M, H = params.config.M, params.config.H
    steps = []
    for x in sequence:
        x = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=params.We.data.dtype))
        if x.shape != (M, H):
            raise ValueError(f"step shape {x.shape} != ({M}, {H})")
        steps.append(x.reshape(1, M * H))
    out = _gru_run(params, steps, [np.ones(1, dtype=bool)] * len(steps), 1)
    return out.reshape(M, H)


# --- multi-scale fusion ----------------------------------------------------

def _fuse(params: SmenParams, fine: Tensor, coarse: Tensor) -> Tensor:
    """Gate-weighted combination of (B, M, H) fine and coarse representations."""
    B, M, H = fine.shape
    cat = ad.concat([fine, coarse], axis=2)
    if params.config.vector_gate:
        s = ad.sigmoid(cat.transpose(1, 0, 2) @ params.Ws + params.bs).transpose(1, 0, 2)
    else:
        s = ad.sigmoid((cat * params.Ws).sum(axis=2) + params.bs).reshape(B, M, 1)
    return coarse + s * (fine - coarse)


def multi_scale_fuse(rt: Tensor, rt_coarse: Tensor, params: SmenParams) -> Tensor:
    rt = rt if isinstance(rt, Tensor) else Tensor(np.asarray(rt))
    rt_coarse = rt_coarse if isinstance(rt_coarse, Tensor) else Tensor(np.asarray(rt_coarse))
    M, H = params.config.M, params.config.H
    if rt.shape != (M, H) or rt_coarse.shape != (M, H):
        raise ValueError(f"expected two ({M}, {H}) inputs, got {rt.shape} and {rt_coarse.shape}")
    return _fuse(params, rt.reshape(1, M, H), rt_coarse.reshape(1, M, H)).reshape(M, H)


# --- projection head -------------------------------------------------------

def _head(params: SmenParams, anchors: Tensor) -> Tensor:
    """(B, M, H) fused anchors -> (B, M*H) projections."""
    B, M, H = anchors.shape
    v = ad.relu(anchors.transpose(1, 0, 2) @ params.Wh1.transpose(0, 2, 1)).transpose(1, 0, 2)
    mixed = params.Wh3 @ v
    return ad.relu(v + mixed).reshape(B, M * H) @ params.Wh2.T


def projection_head(anchors, params: SmenParams) -> Tensor:
    anchors = anchors if isinstance(anchors, Tensor) else Tensor(np.asarray(anchors))
    M, H = params.config.M, params.config.H
    if anchors.shape != (M, H):
        raise ValueError(f"expected ({M}, {H}) anchors, got {anchors.shape}")
    return _head(params, anchors.reshape(1, M, H)).reshape(M * H)


# --- batched forward -------------------------------------------------------

def _scale_steps(seqs: Sequence[Sequence[tuple[np.ndarray, np.ndarray]]], local: np.ndarray,
                 n_active: int) -> tuple[list[sp.csr_matrix], list[np.ndarray]]:
    """Left-pad sequences to a common length; one CSR (B x active) per step."""
    B = len(seqs)
    T = max(len(s) for s in seqs)
    mats, masks = [], []
    for t in range(T):
        indptr = np.zeros(B + 1, dtype=np.int64)
        cols, vals = [], []
        mask = np.zeros(B, dtype=bool)
        for b, s in enumerate(seqs):
            k = t - (T - len(s))
            nnz = 0
            if k >= 0:
                mask[b] = True
                ids, v = s[k]
                if ids.size:
                    cols.append(np.searchsorted(local, ids))
                    vals.append(v)
                    nnz = ids.size
            indptr[b + 1] = indptr[b] + nnz
        c = np.concatenate(cols) if cols else np.zeros(0, dtype=np.int64)
        v = np.concatenate(vals) if vals else np.zeros(0)
        mats.append(sp.csr_matrix((v, c, indptr), shape=(B, n_active)))
        masks.append(mask)
    return mats, masks


def encode_batch(params: SmenParams, views: Sequence[Mapping[str, Sequence]]) -> Tensor:
    """Fused anchor representations (B, M, H) for a batch of views.

    Each view maps scale name to its sequence of ``(interest_ids, values)``
    periods (values already log-scaled).  Every sequence needs >= 1 period.
    """
    cfg = params.config
    M, H = cfg.M, cfg.H
    B = len(views)
    dt = params.We.data.dtype
    active = np.unique(np.concatenate(
        [ids for v in views for s in cfg.scales for ids, _ in v[s]] + [np.zeros(0, dtype=np.int64)]))
    outs = []
    table = anchor_table(params, active)[0] if active.size else None
    for scale in cfg.scales:
        seqs = [v[scale] for v in views]
        if any(len(s) == 0 for s in seqs):
            raise ValueError(f"empty {scale} sequence in batch")
        mats, masks = _scale_steps(seqs, active, active.size)
        steps = []
        for mat in mats:
            if table is None or mat.nnz == 0:
                steps.append(Tensor(np.zeros((B, M * H), dtype=dt)))
            else:
                steps.append(ad.relu(ad.spmm(mat, table)))
        outs.append(_gru_run(params, steps, masks, B))
    if len(outs) == 1:
        return outs[0]
    return _fuse(params, outs[0], outs[1])


def smen_contrastive_loss(projections: Tensor, tau: float) -> Tensor:
    """InfoNCE over L2-normalized projections ordered (a1, b1, a2, b2, ...).

    A projection that is exactly zero (every ReLU dead) stays zero after
    normalization and simply scores 0 against every row.
    """
    if projections.ndim != 2 or projections.shape[0] == 0 or projections.shape[0] % 2:
        raise ValueError(f"expected 2n rows with n >= 1, got shape {projections.shape}")
    if tau <= 0:
        raise ValueError(f"tau must be positive, got {tau}")
    return _info_nce(ad.l2_normalize(projections, axis=1), tau)


# --- views -----------------------------------------------------------------

class UserSequences:
    """Fine-granularity counts of one user plus the fine->coarse period map."""

    def __init__(self, counts: UserCounts, fine_to_coarse: np.ndarray | None):
        self.user_id = counts.user_id
        self.periods = counts.periods
        self.fine_to_coarse = fine_to_coarse
        self.nonempty = np.flatnonzero(counts.nonempty())

    def view(self, lo: int, hi: int, scales: Sequence[str]) -> dict[str, list]:
        """BoI sequences of fine periods ``lo..hi`` inclusive at each scale."""
        fine = [(ids, np.log1p(c)) for ids, c in self.periods[lo:hi + 1]]
        out = {scales[0]: fine}
        if len(scales) > 1:
            groups = self.fine_to_coarse[lo:hi + 1]
            coarse = []
            for g in np.unique(groups):
                parts = [self.periods[lo + k] for k in np.flatnonzero(groups == g)]
                ids, c = merge_counts(parts)
                coarse.append((ids, np.log1p(c)))
            out[scales[1]] = coarse
        return out


def admissible_views(nonempty: np.ndarray) -> list[tuple[int, int]]:
    """Runs ``(a, b)`` over the nonempty-period list that are proper subsets."""
    k = len(nonempty)
    return [(a, b) for a in range(k) for b in range(a, k) if b - a + 1 < k]


def sample_user_subsequences(nonempty_periods: Sequence[int], rng: np.random.Generator):
    """Two distinct continuous fine-period ranges ``(lo, hi)`` (inclusive).

    Each view spans a contiguous run of the user's nonempty periods that is
    shorter than the full run, with run endpoints drawn uniformly; the two
    views may overlap but never cover the same nonempty periods.  Returns
    ``None`` for users with fewer than two nonempty periods.
    """
    nonempty = np.asarray(nonempty_periods, dtype=np.int64)
    k = nonempty.size
    if k < 2:
        return None
    n_runs = k * (k + 1) // 2 - 1
    first = _run_from_flat(int(rng.integers(n_runs)), k)
    other = int(rng.integers(n_runs - 1))
    second = _run_from_flat(other + (other >= _flat_from_run(first, k)), k)
    return ((int(nonempty[first[0]]), int(nonempty[first[1]])),
            (int(nonempty[second[0]]), int(nonempty[second[1]])))


def _run_from_flat(f: int, k: int) -> tuple[int, int]:
    # enumerate runs by length 1..k-1, then by start
    for length in range(1, k):
        count = k - length + 1
        if f < count:
            return f, f + length - 1
        f -= count
    raise IndexError("run index out of range")


def _flat_from_run(run: tuple[int, int], k: int) -> int:
    a, b = run
    length = b - a + 1
    return sum(k - L + 1 for L in range(1, length)) + a


# --- training --------------------------------------------------------------

@dataclass
class BoIStore:
    """Fine-granularity interest counts for a set of users over one window."""

    D: int
    window: tuple[int, int]
    fine: str
    coarse: str | None
    users: dict[str, UserCounts] = field(default_factory=dict)

    def sequences(self, user_id: str) -> UserSequences:
        fmap = coarse_map(self.fine, self.coarse, self.window) if self.coarse else None
        return UserSequences(self.users[user_id], fmap)


def train_smen(store: BoIStore, config: SmenConfig, user_ids: Sequence[str] | None = None,
               params: SmenParams | None = None) -> tuple[SmenParams, list[float]]:
    """Train the encoder on same-user sub-sequence views; returns params and loss curve."""
    if config.D != store.D:
        raise ValueError(f"config D={config.D} but store D={store.D}")
    if config.scales[0] != store.fine or (len(config.scales) > 1 and config.scales[1] != store.coarse):
        raise ValueError(f"config scales {config.scales} incompatible with store ({store.fine}, {store.coarse})")
    rng = np.random.default_rng(config.seed)
    params = params or SmenParams(config, rng)
    fmap = coarse_map(store.fine, store.coarse, store.window) if store.coarse else None
    ids = list(user_ids) if user_ids is not None else list(store.users)
    seqs = [UserSequences(store.users[u], fmap) for u in ids]
    eligible = [s for s in seqs if s.nonempty.size >= 2]
    if len(eligible) < 2:
        raise ValueError(f"need >= 2 users with two nonempty periods, found {len(eligible)}")
    opt = Adam(params.parameters(), lr=config.lr)
    curve: list[float] = []
    for epoch in range(config.epochs):
        order = rng.permutation(len(eligible))
        for lo in range(0, len(order), config.batch_size):
            chunk = [eligible[i] for i in order[lo:lo + config.batch_size]]
            if len(chunk) < 2:
                continue
            views = []
            for s in chunk:
                (a0, a1), (b0, b1) = sample_user_subsequences(s.nonempty, rng)
                views.append(s.view(a0, a1, config.scales))
                views.append(s.view(b0, b1, config.scales))
            opt.zero_grad()
            with Tape() as tape:
                loss = smen_contrastive_loss(_head(params, encode_batch(params, views)), config.tau)
                tape.backward(loss)
            opt.step()
            curve.append(loss.item())
        log.info("smen epoch %d loss %.4f", epoch, curve[-1] if curve else float("nan"))
    return params, curve


# --- inference -------------------------------------------------------------

@dataclass
class UserRepresentation:
    user_id: str
    anchors: np.ndarray
    empty: bool = False
    provenance: dict = field(default_factory=dict)

    @property
    def concat(self) -> np.ndarray:
        return self.anchors.reshape(-1)


def represent(params: SmenParams, sequences: Sequence[UserSequences], window_periods: tuple[int, int] | None = None,
              batch_size: int = 512) -> list[UserRepresentation]:
    """Deterministic representations over fine periods ``window_periods``
    (inclusive, default: all).  Users with no events there get zeros."""
    cfg = params.config
    out: list[UserRepresentation] = []
    dt = params.We.data.dtype
    for lo in range(0, len(sequences), batch_size):
        chunk = sequences[lo:lo + batch_size]
        views, slots = [], []
        for k, s in enumerate(chunk):
            a, b = window_periods if window_periods is not None else (0, len(s.periods) - 1)
            if not np.any((s.nonempty >= a) & (s.nonempty <= b)):
                continue
            views.append(s.view(a, b, cfg.scales))
            slots.append(k)
        reps = np.zeros((len(chunk), cfg.M, cfg.H), dtype=dt)
        if views:
            reps[slots] = encode_batch(params, views).data
        filled = set(slots)
        for k, s in enumerate(chunk):
            out.append(UserRepresentation(s.user_id, reps[k], empty=k not in filled,
                                          provenance={"scales": list(cfg.scales),
                                                      "periods": list(window_periods) if window_periods else None}))
    return out


def infer_representation(user_events, boi_encoder, params: SmenParams, window: tuple[int, int],
                         user_id: str | None = None) -> UserRepresentation:
    """Full forward pass for one user's raw events over ``window``."""
    from .interest_vocab import user_counts

    cfg = params.config
    counts = user_counts(user_events, boi_encoder, cfg.scales[0], window, user_id)
    fmap = coarse_map(cfg.scales[0], cfg.scales[1], window) if len(cfg.scales) > 1 else None
    rep, = represent(params, [UserSequences(counts, fmap)])
    rep.provenance.update({"window": list(window)})
    return rep
