import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import userrep.autodiff as ad
from userrep.autodiff import Tensor
from userrep.gradcheck import grad_check
from userrep.ingest import BehaviorEvent, to_epoch
from userrep.interest_vocab import BoIEncoder, InterestVocabulary, UserCounts, coarse_map
from userrep.item_embed import ItemEncoder
from userrep.smen import (BoIStore, SmenConfig, SmenParams, UserSequences, _head, admissible_views,
                          attention_weights, encode_batch, gru_aggregate, infer_representation,
                          multi_anchor_forward, multi_scale_fuse, projection_head, represent,
                          sample_user_subsequences, smen_contrastive_loss, train_smen)
from userrep.sparse import SparseVec

from oracles import fuse as oracle_fuse
from oracles import gru as oracle_gru
from oracles import head as oracle_head
from oracles import multi_anchor as oracle_anchor
from oracles import sig

# four months straddling a year boundary: N=4 fine, N'=2 coarse periods
MICRO_WINDOW = (to_epoch("2020-11-01"), to_epoch("2021-03-01"))


def _params(D=20, M=3, H=8, seed=0, **kw):
    return SmenParams(SmenConfig(D=D, M=M, H=H, seed=seed, **kw), np.random.default_rng(seed))


def _randomize_biases(p, rng):
    # biases start at zero; perturb them so the oracles exercise every term
    for k in ("bz", "br", "bn"):
        p.gru[k].data = rng.normal(scale=0.3, size=p.gru[k].shape)


def _random_boi(rng, D, max_nnz=6):
    nnz = int(rng.integers(0, max_nnz + 1))
    idx = rng.choice(D, size=nnz, replace=False)
    return SparseVec(D, idx, np.log1p(rng.integers(1, 9, size=nnz).astype(float)))


def oracle_view(view, p):
    fine = oracle_gru([oracle_anchor(SparseVec(p.config.D, ids, v), p) for ids, v in view["month"]], p)
    coarse = oracle_gru([oracle_anchor(SparseVec(p.config.D, ids, v), p) for ids, v in view["year"]], p)
    return oracle_fuse(fine, coarse, p)


# --- oracle equivalence ----------------------------------------------------------

@pytest.mark.parametrize("seed", range(100))
def test_multi_anchor_matches_oracle(seed):
    rng = np.random.default_rng(seed)
    D, M, H = int(rng.integers(2, 60)), int(rng.integers(1, 5)), int(rng.integers(1, 7))
    p = _params(D, M, H, seed)
    b = _random_boi(rng, D, max_nnz=min(D, 64))
    np.testing.assert_allclose(multi_anchor_forward(b, p).data, oracle_anchor(b, p), atol=1e-8, rtol=0)


@pytest.mark.parametrize("shared", [True, False])
@pytest.mark.parametrize("seed", range(50))
def test_gru_matches_oracle(seed, shared):
    rng = np.random.default_rng(seed)
    M, H, T = int(rng.integers(1, 4)), int(rng.integers(1, 6)), int(rng.integers(1, 6))
    p = _params(5, M, H, seed, shared_gru=shared)
    _randomize_biases(p, rng)
    seq = [np.abs(rng.normal(size=(M, H))) for _ in range(T)]
    np.testing.assert_allclose(gru_aggregate(seq, p).data, oracle_gru(seq, p), atol=1e-8, rtol=0)


@pytest.mark.parametrize("vector_gate", [False, True])
@pytest.mark.parametrize("seed", range(50))
def test_fuse_matches_oracle(seed, vector_gate):
    rng = np.random.default_rng(seed)
    M, H = int(rng.integers(1, 5)), int(rng.integers(1, 6))
    p = _params(5, M, H, seed, vector_gate=vector_gate)
    a, b = rng.normal(size=(M, H)), rng.normal(size=(M, H))
    np.testing.assert_allclose(multi_scale_fuse(a, b, p).data, oracle_fuse(a, b, p), atol=1e-8, rtol=0)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31), st.booleans())
def test_fuse_is_convex_combination(seed, vector_gate):
    rng = np.random.default_rng(seed)
    p = _params(5, 3, 4, seed % 1000, vector_gate=vector_gate)
    a, b = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
    out = multi_scale_fuse(a, b, p).data
    assert np.all(out >= np.minimum(a, b) - 1e-12) and np.all(out <= np.maximum(a, b) + 1e-12)


@pytest.mark.parametrize("seed", range(100))
def test_head_matches_oracle(seed):
    rng = np.random.default_rng(seed)
    M, H = int(rng.integers(1, 5)), int(rng.integers(1, 6))
    p = _params(5, M, H, seed)
    a = rng.normal(size=(M, H))
    np.testing.assert_allclose(projection_head(a, p).data, oracle_head(a, p), atol=1e-8, rtol=0)


def test_head_identity_mix_and_zero_anchors(rng):
    p = _params(5, 2, 4)
    p.Wh3.data = np.eye(2)
    a = rng.normal(size=(2, 4))
    v = np.stack([np.maximum(p.Wh1.data[i] @ a[i], 0) for i in range(2)])
    np.testing.assert_allclose(projection_head(a, p).data, p.Wh2.data @ np.maximum(2 * v, 0).reshape(-1), atol=1e-12)
    np.testing.assert_array_equal(projection_head(np.zeros((2, 4)), p).data, np.zeros(8))


def _random_view(rng, D, n_fine, fmap):
    fine = []
    for _ in range(n_fine):
        b = _random_boi(rng, D)
        fine.append((b.indices, b.values))
    counts = [(ids, np.expm1(v)) for ids, v in fine]
    seq = UserSequences(UserCounts("u", counts), fmap)
    return seq.view(0, n_fine - 1, ("month", "year"))


@pytest.mark.parametrize("seed", range(100))
def test_batched_encoder_matches_per_view_oracle(seed):
    rng = np.random.default_rng(seed)
    D, M, H = 12, int(rng.integers(1, 4)), int(rng.integers(1, 5))
    p = _params(D, M, H, seed, shared_gru=bool(seed % 2))
    _randomize_biases(p, rng)
    fmap = np.array([0, 0, 1, 1, 1, 2])
    views = [_random_view(rng, D, int(rng.integers(1, 7)), fmap) for _ in range(int(rng.integers(1, 5)))]
    got = encode_batch(p, views).data
    for k, view in enumerate(views):
        np.testing.assert_allclose(got[k], oracle_view(view, p), atol=1e-8, rtol=0)


@pytest.mark.parametrize("seed", range(100))
def test_contrastive_loss_matches_oracle(seed):
    rng = np.random.default_rng(seed)
    n = 1 + seed % 3
    z = rng.normal(size=(2 * n, 5))
    u = z / np.linalg.norm(z, axis=1, keepdims=True)
    total = 0.0
    for a in range(2 * n):
        pos = a ^ 1
        den = sum(math.exp(u[a] @ u[v] / 0.1) for v in range(2 * n) if v != a)
        total -= math.log(math.exp(u[a] @ u[pos] / 0.1) / den)
    assert smen_contrastive_loss(Tensor(z), 0.1).item() == pytest.approx(total / (2 * n), abs=1e-8)


def test_contrastive_loss_examples(rng):
    assert smen_contrastive_loss(Tensor(rng.normal(size=(2, 3))), 0.1).item() == pytest.approx(0, abs=1e-12)
    same = np.tile(rng.normal(size=(1, 4)), (6, 1))
    assert smen_contrastive_loss(Tensor(same), 0.1).item() == pytest.approx(math.log(5), abs=1e-12)


# --- attention properties -------------------------------------------------------

@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31), st.integers(1, 8))
def test_attention_normalized_and_positive(seed, M):
    rng = np.random.default_rng(seed)
    p = _params(30, M, 6, seed % 997)
    for t in (p.We, p.Wa, p.Wp):
        t.data = t.data * rng.uniform(0.5, 3)
    alpha = attention_weights(p, rng.choice(30, size=10, replace=False))
    assert alpha.shape == (M, 10)
    np.testing.assert_allclose(alpha.sum(axis=0), 1.0, atol=1e-6)
    assert np.all(alpha > 0)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31))
def test_attention_shift_invariant(seed):
    # adding u to every anchor row shifts all logits of interest j by u.k_j
    rng = np.random.default_rng(seed)
    p = _params(30, 4, 6, seed % 997)
    ids = np.arange(30)
    before = attention_weights(p, ids)
    p.Wa.data = p.Wa.data + rng.normal(size=6)
    np.testing.assert_allclose(attention_weights(p, ids), before, atol=1e-9, rtol=0)


def test_single_anchor_is_attention_free(rng):
    p = _params(15, 1, 4)
    np.testing.assert_array_equal(attention_weights(p, np.arange(15)), np.ones((1, 15)))
    b = _random_boi(rng, 15)
    np.testing.assert_allclose(multi_anchor_forward(b, p).data[0],
                               np.maximum(b.to_dense() @ p.We.data, 0), atol=1e-12)


def test_anchor_output_nonnegative_and_sparse_only(rng):
    p = _params(40, 3, 5)
    b = SparseVec.from_dict(40, {3: 1.0, 17: 2.0})
    before = multi_anchor_forward(b, p).data
    assert np.all(before >= 0)
    p.We.data[[0, 1, 2, 20, 39]] = 1e6  # rows outside b must not matter
    np.testing.assert_array_equal(multi_anchor_forward(b, p).data, before)


def test_dimension_mismatch_rejected():
    with pytest.raises(ValueError):
        multi_anchor_forward(SparseVec(7), _params(8, 2, 3))


# --- gradients ------------------------------------------------------------------

def _micro_batch(rng, D=20):
    """Two users, two views each, over the N=4 / N'=2 micro window."""
    fmap = coarse_map("month", "year", MICRO_WINDOW)
    views = []
    for _ in range(2):
        counts = []
        for _ in range(4):
            ids = np.sort(rng.choice(D, size=int(rng.integers(1, 4)), replace=False))
            counts.append((ids, rng.integers(1, 5, size=ids.size).astype(float)))
        seq = UserSequences(UserCounts("u", counts), fmap)
        views += [seq.view(0, 2, ("month", "year")), seq.view(1, 3, ("month", "year"))]
    return views


def test_full_loss_gradcheck_micro():
    rng = np.random.default_rng(7)
    p = _params(20, 3, 8, seed=3)
    _randomize_biases(p, rng)
    views = _micro_batch(rng)
    f = lambda: smen_contrastive_loss(_head(p, encode_batch(p, views)), 0.1)
    assert grad_check(f, p.parameters(), eps=1e-5) < 1e-4


def test_per_anchor_gru_and_vector_gate_gradcheck():
    rng = np.random.default_rng(8)
    p = _params(10, 2, 3, seed=4, shared_gru=False, vector_gate=True)
    _randomize_biases(p, rng)
    views = _micro_batch(rng, D=10)
    f = lambda: smen_contrastive_loss(_head(p, encode_batch(p, views)), 0.1)
    assert grad_check(f, p.parameters(), eps=1e-5) < 1e-4


# --- views ------------------------------------------------------------------------

def test_two_nonempty_months_give_single_month_views():
    assert admissible_views(np.array([3, 9])) == [(0, 0), (1, 1)]
    for seed in range(20):
        a, b = sample_user_subsequences([3, 9], np.random.default_rng(seed))
        assert {a, b} == {(3, 3), (9, 9)}


def test_single_nonempty_month_skipped():
    assert sample_user_subsequences([4], np.random.default_rng(0)) is None


def test_views_reproducible():
    ne = [0, 2, 3, 7, 8, 11]
    assert sample_user_subsequences(ne, np.random.default_rng(5)) == sample_user_subsequences(ne, np.random.default_rng(5))


@settings(max_examples=100, deadline=None)
@given(st.lists(st.integers(0, 59), min_size=2, max_size=20, unique=True), st.integers(0, 2**31))
def test_views_are_distinct_proper_runs(periods, seed):
    ne = sorted(periods)
    (a0, a1), (b0, b1) = sample_user_subsequences(ne, np.random.default_rng(seed))
    runs = set()
    for lo, hi in ((a0, a1), (b0, b1)):
        assert lo in ne and hi in ne and lo <= hi
        covered = tuple(x for x in ne if lo <= x <= hi)
        assert 1 <= len(covered) < len(ne)
        runs.add(covered)
    assert len(runs) == 2


def test_view_distribution_uniform_over_ordered_pairs():
    ne = [0, 1, 2]
    runs = admissible_views(np.array(ne))
    assert len(runs) == 5
    rng = np.random.default_rng(0)
    counts = {}
    for _ in range(20000):
        pair = sample_user_subsequences(ne, rng)
        counts[pair] = counts.get(pair, 0) + 1
    assert len(counts) == 20
    assert max(counts.values()) < 1.15 * 1000 and min(counts.values()) > 0.85 * 1000


def test_coarse_view_sums_fine_counts():
    fmap = np.array([0, 0, 1, 1])
    counts = [(np.array([1]), np.array([2.0])), (np.array([1, 3]), np.array([1.0, 1.0])),
              (np.zeros(0, dtype=np.int64), np.zeros(0)), (np.array([3]), np.array([4.0]))]
    v = UserSequences(UserCounts("u", counts), fmap).view(1, 3, ("month", "year"))
    assert len(v["month"]) == 3 and v["month"][1][0].size == 0
    (ids0, val0), (ids1, val1) = v["year"]
    assert ids0.tolist() == [1, 3] and np.allclose(val0, np.log1p([1.0, 1.0]))
    assert ids1.tolist() == [3] and np.allclose(val1, np.log1p([4.0]))


# --- training and inference -----------------------------------------------------

def _toy_store(n_users=24, D=16, seed=0):
    """Each user draws from a private set of 3 interests across 12 months."""
    rng = np.random.default_rng(seed)
    window = (to_epoch("2020-01-01"), to_epoch("2021-01-01"))
    store = BoIStore(D, window, "month", "year")
    for u in range(n_users):
        own = rng.choice(D, size=3, replace=False)
        periods = []
        for _ in range(12):
            if rng.random() < 0.7:
                ids = np.sort(rng.choice(own, size=int(rng.integers(1, 4)), replace=False))
                periods.append((ids, rng.integers(1, 5, size=ids.size).astype(float)))
            else:
                periods.append((np.zeros(0, dtype=np.int64), np.zeros(0)))
        store.users[f"u{u:02d}"] = UserCounts(f"u{u:02d}", periods)
    return store


def test_zero_lr_leaves_parameters_unchanged():
    store = _toy_store()
    cfg = SmenConfig(D=16, M=2, H=4, lr=0.0, epochs=1, batch_size=8, seed=2)
    fresh = SmenParams(cfg, np.random.default_rng(2))
    params, curve = train_smen(store, cfg)
    for a, b in zip(fresh.parameters(), params.parameters()):
        np.testing.assert_array_equal(a.data, b.data)
    assert len(curve) == 3


def test_training_deterministic():
    store = _toy_store()
    cfg = SmenConfig(D=16, M=2, H=4, epochs=2, batch_size=8, seed=5)
    assert train_smen(store, cfg)[1] == train_smen(store, cfg)[1]


def test_too_few_eligible_users():
    store = _toy_store(3)
    for u in list(store.users)[1:]:
        store.users[u].periods = [(np.zeros(0, dtype=np.int64), np.zeros(0))] * 12
    with pytest.raises(ValueError, match="need >= 2 users"):
        train_smen(store, SmenConfig(D=16, M=2, H=4, epochs=1))


def test_training_separates_users_on_held_out_data():
    store = _toy_store(80, seed=1)
    ids = sorted(store.users)
    params, curve = train_smen(store, SmenConfig(D=16, M=2, H=8, epochs=30, batch_size=16, lr=5e-3, seed=1),
                               user_ids=ids[:60])
    assert np.mean(curve[-8:]) < np.mean(curve[:4])
    rng = np.random.default_rng(0)
    held = [store.sequences(u) for u in ids[60:]]
    views = []
    for s in held:
        (a0, a1), (b0, b1) = sample_user_subsequences(s.nonempty, rng)
        views += [s.view(a0, a1, ("month", "year")), s.view(b0, b1, ("month", "year"))]
    r = encode_batch(params, views).data.reshape(len(views), -1)
    r /= np.linalg.norm(r, axis=1, keepdims=True)
    sim = r @ r.T
    n = len(views)
    same = np.mean([sim[k, k + 1] for k in range(0, n, 2)])
    cross = np.mean([sim[a, b] for a, b in itertools.combinations(range(n), 2) if a // 2 != b // 2])
    assert same > cross + 0.1


def test_checkpoint_roundtrip(tmp_path):
    p = _params(12, 2, 3, seed=9, shared_gru=False, vector_gate=True)
    p.save(tmp_path / "s.ckpt")
    back = SmenParams.load(tmp_path / "s.ckpt")
    assert back.config == p.config
    for a, b in zip(p.parameters(), back.parameters()):
        np.testing.assert_array_equal(a.data, b.data)


def test_represent_zero_history_and_purity():
    store = _toy_store(5)
    store.users["empty"] = UserCounts("empty", [(np.zeros(0, dtype=np.int64), np.zeros(0))] * 12)
    p = _params(16, 2, 4)
    seqs = [store.sequences(u) for u in sorted(store.users)]
    a = represent(p, seqs)
    b = represent(p, seqs, batch_size=2)
    for x, y in zip(a, b):
        assert x.user_id == y.user_id
        np.testing.assert_array_equal(x.concat, y.concat)
    empty = [r for r in a if r.user_id == "empty"][0]
    assert empty.empty and not np.any(empty.concat)
    assert all(not r.empty for r in a if r.user_id != "empty")


def test_represent_window_restricts_history():
    store = _toy_store(4)
    p = _params(16, 2, 4)
    s = store.sequences("u00")
    last, = represent(p, [s], (9, 11))
    direct = encode_batch(p, [s.view(9, 11, ("month", "year"))]).data[0]
    np.testing.assert_array_equal(last.anchors, direct)


def test_paper_dimension():
    p = SmenParams(SmenConfig(D=50, M=10, H=128), np.random.default_rng(0))
    store = _toy_store(2, D=50)
    r, _ = represent(p, [store.sequences(u) for u in sorted(store.users)])
    assert r.concat.shape == (1280,)


def test_infer_from_raw_events():
    words = [f"w{k}" for k in range(6)]
    enc = ItemEncoder(words, H=8, rng=np.random.default_rng(0))
    boi = BoIEncoder(enc, InterestVocabulary(enc.encode([(w,) for w in words]).astype(np.float64)))
    p = _params(6, 2, 3)
    window = (to_epoch("2020-01-01"), to_epoch("2022-01-01"))
    events = [BehaviorEvent("u", window[0] + k * 40 * 86400, (words[k % 6],)) for k in range(12)]
    a = infer_representation(events, boi, p, window, "u")
    b = infer_representation(events, boi, p, window, "u")
    np.testing.assert_array_equal(a.concat, b.concat)
    assert a.concat.shape == (6,) and not a.empty
    z = infer_representation([], boi, p, window, "nobody")
    assert z.empty and not np.any(z.concat)


def test_contrastive_loss_tolerates_dead_projection(rng):
    z = rng.normal(size=(4, 3))
    z[2] = 0.0
    with ad.Tape() as tape:
        t = Tensor(z, requires_grad=True)
        loss = smen_contrastive_loss(t, 0.1)
        tape.backward(loss)
    assert np.isfinite(loss.item()) and np.all(np.isfinite(t.grad))
    with pytest.raises(ValueError):
        smen_contrastive_loss(Tensor(rng.normal(size=(3, 3))), 0.1)


def test_zero_boi_gives_zero_anchors():
    np.testing.assert_array_equal(multi_anchor_forward(SparseVec(20), _params(20, 3, 4)).data, np.zeros((3, 4)))


def test_equal_anchor_rows_split_evenly(rng):
    p = _params(20, 2, 4)
    p.Wa.data[1] = p.Wa.data[0]
    np.testing.assert_allclose(attention_weights(p, np.arange(20)), 0.5, atol=1e-15)
    r = multi_anchor_forward(_random_boi(rng, 20), p).data
    np.testing.assert_array_equal(r[0], r[1])


def test_gru_zero_input_zero_bias_stays_zero():
    p = _params(5, 2, 3)
    np.testing.assert_array_equal(gru_aggregate([np.zeros((2, 3))], p).data, np.zeros((2, 3)))


def test_gru_without_recurrence_sees_only_last_step(rng):
    p = _params(5, 2, 3)
    _randomize_biases(p, rng)
    for k in ("Uz", "Ur", "Un"):
        p.gru[k].data = np.zeros_like(p.gru[k].data)
    x = np.abs(rng.normal(size=(2, 3)))
    one = gru_aggregate([x], p).data
    # with U=0 the gates ignore h, but h still blends: h_t = (1-z) h_{t-1} + z n
    z = sig(x @ p.gru["Wz"].data + p.gru["bz"].data)
    n = np.tanh(x @ p.gru["Wn"].data + p.gru["bn"].data)
    np.testing.assert_allclose(one, z * n, atol=1e-12)
    three = gru_aggregate([x, x, x], p).data
    np.testing.assert_allclose(three, n * (1 - (1 - z) ** 3), atol=1e-12)


def test_gru_empty_sequence_rejected():
    with pytest.raises(ValueError):
        gru_aggregate([], _params(5, 2, 3))


def test_gate_saturation_and_equal_inputs(rng):
    p = _params(5, 3, 4)
    a, b = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
    p.bs.data = np.full_like(p.bs.data, 100.0)
    np.testing.assert_allclose(multi_scale_fuse(a, b, p).data, a, atol=1e-6)
    p.bs.data = np.full_like(p.bs.data, -3.7)
    np.testing.assert_allclose(multi_scale_fuse(a, a, p).data, a, atol=1e-15)


def test_half_gate_averages(rng):
    p = _params(5, 3, 4)
    p.Ws.data = np.zeros_like(p.Ws.data)
    p.bs.data = np.zeros_like(p.bs.data)
    a, b = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
    np.testing.assert_allclose(multi_scale_fuse(a, b, p).data, (a + b) / 2, atol=1e-15)


def test_fuse_and_head_shape_mismatch_rejected(rng):
    p = _params(5, 3, 4)
    with pytest.raises(ValueError):
        multi_scale_fuse(rng.normal(size=(3, 4)), rng.normal(size=(2, 4)), p)
    with pytest.raises(ValueError):
        projection_head(rng.normal(size=(2, 4)), p)


def test_initialization_ranges():
    p = _params(30, 4, 16)
    bound = 1 / math.sqrt(16)
    for t in p.parameters():
        assert np.all(np.abs(t.data) <= bound)
    for k in ("bz", "br", "bn"):
        assert not np.any(p.gru[k].data)
