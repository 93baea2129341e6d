"""Estimators: exactness oracles, degenerate limits, sampler semantics,
unbiasedness smoke checks (full statistical runs live in the acceptance
suite), and cost accounting."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from deann import (
    BruteForceIndex,
    Dataset,
    IvfAnnIndex,
    KernelSpec,
    RspState,
    deann,
    deann_batch,
    kernel_pair,
    naive_kde,
    permute,
    rs_kde,
    rsp_kde,
)


def _random_dataset(n, d, seed):
    return Dataset.from_array(np.random.default_rng(seed).normal(size=(n, d)).astype(np.float32))


def _scalar_loop_kde(ds, kernel, query):
    return sum(kernel_pair(kernel, row, query) for row in ds.data) / ds.n


# ---------------------------------------------------------------- naive


def test_naive_two_copies_of_query_is_one():
    y = np.array([1.5, -2.0], dtype=np.float32)
    ds = Dataset.from_array(np.vstack([y, y]))
    out = naive_kde(ds, KernelSpec("gaussian", 1.0), y.reshape(1, -1))
    assert out.values[0] == 1.0
    assert out.kernel_evals == 2


def test_naive_half_mass_when_other_point_underflows():
    y = np.zeros(2, dtype=np.float32)
    far = np.full(2, 1e6, dtype=np.float32)
    ds = Dataset.from_array(np.vstack([y, far]))
    out = naive_kde(ds, KernelSpec("exponential", 1.0), y.reshape(1, -1))
    assert out.values[0] == 0.5


@pytest.mark.parametrize("family,h", [("gaussian", 1.0), ("exponential", 1.7), ("laplacian", 2.2)])
def test_naive_matches_scalar_loop(family, h):
    ds = _random_dataset(500, 10, 3)
    kernel = KernelSpec(family, h)
    queries = np.random.default_rng(4).normal(size=(4, 10))
    batch = naive_kde(ds, kernel, queries)
    for j, q in enumerate(queries):
        ref = _scalar_loop_kde(ds, kernel, q)
        assert batch.values[j] == pytest.approx(ref, rel=1e-12)


def test_naive_dimension_mismatch():
    ds = _random_dataset(10, 3, 0)
    with pytest.raises(ValueError):
        naive_kde(ds, KernelSpec("gaussian", 1.0), np.zeros((1, 4)))


# ---------------------------------------------------------------- rs


def test_rs_identical_points_exact_one():
    y = np.ones(3, dtype=np.float32)
    ds = Dataset.from_array(np.tile(y, (50, 1)))
    est = rs_kde(ds, KernelSpec("gaussian", 0.5), y, 7, np.random.default_rng(0))
    assert est.value == 1.0
    assert est.kernel_evals == est.samples_used == 7


def test_rs_single_draw_equals_kernel_pair():
    ds = _random_dataset(100, 4, 5)
    kernel = KernelSpec("exponential", 1.0)
    q = np.random.default_rng(6).normal(size=4)
    draw = np.random.default_rng(99).integers(0, 100, size=1)[0]
    est = rs_kde(ds, kernel, q, 1, np.random.default_rng(99))
    assert est.value == pytest.approx(kernel_pair(kernel, ds.data[draw], q), rel=1e-12)


def test_rs_rejects_zero_samples():
    ds = _random_dataset(10, 2, 0)
    with pytest.raises(ValueError):
        rs_kde(ds, KernelSpec("gaussian", 1.0), np.zeros(2), 0, np.random.default_rng(0))


def test_rs_unbiased_smoke():
    ds = _random_dataset(100, 3, 7)
    kernel = KernelSpec("exponential", 1.5)
    q = np.random.default_rng(8).normal(size=3)
    exact = naive_kde(ds, kernel, q.reshape(1, -1)).values[0]
    rng = np.random.default_rng(1234)
    trials = np.array([rs_kde(ds, kernel, q, 8, rng).value for _ in range(8000)])
    se = trials.std(ddof=1) / math.sqrt(len(trials))
    assert abs(trials.mean() - exact) < 4 * se


# ---------------------------------------------------------------- rsp


def test_rsp_full_pass_is_exact_any_cursor():
    ds = _random_dataset(60, 4, 9)
    kernel = KernelSpec("gaussian", 1.2)
    q = np.random.default_rng(10).normal(size=4)
    exact = naive_kde(ds, kernel, q.reshape(1, -1)).values[0]
    for cursor in (0, 13, 59):
        state = RspState(permuted=permute(ds, 21), cursor=cursor)
        est = rsp_kde(state, kernel, q, 60)
        assert est.value == pytest.approx(exact, rel=1e-12)
        assert state.cursor == cursor  # advanced by n mod n


def test_rsp_wraparound_window_and_cursor():
    ds = _random_dataset(30, 3, 11)
    kernel = KernelSpec("exponential", 2.0)
    q = np.random.default_rng(12).normal(size=3)
    state = RspState(permuted=permute(ds, 5), cursor=29)
    est = rsp_kde(state, kernel, q, 2)
    expected = 0.5 * (
        kernel_pair(kernel, state.permuted.base.data[29], q)
        + kernel_pair(kernel, state.permuted.base.data[0], q)
    )
    assert est.value == pytest.approx(expected, rel=1e-12)
    assert state.cursor == 1


def test_rsp_window_matches_scalar_loop():
    ds = _random_dataset(40, 5, 13)
    kernel = KernelSpec("laplacian", 1.1)
    q = np.random.default_rng(14).normal(size=5)
    state = RspState(permuted=permute(ds, 6), cursor=35)
    est = rsp_kde(state, kernel, q, 10)
    rows = [state.permuted.base.data[(35 + j) % 40] for j in range(10)]
    ref = sum(kernel_pair(kernel, row, q) for row in rows) / 10
    assert est.value == pytest.approx(ref, rel=1e-12)


def test_rsp_m_bounds():
    ds = _random_dataset(10, 2, 0)
    state = RspState.from_dataset(ds, 0)
    with pytest.raises(ValueError):
        rsp_kde(state, KernelSpec("gaussian", 1.0), np.zeros(2), 0)
    with pytest.raises(ValueError):
        rsp_kde(state, KernelSpec("gaussian", 1.0), np.zeros(2), 11)


def test_rsp_cycling_touches_every_row_once():
    ds = _random_dataset(50, 3, 15)
    kernel = KernelSpec("exponential", 1.0)
    q = np.random.default_rng(16).normal(size=3)
    state = RspState.from_dataset(ds, 17)
    chunks = [7, 11, 13, 19]  # sums to 50
    total = 0.0
    for m in chunks:
        est = rsp_kde(state, kernel, q, m)
        total += est.value * m
    exact_sum = naive_kde(ds, kernel, q.reshape(1, -1)).values[0] * 50
    assert total == pytest.approx(exact_sum, rel=1e-12)
    assert state.cursor == 0


# ---------------------------------------------------------------- deann


def test_deann_k_equals_n_m_zero_is_naive():
    ds = _random_dataset(80, 6, 17)
    kernel = KernelSpec("gaussian", 1.4)
    q = np.random.default_rng(18).normal(size=6)
    exact = naive_kde(ds, kernel, q.reshape(1, -1)).values[0]
    est = deann(ds, kernel, BruteForceIndex(ds), q, 80, 0)
    assert est.value == pytest.approx(exact, rel=1e-12)
    assert est.neighbors_used == 80 and est.samples_used == 0
    assert not est.truncated  # nothing was dropped


def test_deann_m_zero_truncated_flag():
    ds = _random_dataset(40, 3, 19)
    est = deann(ds, KernelSpec("gaussian", 1.0), BruteForceIndex(ds),
                np.zeros(3), 5, 0)
    assert est.truncated
    assert est.kernel_evals == 5


def test_deann_k_zero_matches_rs_exactly():
    ds = _random_dataset(70, 4, 21)
    kernel = KernelSpec("exponential", 1.2)
    q = np.random.default_rng(22).normal(size=4)
    a = deann(ds, kernel, None, q, 0, 25, rng=np.random.default_rng(77))
    b = rs_kde(ds, kernel, q, 25, np.random.default_rng(77))
    assert a.value == b.value


def test_deann_k_zero_matches_rsp_exactly():
    ds = _random_dataset(70, 4, 23)
    kernel = KernelSpec("exponential", 1.2)
    q = np.random.default_rng(24).normal(size=4)
    sa = RspState(permuted=permute(ds, 3), cursor=50)
    sb = RspState(permuted=permute(ds, 3), cursor=50)
    a = deann(ds, kernel, None, q, 0, 30, rsp_state=sa)
    b = rsp_kde(sb, kernel, q, 30)
    assert a.value == b.value
    assert sa.cursor == sb.cursor


def test_partition_composition_identity():
    # exact sub-KDEs over any fixed partition recombine to the full KDE
    ds = _random_dataset(90, 5, 25)
    kernel = KernelSpec("gaussian", 1.1)
    q = np.random.default_rng(26).normal(size=5)
    full = naive_kde(ds, kernel, q.reshape(1, -1)).values[0]
    for cut in (1, 30, 45, 89):
        a = Dataset.from_array(ds.data[:cut])
        b = Dataset.from_array(ds.data[cut:])
        za = naive_kde(a, kernel, q.reshape(1, -1)).values[0]
        zb = naive_kde(b, kernel, q.reshape(1, -1)).values[0]
        combined = (cut / 90) * za + ((90 - cut) / 90) * zb
        assert combined == pytest.approx(full, rel=1e-12)


def test_deann_with_exact_tail_equals_naive():
    # permuted sampler clamped to one full pass makes Z2 exact
    ds = _random_dataset(64, 4, 27)
    kernel = KernelSpec("exponential", 1.3)
    q = np.random.default_rng(28).normal(size=4)
    exact = naive_kde(ds, kernel, q.reshape(1, -1)).values[0]
    state = RspState.from_dataset(ds, 1)
    est = deann(ds, kernel, BruteForceIndex(ds), q, 10, 64, rsp_state=state)
    assert est.clamped
    assert est.samples_used == 54
    assert est.value == pytest.approx(exact, rel=1e-12)


def test_deann_uses_actual_neighbor_count():
    # a 1-probe inverted file over tiny clusters returns fewer than k
    ds = _random_dataset(60, 3, 29)
    ann = IvfAnnIndex.build(ds, 20, seed=0, n_probe=1)
    est = deann(ds, KernelSpec("gaussian", 1.0), ann, np.zeros(3), 30, 10,
                rng=np.random.default_rng(1))
    assert est.neighbors_used < 30
    assert est.kernel_evals == est.neighbors_used + est.samples_used


def test_deann_unbiased_smoke_poor_ann():
    rng = np.random.default_rng(31)
    centers = rng.normal(scale=12.0, size=(5, 3))
    pts = centers[np.arange(200) % 5] + rng.normal(size=(200, 3))
    ds = Dataset.from_array(pts.astype(np.float32))
    kernel = KernelSpec("exponential", 2.0)
    q = centers[0] + rng.normal(size=3)
    exact = naive_kde(ds, kernel, q.reshape(1, -1)).values[0]
    ann = IvfAnnIndex.build(ds, 10, seed=2, n_probe=1)  # deliberately poor recall
    sampler_rng = np.random.default_rng(32)
    trials = np.array([
        deann(ds, kernel, ann, q, 10, 20, rng=sampler_rng).value for _ in range(8000)
    ])
    se = trials.std(ddof=1) / math.sqrt(len(trials))
    assert abs(trials.mean() - exact) < 4 * se


def test_deann_parameter_validation():
    ds = _random_dataset(20, 2, 33)
    kernel = KernelSpec("gaussian", 1.0)
    bf = BruteForceIndex(ds)
    rng = np.random.default_rng(0)
    with pytest.raises(ValueError):
        deann(ds, kernel, bf, np.zeros(2), 21, 0)
    with pytest.raises(ValueError):
        deann(ds, kernel, bf, np.zeros(2), 20, 5, rng=rng)  # remainder empty
    with pytest.raises(ValueError):
        deann(ds, kernel, bf, np.zeros(2), 2, -1, rng=rng)
    with pytest.raises(ValueError):
        deann(ds, kernel, bf, np.zeros(2), 2, 5)  # no sampler
    with pytest.raises(ValueError):
        deann(ds, kernel, bf, np.zeros(2), 2, 5, rng=rng,
              rsp_state=RspState.from_dataset(ds, 0))  # both samplers
    other = _random_dataset(19, 2, 34)
    with pytest.raises(ValueError):
        deann(ds, kernel, bf, np.zeros(2), 2, 5, rsp_state=RspState.from_dataset(other, 0))
    with pytest.raises(ValueError):
        deann(ds, kernel, bf, np.zeros(3), 2, 5, rng=rng)


@given(
    k=st.integers(0, 30),
    m=st.integers(0, 60),
    seed=st.integers(0, 100),
)
@settings(max_examples=40, deadline=None)
def test_deann_cost_accounting_and_bounded_value(k, m, seed):
    ds = _random_dataset(40, 3, 35)
    kernel = KernelSpec("exponential", 1.0)
    q = np.random.default_rng(seed).normal(size=3)
    if m > 0 and k >= 40:
        return
    kwargs = {}
    if m > 0:
        if seed % 2:
            kwargs["rng"] = np.random.default_rng(seed)
        else:
            kwargs["rsp_state"] = RspState.from_dataset(ds, seed)
    est = deann(ds, kernel, BruteForceIndex(ds), q, k, m, **kwargs)
    assert est.kernel_evals == est.neighbors_used + est.samples_used
    assert 0.0 <= est.value <= 1.0 + 1e-12


def test_deann_batch_threads_shared_state_in_order():
    ds = _random_dataset(50, 3, 37)
    kernel = KernelSpec("exponential", 1.0)
    queries = np.random.default_rng(38).normal(size=(4, 3))
    ann = BruteForceIndex(ds)
    shared = RspState.from_dataset(ds, 40)
    batch = deann_batch(ds, kernel, ann, queries, 5, 10, rsp_state=shared)
    # replaying sequentially with an identical state reproduces the batch
    replay_state = RspState.from_dataset(ds, 40)
    replay = [deann(ds, kernel, ann, q, 5, 10, rsp_state=replay_state) for q in queries]
    assert [e.value for e in batch] == [e.value for e in replay]
    assert shared.cursor == replay_state.cursor != 0


def test_deann_batch_independent_cursor_offsets():
    ds = _random_dataset(48, 3, 41)
    kernel = KernelSpec("exponential", 1.0)
    queries = np.tile(np.random.default_rng(42).normal(size=3), (4, 1))
    shared = RspState.from_dataset(ds, 43)
    batch = deann_batch(ds, kernel, None, queries, 0, 12, rsp_state=shared,
                        independent_cursors=True)
    # query j reads from offset floor(j*n/N); reproduce by direct windows
    for j, est in enumerate(batch):
        state = RspState(permuted=shared.permuted, cursor=(j * 48) // 4)
        ref = rsp_kde(state, kernel, queries[j], 12)
        assert est.value == ref.value
