import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from auxembed import data as D


def _session(t=20, n=3, m=2, discrete=True, seed=0):
    rng = np.random.default_rng(seed)
    return D.Session(
        signal=rng.standard_normal((t, n)).astype(np.float32).astype(np.float64),
        continuous_context=rng.standard_normal((t, m)).astype(np.float32).astype(np.float64),
        discrete_context=rng.integers(0, 3, t) if discrete else None,
    )


def test_csv_roundtrip_minimal(tmp_path):
    p = tmp_path / "tiny.csv"
    p.write_text("s0,s1\n1,2\n3,4\n5,6\n")
    s = D.load_session(p)
    assert s.n_samples == 3 and s.n_signals == 2
    assert s.continuous_context is None and s.discrete_context is None
    np.testing.assert_array_equal(s.signal, [[1, 2], [3, 4], [5, 6]])


def test_csv_with_contexts(tmp_path):
    p = tmp_path / "ctx.csv"
    p.write_text("s0,c0,k\n1,0.5,0\n2,0.25,1\n")
    s = D.load_session(p)
    assert s.n_context == 1
    np.testing.assert_array_equal(s.discrete_context, [0, 1])


def test_csv_nan_cell_names_row(tmp_path):
    p = tmp_path / "bad.csv"
    p.write_text("s0\n1\nNaN\n3\n")
    with pytest.raises(D.DataError, match="row 3"):
        D.load_session(p)


def test_csv_ragged_row_names_row(tmp_path):
    p = tmp_path / "ragged.csv"
    p.write_text("s0,s1\n1,2\n3\n")
    with pytest.raises(D.DataError, match="row 3"):
        D.load_session(p)


def test_csv_non_numeric_names_row_and_column(tmp_path):
    p = tmp_path / "nonnum.csv"
    p.write_text("s0,s1\n1,2\n3,oops\n")
    with pytest.raises(D.DataError, match="row 3.*s1"):
        D.load_session(p)


def test_cbrs_roundtrip_bit_identical(tmp_path):
    s = _session()
    path = tmp_path / "s.cbrs"
    D.write_session(s, path)
    back = D.load_session(path)
    np.testing.assert_array_equal(back.signal, s.signal)
    np.testing.assert_array_equal(back.continuous_context, s.continuous_context)
    np.testing.assert_array_equal(back.discrete_context, s.discrete_context)


def test_cbrs_write_is_byte_deterministic(tmp_path):
    s = _session(seed=5)
    a, b = tmp_path / "a.cbrs", tmp_path / "b.cbrs"
    D.write_session(s, a)
    D.write_session(s, b)
    assert a.read_bytes() == b.read_bytes()


def test_cbrs_optional_context_flags(tmp_path):
    s = D.Session(signal=np.zeros((4, 2)))
    path = tmp_path / "plain.cbrs"
    D.write_session(s, path)
    raw = path.read_bytes()
    import struct
    _, t, n, m, has_discrete, k = struct.unpack("<IQIIB3xI", raw[4:32])
    assert (m, has_discrete, k) == (0, 0, 0)
    back = D.load_session(path)
    assert back.continuous_context is None and back.discrete_context is None


def test_cbrs_file_size_formula(tmp_path):
    t, n = 15_000, 100
    rng = np.random.default_rng(0)
    s = D.Session(signal=rng.poisson(2.0, (t, n)).astype(np.float64),
                  continuous_context=rng.random(t).astype(np.float32))
    path = tmp_path / "big.cbrs"
    D.write_session(s, path)
    assert path.stat().st_size == 64 + 4 * (t * n + t * 1)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(min_value=0, max_value=10_000),
       t=st.integers(min_value=1, max_value=30),
       n=st.integers(min_value=1, max_value=4),
       m=st.integers(min_value=0, max_value=3),
       with_discrete=st.booleans())
def test_cbrs_roundtrip_property(seed, t, n, m, with_discrete, tmp_path_factory):
    rng = np.random.default_rng(seed)
    s = D.Session(
        signal=rng.standard_normal((t, n)).astype(np.float32).astype(np.float64),
        continuous_context=None if m == 0
        else rng.standard_normal((t, m)).astype(np.float32).astype(np.float64),
        discrete_context=rng.integers(0, 5, t) if with_discrete else None,
    )
    path = tmp_path_factory.mktemp("rt") / "s.cbrs"
    D.write_session(s, path)
    back = D.load_session(path)
    np.testing.assert_array_equal(back.signal, s.signal)
    if m:
        np.testing.assert_array_equal(back.continuous_context, s.continuous_context)
    else:
        assert back.continuous_context is None
    if with_discrete:
        np.testing.assert_array_equal(back.discrete_context, s.discrete_context)


def test_session_rejects_nan():
    with pytest.raises(D.DataError, match="NaN"):
        D.Session(signal=np.array([[1.0], [np.nan]]))


def test_multisession_requires_shared_context_dim():
    a = _session(m=2)
    b = _session(m=3, seed=1)
    with pytest.raises(D.DataError, match="context dimension"):
        D.MultiSessionDataset([a, b])


def test_split_80_20():
    s = _session(t=15_000, n=2, m=1, seed=2)
    plan = D.fraction_plan(15_000, train=0.8, validation=0.2)
    parts = D.split(s, plan)
    assert parts["train"].n_samples == 12_000
    assert parts["validation"].n_samples == 3_000


def test_split_everything_to_train_is_identity():
    s = _session(t=40)
    parts = D.split(s, D.SplitPlan([(0, 40, "train")]))
    np.testing.assert_array_equal(parts["train"].signal, s.signal)
    np.testing.assert_array_equal(parts["train"].discrete_context, s.discrete_context)


def test_split_overlap_rejected():
    s = _session(t=10)
    with pytest.raises(D.DataError, match="overlap"):
        D.split(s, D.SplitPlan([(0, 6, "train"), (4, 10, "test")]))


def test_split_preserves_contexts_and_order():
    s = _session(t=30, m=1)
    plan = D.SplitPlan([(0, 10, "train"), (10, 20, "validation"), (20, 30, "train")])
    parts = D.split(s, plan)
    np.testing.assert_array_equal(
        parts["train"].continuous_context,
        np.concatenate([s.continuous_context[:10], s.continuous_context[20:]]))


def test_kfold_each_index_tested_once():
    t, k = 31, 3
    seen = np.zeros(t, dtype=int)
    for plan in D.kfold_plans(t, k):
        for start, stop, role in plan.segments:
            if role == "test":
                seen[start:stop] += 1
    np.testing.assert_array_equal(seen, np.ones(t, dtype=int))


def test_kfold_respects_trial_boundaries():
    trials = np.repeat(np.arange(7), 5)  # 7 trials of length 5
    for plan in D.kfold_plans(len(trials), 3, trial_ids=trials):
        for start, stop, _ in plan.segments:
            # a boundary never lands inside a trial
            assert start % 5 == 0 and stop % 5 == 0


@settings(max_examples=30, deadline=None)
@given(st.integers(min_value=2, max_value=200), st.integers(min_value=0, max_value=100))
def test_splits_disjoint_exhaustive_ordered(t, seed):
    rng = np.random.default_rng(seed)
    cuts = sorted(set(rng.integers(1, t, size=min(4, t - 1)).tolist()) - {0, t})
    bounds = [0] + cuts + [t]
    roles = [D.ROLES[rng.integers(0, 3)] for _ in range(len(bounds) - 1)]
    plan = D.SplitPlan([(bounds[i], bounds[i + 1], roles[i])
                        for i in range(len(bounds) - 1)])
    s = D.Session(signal=np.arange(t, dtype=np.float64)[:, None])
    parts = D.split(s, plan)
    merged = np.concatenate([parts[r].signal for r in D.ROLES if r in parts])
    np.testing.assert_array_equal(np.sort(merged, axis=0), s.signal)
