import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ustgcn.dataset import (INCLUDE_PREDICTION_WINDOW, PREVIOUS_HOUR, ScalerParams, SpeedSeries,
                            apply_scaler, assemble_sample, assemble_samples, build_split_samples,
                            fit_scaler, generate_synthetic, invert_scaler, load_speed_csv, make_splits,
                            sample_indices, write_speed_csv)
from ustgcn.graph import build_adjacency_gaussian_threshold, random_geometric_distances


def ramp_series(days, N=2, spd=288):
    t = np.arange(days * spd, dtype=float)
    return SpeedSeries(np.stack([t + 1000 * i for i in range(N)], axis=1),
                       tuple(f"s{i}" for i in range(N)), steps_per_day=spd)


# -- loading ------------------------------------------------------------------

def write_rows(path, rows, header=None):
    lines = [",".join(header)] if header else []
    lines += [",".join(str(v) for v in r) for r in rows]
    path.write_text("\n".join(lines) + "\n")


def test_load_one_day(tmp_path):
    p = tmp_path / "v.csv"
    write_rows(p, np.full((288, 3), 55.0))
    s = load_speed_csv(p)
    assert s.n_nodes == 3 and s.n_days == 1
    assert s.sensor_ids == ("0", "1", "2")


def test_load_partial_day_rejected(tmp_path):
    p = tmp_path / "v.csv"
    write_rows(p, np.full((289, 3), 55.0))
    with pytest.raises(ValueError, match="partial trailing day"):
        load_speed_csv(p)


def test_load_header_becomes_sensor_ids(tmp_path):
    p = tmp_path / "v.csv"
    write_rows(p, np.full((288, 3), 55.0), header=["s1", "s2", "s3"])
    assert load_speed_csv(p).sensor_ids == ("s1", "s2", "s3")


def test_load_reports_bad_cell_location(tmp_path):
    p = tmp_path / "v.csv"
    rows = [["1", "2"]] * 3 + [["1", "x"]]
    write_rows(p, rows)
    with pytest.raises(ValueError, match="row 4, column 2"):
        load_speed_csv(p)


def test_load_ragged_rejected(tmp_path):
    p = tmp_path / "v.csv"
    p.write_text("1,2\n3\n")
    with pytest.raises(ValueError, match="row 2"):
        load_speed_csv(p)


def test_write_load_round_trip(tmp_path):
    s = SpeedSeries(np.random.default_rng(0).uniform(0, 70, (288, 4)), ("a", "b", "c", "d"))
    write_speed_csv(s, tmp_path / "v.csv")
    back = load_speed_csv(tmp_path / "v.csv")
    np.testing.assert_array_equal(back.values, s.values)
    assert back.sensor_ids == s.sensor_ids


# -- samples ------------------------------------------------------------------

def test_p_zero_single_current_column():
    s = ramp_series(1)
    smp = assemble_sample(s, anchor=50, T=12, n=3, P=0)
    assert smp.x.shape == (24, 1)
    cur = s.values[39:51]
    np.testing.assert_array_equal(smp.x[:, 0], cur.reshape(-1))


def test_periodic_series_history_equals_targets():
    rng = np.random.default_rng(0)
    day = rng.uniform(20, 70, size=(288, 3))
    s = SpeedSeries(np.tile(day, (10, 1)), ("a", "b", "c"))
    anchors = np.arange(7 * 288 + 5, 10 * 288 - 13, 97)
    ss = assemble_samples(s, anchors, T=12, n=12, P=7, mode=INCLUDE_PREDICTION_WINDOW)
    assert len(ss) == len(anchors)
    hist = ss.historical  # (S, T, N, P); with n == T window position w aligns with horizon w
    for k in range(len(ss)):
        for p in range(7):
            np.testing.assert_array_equal(hist[k, :, :, p], ss.y[k].T)


def test_include_mode_index_arithmetic():
    cur, hist, tgt = sample_indices(5000, 12, 12, 7, INCLUDE_PREDICTION_WINDOW, 288)
    for p_col in range(7):
        days_back = 7 - p_col
        np.testing.assert_array_equal(hist[:, p_col], tgt - days_back * 288)
    np.testing.assert_array_equal(cur, np.arange(4989, 5001))


def test_previous_hour_mode_shift():
    _, inc, _ = sample_indices(5000, 12, 12, 7, INCLUDE_PREDICTION_WINDOW, 288)
    _, prev, _ = sample_indices(5000, 12, 12, 7, PREVIOUS_HOUR, 288)
    np.testing.assert_array_equal(inc, prev + 12)


def test_column_order_oldest_first_current_last():
    s = ramp_series(9)
    smp = assemble_sample(s, anchor=8 * 288 + 100, T=12, n=12, P=7)
    row = smp.x[0]  # node 0, first window position
    assert np.all(np.diff(row) > 0)  # ramp: older days are smaller
    assert row[-1] == s.values[8 * 288 + 100 - 11, 0]


def test_insufficient_history_is_skipped():
    s = ramp_series(3)
    ss = assemble_samples(s, [10, 2 * 288 + 50], T=12, n=12, P=7)
    assert len(ss) == 0 and ss.skipped == 2
    with pytest.raises(ValueError):
        assemble_sample(s, 10, P=7)


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 12), st.integers(1, 12), st.integers(0, 3), st.sampled_from([INCLUDE_PREDICTION_WINDOW, PREVIOUS_HOUR]),
       st.integers(0, 10_000))
def test_sample_readback(T, n, P, mode, seed):
    spd = 24
    rng = np.random.default_rng(seed)
    s = SpeedSeries(rng.uniform(0, 80, size=(6 * spd, 3)), ("a", "b", "c"), steps_per_day=spd)
    anchors = rng.integers(0, s.n_steps, size=20)
    ss = assemble_samples(s, anchors, T, n, P, mode)
    for k in range(len(ss)):
        cur, hist, tgt = sample_indices(int(ss.anchors[k]), T, n, P, mode, spd)
        x = ss.x[k].reshape(T, 3, P + 1)
        for w in range(T):
            np.testing.assert_array_equal(x[w, :, P], s.values[cur[w]])
            for p in range(P):
                np.testing.assert_array_equal(x[w, :, p], s.values[hist[w, p]])
        for h in range(n):
            np.testing.assert_array_equal(ss.y[k][:, h], s.values[tgt[h]])


# -- splits -------------------------------------------------------------------

def test_default_split_ten_days():
    sp = make_splits(ramp_series(10))
    assert (sp.train_end // 288, (sp.val_end - sp.train_end) // 288, (sp.total - sp.val_end) // 288) == (7, 2, 1)


def test_explicit_boundary():
    sp = make_splits(ramp_series(10), train_end=5 * 288, val_end=8 * 288)
    assert sp.train_end == 5 * 288 and sp.val_end == 8 * 288


def test_split_rejects_inverted_boundaries():
    with pytest.raises(ValueError):
        make_splits(ramp_series(10), train_end=5 * 288, val_end=4 * 288)


def test_split_rejects_mid_day_boundary():
    with pytest.raises(ValueError, match="day boundary"):
        make_splits(ramp_series(10), train_end=5 * 288 + 3, val_end=8 * 288)


def test_no_split_leakage():
    s = ramp_series(12)
    sp = make_splits(s)
    sets = build_split_samples(s, sp, 12, 12, 7, INCLUDE_PREDICTION_WINDOW)
    for name, ss in sets.items():
        lo, hi = sp.bounds(name)
        for a in ss.anchors:
            cur, hist, tgt = sample_indices(int(a), 12, 12, 7, INCLUDE_PREDICTION_WINDOW, 288)
            assert lo <= cur.min() and tgt.max() < hi
            assert hist.min() >= 0
            if name == "test":
                assert tgt.min() >= sp.val_end
    assert len(sets["train"]) and len(sets["val"]) and len(sets["test"])


# -- scaling ------------------------------------------------------------------

def test_scaler_constant_series():
    s = SpeedSeries(np.full((288 * 2, 2), 42.0), ("a", "b"))
    sc = fit_scaler(s, make_splits(s, train_end=288, val_end=576))
    assert sc.std == 1.0
    np.testing.assert_array_equal(apply_scaler(np.array([42.0, 43.0]), sc), [0.0, 1.0])


def test_scaler_arithmetic():
    assert apply_scaler(70.0, ScalerParams(60.0, 10.0)) == 1.0


def test_scaler_uses_training_rows_only():
    v = np.concatenate([np.full((288, 1), 10.0), np.full((288, 1), 1000.0)])
    s = SpeedSeries(v, ("a",))
    sc = fit_scaler(s, make_splits(s, train_end=288, val_end=576))
    assert sc.mean == 10.0


def test_scaler_round_trip():
    x = np.random.default_rng(1).uniform(-100, 100, 500)
    sc = ScalerParams(57.3, 9.1)
    np.testing.assert_allclose(invert_scaler(apply_scaler(x, sc), sc), x, atol=1e-12, rtol=0)


# -- synthetic ----------------------------------------------------------------

def small_graph(n=8, seed=0):
    return build_adjacency_gaussian_threshold(random_geometric_distances(n, seed), n)


def test_synthetic_noiseless_converges_and_persistence_vanishes():
    g = small_graph()
    s = generate_synthetic(g, 3, seed=0, noise_std=0.0, amplitude=0.0, regional_std=0.0)
    tail = s.values[-288:]
    assert np.max(np.abs(np.diff(tail, axis=0))) < 1e-9
    np.testing.assert_allclose(tail, 60.0, atol=1e-6)


def test_synthetic_deterministic():
    g = small_graph()
    a = generate_synthetic(g, 2, seed=7)
    b = generate_synthetic(g, 2, seed=7)
    assert a.values.tobytes() == b.values.tobytes()
    assert generate_synthetic(g, 2, seed=8).values.tobytes() != a.values.tobytes()


def test_synthetic_level():
    s = generate_synthetic(small_graph(), 10, seed=3)
    assert abs(s.values.mean() - 60.0) < 3.0
    assert s.values.min() >= 0


def test_synthetic_neighbors_more_correlated():
    g = small_graph(10, seed=2)
    s = generate_synthetic(g, 10, seed=2)
    v = s.values
    profile = v.reshape(10, 288, -1).mean(axis=0)
    resid = v - np.tile(profile, (10, 1))
    A = g.adjacency.to_dense()
    adj, non = [], []
    for i in range(g.n_nodes):
        for j in range(g.n_nodes):
            if i == j:
                continue
            c = np.corrcoef(resid[:-1, i], resid[1:, j])[0, 1]
            (adj if A[i, j] > 0 else non).append(c)
    assert adj and non
    assert np.median(adj) > np.median(non)
