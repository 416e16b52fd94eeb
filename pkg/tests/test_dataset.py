import numpy as np
import pytest
from hypothesis import given, strategies as st

from deepkoopman import dataset as ds
from deepkoopman import plant

STATS = ds.NormalizationStats(np.array([0.0, -2.0, -1.0]), np.array([30.0, 2.0, 1.0]),
                              np.array([-450.0, -9.1]), np.array([450.0, 0.2]))


def test_normalize_endpoints_and_midpoint():
    np.testing.assert_allclose(STATS.normalize_x(STATS.x_min), 0.0)
    np.testing.assert_allclose(STATS.normalize_x(STATS.x_max), 1.0)
    np.testing.assert_allclose(STATS.normalize_x((STATS.x_min + STATS.x_max) / 2), 0.5)
    np.testing.assert_allclose(ds.normalize(5.0, 0.0, 10.0), 0.5)
    np.testing.assert_allclose(ds.denormalize(0.5, 0.0, 10.0), 5.0)


@given(st.lists(st.floats(-1e6, 1e6), min_size=3, max_size=3))
def test_normalize_round_trip(x):
    x = np.array(x)
    back = STATS.denormalize_x(STATS.normalize_x(x))
    np.testing.assert_allclose(back, x, rtol=1e-12, atol=1e-12 * 30)


def test_stats_validation():
    with pytest.raises(ValueError):
        ds.NormalizationStats(np.zeros(3), np.zeros(3), np.zeros(2), np.ones(2))


def test_stats_json_round_trip(tmp_path):
    STATS.to_json(tmp_path / "s.json")
    back = ds.NormalizationStats.from_json(tmp_path / "s.json")
    for k in ("x_min", "x_max", "u_min", "u_max"):
        np.testing.assert_array_equal(getattr(back, k), getattr(STATS, k))


def test_constant_channel_is_widened():
    ep = plant.Episode(0.01, np.zeros((3, 3)), np.zeros((3, 2)))
    s = ds.NormalizationStats.from_episodes([ep])
    assert np.all(s.x_range > 0) and np.all(s.u_range > 0)


@pytest.mark.parametrize("n,sizes", [(40, (36, 2, 2)), (20, (18, 1, 1)), (5, (3, 1, 1))])
def test_split_sizes(n, sizes):
    tr, va, te = ds.split_episodes(list(range(n)), 0)
    assert (len(tr), len(va), len(te)) == sizes


def test_split_deterministic_disjoint_exhaustive():
    items = list(range(40))
    a = ds.split_episodes(items, 3)
    assert a == ds.split_episodes(items, 3)
    flat = a[0] + a[1] + a[2]
    assert sorted(flat) == items


def test_split_too_few():
    with pytest.raises(ValueError):
        ds.split_episodes([1, 2, 3, 4], 0)


def test_degenerate_windows():
    s = np.arange(3.0)[:, None]
    u = 10 * np.arange(3.0)[:, None]
    w = ds.window_sequences(s, u, p=1, tau=1, offset=0)
    np.testing.assert_array_equal(w.x0[:, 0], [0, 1])
    np.testing.assert_array_equal(w.u_seq[:, 0, 0], [0, 10])
    np.testing.assert_array_equal(w.x_seq[:, 0, 0], [1, 2])


def test_delay_concatenation():
    s = np.arange(30.0).reshape(10, 3)
    u = np.zeros((10, 2))
    w = ds.window_sequences(s, u, p=2, tau=2, offset=0)
    np.testing.assert_array_equal(w.x0[0], np.concatenate([s[0], s[1]]))
    assert w.x0.shape[1] == 6


def naive_windows(states, controls, p, tau, offset):
    out = []
    k = offset + tau - 1  # time of the most recent sample in the start state
    while k + p < len(states):
        x0 = np.concatenate([states[k - tau + 1 + j] for j in range(tau)])
        us = [controls[k + i] for i in range(p)]
        xs = [np.concatenate([states[k + i + 1 - tau + 1 + j] for j in range(tau)]) for i in range(p)]
        out.append((x0, np.array(us), np.array(xs)))
        k += p
    return out


@given(st.integers(1, 6), st.integers(1, 3), st.integers(0, 6), st.integers(12, 40))
def test_windows_match_naive_slicing(p, tau, offset, length):
    offset = min(offset, p)
    r = np.random.default_rng(length)
    s, u = r.normal(size=(length, 3)), r.normal(size=(length, 2))
    w = ds.window_sequences(s, u, p, tau, offset=offset)
    ref = naive_windows(s, u, p, tau, offset)
    if w is None:
        assert not ref
        return
    assert len(w) == len(ref)
    for i, (x0, us, xs) in enumerate(ref):
        np.testing.assert_array_equal(w.x0[i], x0)
        np.testing.assert_array_equal(w.u_seq[i], us)
        np.testing.assert_array_equal(w.x_seq[i], xs)


def test_offsets_depend_on_seed():
    s, u = np.zeros((500, 3)), np.zeros((500, 2))
    firsts = set()
    for seed in range(10):
        w = ds.window_sequences(np.arange(500.0)[:, None] * np.ones(3), u, 41, 2, rng=np.random.default_rng(seed))
        firsts.add(float(w.x0[0, 0]))
    assert len(firsts) > 1


def test_short_episode_skipped_with_warning(caplog):
    assert ds.window_sequences(np.zeros((5, 3)), np.zeros((5, 2)), 41, 2, offset=0) is None
    assert "too short" in caplog.text


def test_csv_round_trip_bit_identical(tmp_path):
    ep = plant.generate_episode(plant.ExcitationPolicy(), 50, 1, plant.VehicleParams())
    ds.write_csv(ep, tmp_path / "e.csv")
    back = ds.read_csv(tmp_path / "e.csv")
    np.testing.assert_array_equal(back.states, ep.states)
    np.testing.assert_array_equal(back.controls, ep.controls)
    assert back.dt == pytest.approx(ep.dt, rel=1e-12)


def test_csv_empty_file(tmp_path):
    (tmp_path / "e.csv").write_text("")
    with pytest.raises(ds.EpisodeFormatError, match="empty"):
        ds.read_csv(tmp_path / "e.csv")


def test_csv_header_only(tmp_path):
    (tmp_path / "e.csv").write_text(",".join(ds.CSV_COLUMNS) + "\n")
    with pytest.raises(ds.EpisodeFormatError, match="empty episode"):
        ds.read_csv(tmp_path / "e.csv")


def test_csv_malformed_row_reports_line(tmp_path):
    (tmp_path / "e.csv").write_text(",".join(ds.CSV_COLUMNS) + "\n0,1,2,3,4,5\n0.01,1,x,3,4,5\n")
    with pytest.raises(ds.EpisodeFormatError, match=":3:"):
        ds.read_csv(tmp_path / "e.csv")
