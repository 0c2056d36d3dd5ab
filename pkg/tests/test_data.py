import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from prorehearsal.data import (CsvSchemaError, DataError, ShiftSpec, TaskSeries, TaskSpec,
                               apply_shift, generate_task, load_csv, make_windows, task_suite,
                               write_csv)
from prorehearsal.metrics import js_distance


def _spec(**kw):
    base = dict(task_id="t", samples=1200, test_samples=300, seed=3)
    base.update(kw)
    return TaskSpec(**base)


def _fit_r2(A, B):
    coef, *_ = np.linalg.lstsq(A, B, rcond=None)
    res = B - A @ coef
    return 1 - (res ** 2).sum() / ((B - B.mean(0)) ** 2).sum()


def test_noiseless_2d_states_lie_on_one_ellipse():
    s = generate_task(_spec(dim=2, noise=0.0))
    # x = M [sin, cos]  =>  ||M^-1 x|| == 1
    z = np.linalg.solve(s.mixing, s.X.T).T
    assert np.allclose(np.linalg.norm(z, axis=1), 1.0)


def test_generation_is_deterministic():
    a, b = generate_task(_spec()), generate_task(_spec())
    assert np.array_equal(a.X, b.X) and np.array_equal(a.y, b.y)
    assert np.array_equal(a.test.X, b.test.X)


def test_next_state_is_linearly_realizable_without_noise():
    s = generate_task(_spec(noise=0.0))
    same = s.trial_ids[1:] == s.trial_ids[:-1]
    A = np.c_[s.X[:-1][same], s.y[:-1][same], np.ones(same.sum())]
    assert _fit_r2(A, s.X[1:][same]) > 0.999


def test_spec_validation():
    for bad in (dict(speed=0.0), dict(dim=1), dict(samples=20)):
        with pytest.raises(DataError):
            generate_task(_spec(**bad))


def test_splits_are_disjoint_and_exhaustive():
    s = generate_task(_spec())
    assert s.n_train == int(0.8 * 1200) < len(s)
    assert len(s.train) + len(s.validation) == len(s)
    assert s.test is not None and not np.array_equal(s.test.X[:10], s.X[:10])


def test_suites():
    assert len(task_suite("embry_like")) == 9
    assert len(task_suite("enabl3s_like")) == 5
    with pytest.raises(DataError):
        task_suite("nope")


def test_zero_shift_is_identity():
    s = generate_task(_spec()).test
    for kind in ("phase_offset", "amplitude_scale", "additive_bias"):
        out = apply_shift(s, ShiftSpec(kind, 0.0))
        assert np.array_equal(out.X, s.X) and np.array_equal(out.y, s.y)


def test_additive_bias_moves_means_by_mixed_offset():
    s = generate_task(_spec()).test
    out = apply_shift(s, ShiftSpec("additive_bias", 0.4))
    assert np.allclose(out.X.mean(0) - s.X.mean(0), s.mixing @ np.full(s.dim, 0.4))


def test_amplitude_scale_scales_targets():
    s = generate_task(_spec()).test
    out = apply_shift(s, ShiftSpec("amplitude_scale", 0.5))
    assert np.allclose(out.y, 1.5 * s.y) and np.allclose(out.X, 1.5 * s.X)


@pytest.mark.parametrize("kind", ["additive_bias", "amplitude_scale"])
def test_js_distance_grows_with_shift(kind):
    s = generate_task(_spec(test_samples=2000)).test
    js = [js_distance(s.X, apply_shift(s, ShiftSpec(kind, m)).X) for m in (0, 0.1, 0.2, 0.4, 0.8)]
    assert all(b >= a for a, b in zip(js, js[1:])), js


def test_shift_spec_validation():
    with pytest.raises(DataError):
        ShiftSpec("rotate", 1.0)
    with pytest.raises(DataError):
        ShiftSpec("additive_bias", float("inf"))


def test_window_counts_and_alignment():
    X = np.arange(10.0).reshape(5, 2)
    s = TaskSeries("t", X, np.arange(5.0), np.zeros(5), n_train=5)
    assert len(make_windows(s, 5)) == 1
    w = make_windows(s, 2)
    assert len(w) == 4
    for win in w:
        assert np.array_equal(win.inputs[-1], X[win.step])
        assert win.target == s.y[win.step]


@settings(max_examples=40, deadline=None)
@given(lengths=st.lists(st.integers(1, 12), min_size=1, max_size=5), T=st.integers(1, 6))
def test_window_count_formula_and_no_straddling(lengths, T):
    tid = np.concatenate([np.full(n, i) for i, n in enumerate(lengths)])
    n = len(tid)
    s = TaskSeries("t", np.arange(2.0 * n).reshape(n, 2), np.zeros(n), tid, n_train=n)
    if all(L < T for L in lengths):
        with pytest.warns(RuntimeWarning):
            w = make_windows(s, T)
    else:
        w = make_windows(s, T)
    assert len(w) == sum(max(0, L - T + 1) for L in lengths)
    for k in w.steps:
        assert len(set(tid[k - T + 1:k + 1])) == 1


def test_window_length_must_be_positive():
    s = TaskSeries("t", np.zeros((3, 2)), np.zeros(3), np.zeros(3), n_train=3)
    with pytest.raises(DataError):
        make_windows(s, 0)


def test_csv_round_trip(tmp_path):
    s = generate_task(_spec(samples=300, test_samples=100))
    write_csv(s, tmp_path / "t.csv")
    back = load_csv(tmp_path / "t.csv")
    assert np.array_equal(back.X, s.X) and np.array_equal(back.y, s.y)
    assert np.array_equal(back.trial_ids != np.roll(back.trial_ids, 1),
                          s.trial_ids != np.roll(s.trial_ids, 1))


def test_csv_small_and_boundaries(tmp_path):
    p = tmp_path / "a.csv"
    p.write_text("feature_0,feature_1,target,trial_id\n1,2,3,a\n4,5,6,a\n7,8,9,a\n")
    assert len(load_csv(p)) == 3
    rows = ["feature_0,target,trial_id"] + [f"{i},{i},{0 if i < 50 else 1}" for i in range(100)]
    p.write_text("\n".join(rows) + "\n")
    w = make_windows(load_csv(p), 3)
    assert not any(k in (50, 51) for k in w.steps)


def test_csv_errors_name_problem_and_line(tmp_path):
    p = tmp_path / "b.csv"
    p.write_text("feature_0,trial_id\n1,a\n")
    with pytest.raises(CsvSchemaError, match="target"):
        load_csv(p)
    p.write_text("feature_0,target,trial_id\n1,2,a\n1,x,a\n")
    with pytest.raises(CsvSchemaError, match="line 3"):
        load_csv(p)
    p.write_text("feature_0,target,trial_id\n1,2,a\n1,2\n")
    with pytest.raises(CsvSchemaError, match="line 3"):
        load_csv(p)


def test_csv_custom_schema(tmp_path):
    p = tmp_path / "c.csv"
    p.write_text("hip,knee,angle,trial\n1,2,3,0\n4,5,6,0\n")
    s = load_csv(p, schema={"features": ["hip", "knee"], "target": "angle", "trial_id": "trial"})
    assert s.X.tolist() == [[1, 2], [4, 5]] and s.y.tolist() == [3, 6]
