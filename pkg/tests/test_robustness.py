import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from prorehearsal.continual import prepare_tasks
from prorehearsal.data import generate_task, task_suite
from prorehearsal.metrics import r_squared
from prorehearsal.models import MultiTaskModel, default_backbone
from prorehearsal.robustness import (NOISE_LEVELS, PerturbSpec, ProbeConfig, RobustnessError,
                                     feature_std, fgsm_perturb, noise_perturb, probe_train_eval,
                                     write_curve_csv)


@pytest.fixture(scope="module")
def setup():
    specs = task_suite("enabl3s_like", seed=1, samples=500, test_samples=400)
    tds = prepare_tasks([generate_task(s) for s in specs], 10)
    model = MultiTaskModel(default_backbone("tcn"), "task_specific", seed=0)
    for td in tds:
        model.register_task(td.task)
    return model, tds


def _linear(w):
    def f(x):
        n = x.shape[0]
        return (x.reshape(n, -1) @ w.reshape(-1, 1)).reshape(n)
    return f


def test_fgsm_zero_tau_and_errors(setup):
    model, tds = setup
    td = tds[0]
    x = td.test.inputs[:20]
    out = fgsm_perturb(model, td.task, x, td.test.targets[:20], 0.0)
    assert np.array_equal(out, x) and out is not x
    with pytest.raises(RobustnessError):
        fgsm_perturb(model, td.task, x, td.test.targets[:20], -0.1)
    with pytest.raises(RobustnessError):
        PerturbSpec("pgd", 0.1)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2 ** 32 - 1), st.sampled_from([0.01, 0.05, 0.1]))
def test_fgsm_linear_model_sign(seed, tau):
    rng = np.random.default_rng(seed)
    w = rng.normal(size=(4, 3))
    w[0, 0] = 0.0  # a zero-gradient coordinate
    x = rng.normal(size=(8, 4, 3))
    y = rng.normal(size=8)
    out = fgsm_perturb(_linear(w), None, x, y, tau)
    resid = np.einsum("ntd,td->n", x, w) - y
    expected = np.sign(2 * resid)[:, None, None] * np.sign(w)[None]
    assert np.allclose(out - x, tau * expected, atol=1e-15)
    delta = np.abs(out - x)
    assert np.all(np.isclose(delta, tau) | (delta == 0))
    assert np.all(delta[:, 0, 0] == 0)


def test_fgsm_sigma_units_and_full_window(setup):
    model, tds = setup
    td = tds[1]
    x, y = td.test.inputs[:30], td.test.targets[:30]
    sigma = feature_std(td.test.inputs)
    out = fgsm_perturb(model, td.task, x, y, 0.05, sigma)
    delta = np.abs(out - x)
    scaled = delta / sigma
    assert np.all(np.isclose(scaled, 0.05) | (delta == 0))
    # the attack touches earlier steps of the window, not just the last one
    assert np.any(delta[:, 0] > 0)


def test_fgsm_increases_loss(setup):
    model, tds = setup
    td = tds[2]
    x, y = td.test.inputs, td.test.targets
    clean = np.sum((model.predict(td.task, x) - y) ** 2)
    adv = fgsm_perturb(model, td.task, x, y, 0.02, feature_std(x))
    assert np.sum((model.predict(td.task, adv) - y) ** 2) > clean


def test_noise_moments_and_reproducibility():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(2000, 5, 3)) * [1.0, 4.0, 0.2]
    sigma = feature_std(x)
    assert np.array_equal(noise_perturb(x, 0.0, rng), x)
    out = noise_perturb(x, 0.3, np.random.default_rng(1))
    noise = (out - x).reshape(-1, 3)
    assert np.allclose(noise.std(axis=0) / sigma, 0.3, rtol=0.05)
    assert np.allclose(noise.mean(axis=0), 0.0, atol=0.05 * 0.3 * sigma)
    again = noise_perturb(x, 0.3, np.random.default_rng(1))
    assert np.array_equal(out, again)
    with pytest.raises(RobustnessError):
        noise_perturb(x, -1.0, rng)


def test_noise_degrades_least_squares_fit(setup):
    _, tds = setup
    td = tds[0]
    X = td.train.inputs.reshape(len(td.train), -1)
    w, *_ = np.linalg.lstsq(np.c_[X, np.ones(len(X))], td.train.targets, rcond=None)
    xt = td.test.inputs
    sigma = feature_std(xt)
    means = []
    for L in NOISE_LEVELS:
        vals = []
        for seed in range(5):
            xn = noise_perturb(xt, L, np.random.default_rng(seed), sigma).reshape(len(xt), -1)
            vals.append(r_squared(td.test.targets, np.c_[xn, np.ones(len(xn))] @ w))
        means.append(np.mean(vals))
    assert all(a >= b for a, b in zip(means, means[1:]))


# ---------------------------------------------------------------------------
# probes
# ---------------------------------------------------------------------------

def _perceptron_separates(X, y, epochs=200):
    Xb = np.c_[X, np.ones(len(X))]
    W = np.zeros((Xb.shape[1], y.max() + 1))
    for _ in range(epochs):
        errors = 0
        for xi, yi in zip(Xb, y):
            pred = int(np.argmax(xi @ W))
            if pred != yi:
                W[:, yi] += xi
                W[:, pred] -= xi
                errors += 1
        if errors == 0:
            return True
    return False


def test_probe_separable_features():
    rng = np.random.default_rng(2)
    centers = np.array([[4.0, 0, 0], [0, 4.0, 0], [0, 0, 4.0], [-4.0, -4.0, 0]])
    labels = np.repeat(np.arange(4), 60)
    feats = centers[labels] + rng.uniform(-1, 1, size=(240, 3))
    assert _perceptron_separates(feats, labels)
    assert probe_train_eval(None, None, labels, ProbeConfig("linear"), features=feats) == 1.0


def test_probe_chance_level_on_permuted_labels(setup):
    model, tds = setup
    windows = np.concatenate([td.test.inputs for td in tds])
    labels = np.repeat(np.arange(len(tds)), [len(td.test) for td in tds])
    labels = np.random.default_rng(3).permutation(labels)
    acc = probe_train_eval(model, windows, labels, ProbeConfig("linear"), seed=0)
    n_test = int(round(0.3 * len(labels)))
    p = 1 / len(tds)
    assert abs(acc - p) <= 3 * np.sqrt(p * (1 - p) / n_test)


def test_probes_leave_backbone_untouched_and_mlp_dominates(setup):
    model, tds = setup
    windows = np.concatenate([td.test.inputs for td in tds])
    labels = np.repeat(np.arange(len(tds)), [len(td.test) for td in tds])
    before = {k: v.copy() for k, v in model.backbone.items()}
    accs = {kind: probe_train_eval(model, windows, labels, ProbeConfig(kind), seed=1)
            for kind in ("linear", "mlp")}
    for k, v in before.items():
        assert np.array_equal(model.backbone[k], v)
    assert accs["mlp"] >= accs["linear"] - 0.02
    assert accs["linear"] > 1 / len(tds)


def test_probe_single_class_and_bad_kind():
    with pytest.raises(RobustnessError):
        probe_train_eval(None, None, np.zeros(10, dtype=int), features=np.zeros((10, 2)))
    with pytest.raises(RobustnessError):
        ProbeConfig("forest")


def test_curve_csv(tmp_path):
    rows = [{"perturbation": "fgsm", "magnitude": 0.1, "strategy": "er", "seed": 0, "mean_r2": 0.5}]
    write_curve_csv(rows, tmp_path / "c.csv")
    text = (tmp_path / "c.csv").read_text().splitlines()
    assert text == ["perturbation,magnitude,strategy,seed,mean_r2", "fgsm,0.1,er,0,0.5"]
