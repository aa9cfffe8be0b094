"""Dataset synthesis, label-noise injection, splitting, CSV round-trips."""

import numpy as np
import pytest
from scipy import stats

from prestopping import data, nn, rng


def make_ds(n=40, d=3, k=4, seed=0):
    return data.synth_gaussian(k, n // k, d, spread=0.5, seed=seed)


# ----- synthesis -----

def test_synth_shapes_and_counts():
    ds = data.synth_gaussian(4, 25, 16, spread=0.3, seed=7)
    assert ds.features.shape == (100, 16)
    assert ds.is_noise_free
    assert np.array_equal(np.bincount(ds.true_labels), [25, 25, 25, 25])
    again = data.synth_gaussian(4, 25, 16, spread=0.3, seed=7)
    assert np.array_equal(ds.features, again.features)


def test_synth_spread_zero_is_linearly_separable():
    # two point clusters: every sample sits exactly on its unit-norm center,
    # and a bias-free softmax regression drives training error to 0
    ds = data.synth_gaussian(2, 30, 8, spread=0.0, seed=3)
    for c in range(2):
        block = ds.features[ds.true_labels == c]
        assert np.all(block == block[0])
        assert np.linalg.norm(block[0]) == pytest.approx(1.0, abs=1e-12)
    state = nn.init_state(nn.NetworkSpec((8, 2)), rng.stream(0, "init"))
    cfg = nn.OptimizerConfig(base_lr=0.5, momentum=0.0, total_epochs=100)
    batch = nn.Batch(np.arange(ds.n), ds.features, ds.true_labels)
    for _ in range(50):
        _, grads, _ = nn.loss_and_grad(batch, state)
        nn.sgd_step(state, grads, cfg, epoch=1)
    assert nn.evaluate_error(ds.features, ds.true_labels, state) == 0.0


def test_synth_rejects_bad_params():
    with pytest.raises(ValueError):
        data.synth_gaussian(1, 10, 4, 0.1, 0)
    with pytest.raises(ValueError):
        data.synth_gaussian(3, 10, 4, -0.1, 0)


# ----- transition matrices -----

def test_symmetric_matrix_entries():
    # k=4, tau=0.4: diagonal 0.6, every off-diagonal 0.4/3
    m = data.build_symmetric_matrix(4, 0.4).entries
    assert np.allclose(np.diag(m), 0.6, atol=1e-15)
    off = m[~np.eye(4, dtype=bool)]
    assert np.allclose(off, 0.4 / 3, atol=1e-15)
    assert np.allclose(m.sum(axis=1), 1.0, atol=1e-12)


def test_pair_matrix_entries():
    m = data.build_pair_matrix(4, 0.4).entries
    for i in range(4):
        assert m[i, i] == pytest.approx(0.6)
        assert m[i, (i + 1) % 4] == pytest.approx(0.4)
    assert m.sum() == pytest.approx(4.0)
    # wraparound row: last class flips to class 0
    assert m[3, 0] == pytest.approx(0.4)


def test_matrix_validation():
    with pytest.raises(ValueError):
        data.TransitionMatrix(np.array([[0.5, 0.4], [0.0, 1.0]]))
    with pytest.raises(ValueError):
        data.TransitionMatrix(np.array([[1.5, -0.5], [0.0, 1.0]]))
    with pytest.raises(ValueError):
        data.build_symmetric_matrix(4, 1.0)


# ----- injection -----

def test_identity_matrix_keeps_labels():
    ds = make_ds()
    out = data.inject_noise(ds, data.TransitionMatrix(np.eye(4)), seed=5)
    assert np.array_equal(out.noisy_labels, ds.true_labels)


def test_inject_refuses_double_noise():
    ds = make_ds()
    noisy = data.inject_noise(ds, data.build_symmetric_matrix(4, 0.4), seed=5)
    assert not noisy.is_noise_free
    with pytest.raises(ValueError):
        data.inject_noise(noisy, data.build_symmetric_matrix(4, 0.4), seed=6)


def test_inject_rejects_class_mismatch():
    ds = make_ds(k=4)
    with pytest.raises(ValueError):
        data.inject_noise(ds, data.build_symmetric_matrix(3, 0.4), seed=5)


def test_symmetric_noise_fidelity():
    # N=10,000, tau=0.4: flip fraction within 3 binomial sigmas; flipped
    # destinations uniform over the other classes (chi-squared p > 0.001)
    k, tau, n = 10, 0.4, 10000
    ds = data.synth_gaussian(k, n // k, 4, spread=0.5, seed=11)
    out = data.inject_noise(ds, data.build_symmetric_matrix(k, tau), seed=13,
                            kind="symmetric", tau=tau)
    flipped = out.noisy_labels != out.true_labels
    assert abs(flipped.mean() - tau) < 0.015
    dest = (out.noisy_labels[flipped] - out.true_labels[flipped]) % k
    counts = np.bincount(dest, minlength=k)[1:]  # offsets 1..k-1
    _, p = stats.chisquare(counts)
    assert p > 0.001


def test_pair_noise_fidelity():
    # every flip lands exactly on (true + 1) mod k, flip fraction near tau
    k, tau, n = 10, 0.4, 10000
    ds = data.synth_gaussian(k, n // k, 4, spread=0.5, seed=17)
    out = data.inject_noise(ds, data.build_pair_matrix(k, tau), seed=19,
                            kind="pair", tau=tau)
    flipped = out.noisy_labels != out.true_labels
    assert abs(flipped.mean() - tau) < 0.015
    assert np.array_equal(out.noisy_labels[flipped],
                          (out.true_labels[flipped] + 1) % k)
    assert out.provenance["noise"] == "pair"
    assert out.provenance["tau"] == tau


def test_confusion_matrix_converges_to_transition():
    # chi-squared goodness of fit per true class against the matrix row
    k, tau, n = 4, 0.3, 10000
    ds = data.synth_gaussian(k, n // k, 4, spread=0.5, seed=23)
    matrix = data.build_symmetric_matrix(k, tau)
    out = data.inject_noise(ds, matrix, seed=29)
    for c in range(k):
        rows = out.noisy_labels[out.true_labels == c]
        counts = np.bincount(rows, minlength=k)
        _, p = stats.chisquare(counts, matrix.entries[c] * len(rows))
        assert p > 0.001


def test_noise_deterministic_per_seed():
    ds = make_ds(n=400)
    m = data.build_pair_matrix(4, 0.4)
    a = data.inject_noise(ds, m, seed=31)
    b = data.inject_noise(ds, m, seed=31)
    c = data.inject_noise(ds, m, seed=32)
    assert np.array_equal(a.noisy_labels, b.noisy_labels)
    assert not np.array_equal(a.noisy_labels, c.noisy_labels)


# ----- views and splits -----

def test_train_view_cannot_expose_true_labels():
    ds = data.inject_noise(make_ds(), data.build_pair_matrix(4, 0.4), seed=5)
    view = ds.train_view()
    assert not hasattr(view, "true_labels")
    assert not hasattr(view, "noisy_labels")
    assert np.array_equal(view.labels, ds.noisy_labels)


def test_split_partitions_are_disjoint_and_clean():
    ds = make_ds(n=200)
    train, val, test = data.split(ds, data.SplitSpec(30, 50, seed=3))
    assert train.n == 120 and val.n == 30 and test.n == 50
    # all rows accounted for exactly once: match feature rows back to source
    stacked = np.vstack([train.features, val.features, test.features])
    assert np.array_equal(np.sort(stacked, axis=0), np.sort(ds.features, axis=0))
    # views are clean by protocol (split precedes injection)
    assert train.is_noise_free
    noisy_train = data.inject_noise(train, data.build_pair_matrix(4, 0.4), seed=7)
    assert not noisy_train.is_noise_free
    assert np.array_equal(noisy_train.true_labels, train.true_labels)


def test_split_zero_validation_gives_none():
    ds = make_ds(n=200)
    train, val, test = data.split(ds, data.SplitSpec(0, 50, seed=3))
    assert val is None and train.n == 150 and test.n == 50


def test_split_rejects_oversized_partitions():
    ds = make_ds(n=40)
    with pytest.raises(ValueError):
        data.split(ds, data.SplitSpec(30, 10, seed=0))


def test_split_deterministic():
    ds = make_ds(n=200)
    a = data.split(ds, data.SplitSpec(20, 20, seed=9))[0]
    b = data.split(ds, data.SplitSpec(20, 20, seed=9))[0]
    assert np.array_equal(a.features, b.features)


# ----- CSV -----

def test_csv_round_trip_identity(tmp_path):
    ds = data.inject_noise(make_ds(n=60), data.build_symmetric_matrix(4, 0.4), seed=41)
    path = tmp_path / "ds.csv"
    data.write_csv(ds, path)
    back = data.load_csv(path, n_classes=4)
    assert np.array_equal(back.features, ds.features)
    assert np.array_equal(back.noisy_labels, ds.noisy_labels)
    assert np.array_equal(back.true_labels, ds.true_labels)


def test_csv_single_label_column(tmp_path):
    path = tmp_path / "one.csv"
    path.write_text("0.5,1.5,2\n-1.0,0.25,0\n")
    ds = data.load_csv(path, n_classes=3)
    assert ds.features.shape == (2, 2)
    assert np.array_equal(ds.noisy_labels, [2, 0])
    assert ds.is_noise_free  # single column counts as both labels


def test_csv_errors_name_lines(tmp_path):
    ragged = tmp_path / "ragged.csv"
    ragged.write_text("0.5,1.5,2\n0.1,3\n")
    with pytest.raises(ValueError, match="line 2"):
        data.load_csv(ragged)

    badfloat = tmp_path / "badfloat.csv"
    badfloat.write_text("0.5,1.5,2\nabc,1.5,0\n")
    with pytest.raises(ValueError, match="line 2"):
        data.load_csv(badfloat)

    badlabel = tmp_path / "badlabel.csv"
    badlabel.write_text("0.5,1.5,2\n0.5,1.5,7\n")
    with pytest.raises(ValueError, match="line 2.*7"):
        data.load_csv(badlabel, n_classes=4)
