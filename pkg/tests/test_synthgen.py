import numpy as np
import pytest

import oracles
from monosae import synthgen
from monosae.errors import InvalidShape


def test_bijective_when_t_equals_k():
    gt = synthgen.gen_ground_truth(8, 5, 5, 2, 0)
    assert sorted(gt.feature_labels.tolist()) == [0, 1, 2, 3, 4]


def test_unit_columns_and_determinism():
    a = synthgen.gen_ground_truth(16, 40, 4, 3, 9)
    b = synthgen.gen_ground_truth(16, 40, 4, 3, 9)
    assert np.abs(np.linalg.norm(a.dictionary, axis=0) - 1).max() < 1e-12
    assert a.dictionary.tobytes() == b.dictionary.tobytes()
    assert np.bincount(a.feature_labels).min() >= 1


@pytest.mark.parametrize("args", [(1, 10, 2, 1), (8, 3, 4, 1), (8, 10, 0, 1), (8, 10, 2, 0), (8, 10, 2, 11)])
def test_invalid_shapes(args):
    with pytest.raises(InvalidShape):
        synthgen.gen_ground_truth(*args, seed=0)


def test_noise_free_single_feature():
    gt = synthgen.gen_ground_truth(8, 20, 4, 1, 1)
    x, y, codes = synthgen.gen_samples(gt, 400, 0.0, 2)
    rows = np.flatnonzero((codes > 0).sum(axis=1) == 1)
    assert rows.size > 0
    r = rows[0]
    f = int(np.flatnonzero(codes[r])[0])
    assert np.abs(x[r] - codes[r, f] * gt.dictionary[:, f]).max() < 1e-12
    assert np.abs(x - codes @ gt.dictionary.T).max() < 1e-12


def test_labels_consistent_with_codes():
    gt = synthgen.gen_ground_truth(8, 30, 6, 3, 4)
    _, y, codes = synthgen.gen_samples(gt, 300, 0.05, 5)
    for i in range(300):
        for j in range(6):
            expect = any(codes[i, f] > 0 for f in range(30) if gt.feature_labels[f] == j)
            assert y.values[i, j] == float(expect)
    active = codes[codes > 0]
    assert active.min() >= 0.5 and active.max() <= 1.5


def test_mean_active_features():
    gt = synthgen.gen_ground_truth(64, 100, 8, 3, 0)
    _, _, codes = synthgen.gen_samples(gt, 5000, 0.01, 1)
    assert abs((codes > 0).sum(axis=1).mean() - 3) <= 0.15


def test_samples_deterministic():
    gt = synthgen.gen_ground_truth(8, 12, 3, 2, 0)
    a = synthgen.gen_samples(gt, 50, 0.1, 3)
    b = synthgen.gen_samples(gt, 50, 0.1, 3)
    assert a[0].tobytes() == b[0].tobytes() and a[2].tobytes() == b[2].tobytes()


def test_recovery_identity_and_orthogonal():
    gt = synthgen.gen_ground_truth(20, 6, 3, 2, 0)
    assert synthgen.recovery_score(gt.dictionary, gt)[0] == pytest.approx(1.0, abs=1e-12)
    # orthogonal complement of the dictionary's span
    q, _ = np.linalg.qr(np.column_stack([gt.dictionary, np.random.default_rng(0).standard_normal((20, 14))]))
    complement = q[:, 6:]
    assert abs(synthgen.recovery_score(complement, gt)[0]) < 1e-12


def test_recovery_sign_and_permutation_invariant():
    gt = synthgen.gen_ground_truth(16, 10, 2, 2, 3)
    w = synthgen.random_unit_columns(16, 40, 1)
    base = synthgen.recovery_score(w, gt)[0]
    perm = np.random.default_rng(0).permutation(40)
    signs = np.where(np.random.default_rng(1).random(40) < 0.5, -1.0, 1.0)
    assert abs(synthgen.recovery_score(w[:, perm] * signs, gt)[0] - base) < 1e-12


def test_recovery_alive_mask():
    gt = synthgen.gen_ground_truth(16, 4, 2, 2, 3)
    w = np.column_stack([gt.dictionary, synthgen.random_unit_columns(16, 4, 0)])
    alive = np.array([False] * 4 + [True] * 4)
    assert synthgen.recovery_score(w, gt, alive)[0] < 0.99


def test_random_baseline_matches_enumeration():
    gt = synthgen.gen_ground_truth(64, 100, 8, 3, 0)
    w = synthgen.random_unit_columns(64, 1024, 7)
    score, per_feature = synthgen.recovery_score(w, gt)
    assert abs(score - oracles.recovery(gt.dictionary.tolist(), w.tolist())) < 1e-12
    assert per_feature.shape == (100,)
    assert 0.3 < score < 0.55


def test_ground_truth_json_roundtrip(tmp_path):
    gt = synthgen.gen_ground_truth(8, 12, 3, 2, 0)
    gt.save(tmp_path / "gt.json")
    back = synthgen.GroundTruth.load(tmp_path / "gt.json")
    assert back.dictionary.tobytes() == gt.dictionary.tobytes()
    assert back.feature_labels.tolist() == gt.feature_labels.tolist()


def test_render_image_is_pgm():
    img = synthgen.render_image(np.linspace(-1, 1, 64))
    assert img.startswith(b"P5\n8 8\n255\n") and len(img) == len(b"P5\n8 8\n255\n") + 64
