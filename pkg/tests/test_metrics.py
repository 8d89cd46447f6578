import csv
import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.spatial.transform import Rotation

from posebert.errors import DegenerateConfiguration, ShapeMismatch, TooShort
from posebert.metrics import (accel_error, accelerations, evaluate, gain_histogram, mpjpe, pa_mpjpe,
                              per_frame_mpjpe, per_frame_pa_mpjpe, procrustes_align, similarity_transform)


def scipy_pa(pred, gt):
    """Reference alignment: optimal rotation from scipy, then closed-form scale and shift."""
    pc, gc = pred - pred.mean(0), gt - gt.mean(0)
    rot, _ = Rotation.align_vectors(gc, pc)
    r = rot.apply(pc)
    s = (r * gc).sum() / (r * r).sum()
    return np.linalg.norm(s * r + gt.mean(0) - gt, axis=-1).mean()


def test_mpjpe_is_root_centred(rng):
    gt = rng.normal(size=(5, 24, 3)) * 100
    assert mpjpe(gt + np.array([10.0, -3, 7]), gt) == pytest.approx(0, abs=1e-12)
    pred = gt.copy()
    pred[:, 3] += [3.0, 4.0, 0.0]
    assert mpjpe(pred, gt) == pytest.approx(5.0 / 24)


def test_pa_matches_scipy_reference(rng):
    for _ in range(50):
        gt = rng.normal(size=(24, 3)) * 100
        pred = gt + rng.normal(size=(24, 3)) * 30
        np.testing.assert_allclose(per_frame_pa_mpjpe(pred, gt), scipy_pa(pred, gt), rtol=1e-9)


def test_similarity_invariance(rng):
    gt = rng.normal(size=(10, 24, 3)) * 100
    R = Rotation.random(10, random_state=1).as_matrix()
    pred = 1.7 * np.einsum("fij,fkj->fki", R, gt) + rng.normal(size=(10, 1, 3)) * 500
    assert pa_mpjpe(pred, gt) < 1e-9


def test_similarity_transform_recovers_parameters(rng):
    x = rng.normal(size=(24, 3))
    R = Rotation.from_rotvec([0.3, -1.2, 0.4]).as_matrix()
    s, R2, t = similarity_transform(x, 0.5 * x @ R.T + [1, 2, 3])
    assert s == pytest.approx(0.5) and np.allclose(R2, R) and np.allclose(t, [1, 2, 3])


def test_reflection_is_not_allowed(rng):
    x = rng.normal(size=(24, 3))
    mirrored = x * [-1, 1, 1]
    _, R, _ = similarity_transform(x, mirrored)
    assert np.linalg.det(R) == pytest.approx(1.0)
    assert per_frame_pa_mpjpe(x, mirrored) > 0.01


def test_degenerate_points():
    line = np.outer(np.arange(24.0), [1, 2, 3])
    with pytest.raises(DegenerateConfiguration):
        procrustes_align(line, line + 1)
    with pytest.raises(DegenerateConfiguration):
        procrustes_align(np.zeros((24, 3)), np.ones((24, 3)))


def test_shape_mismatch():
    with pytest.raises(ShapeMismatch):
        mpjpe(np.zeros((2, 24, 3)), np.zeros((3, 24, 3)))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10**6))
def test_pa_never_exceeds_mpjpe(seed):
    r = np.random.default_rng(seed)
    gt = r.normal(size=(24, 3)) * 100
    pred = gt + r.normal(size=(24, 3)) * r.uniform(1, 100)
    assert per_frame_pa_mpjpe(pred, gt) <= per_frame_mpjpe(pred, gt) + 1e-9


def test_accel_error(rng):
    t = np.arange(10.0)[:, None, None]
    gt = rng.normal(size=(1, 24, 3)) + t * rng.normal(size=(1, 24, 3))
    pred = rng.normal(size=(1, 24, 3)) + t * rng.normal(size=(1, 24, 3))
    assert accel_error(pred, gt) == pytest.approx(0, abs=1e-12)
    seq = rng.normal(size=(7, 24, 3))
    loop = np.stack([seq[i + 1] - 2 * seq[i] + seq[i - 1] for i in range(1, 6)])
    np.testing.assert_allclose(accelerations(seq), loop)
    np.testing.assert_allclose(accel_error(seq, np.zeros_like(seq)), np.linalg.norm(loop, axis=-1).mean())
    with pytest.raises(TooShort):
        accel_error(seq[:2], seq[:2])


def test_evaluate_report(rng, tmp_path):
    gt = rng.normal(size=(12, 24, 3)) * 100
    pairs = [("a", gt + 1.0, gt), ("b", gt[:4] + rng.normal(size=(4, 24, 3)), gt[:4])]
    rep = evaluate(pairs)
    assert rep.n_frames == 16 and rep.n_sequences == 2
    assert rep.mpjpe_mm == pytest.approx(np.mean(rep.per_frame_mpjpe))
    assert json.loads(rep.to_json({"x": 1}))["x"] == 1
    rep.write_csv(tmp_path / "r.csv")
    rows = list(csv.DictReader(open(tmp_path / "r.csv")))
    assert [r["id"] for r in rows] == ["a", "b"] and rows[1]["n_frames"] == "4"
    zero = evaluate([("a", gt, gt)])
    assert zero.mpjpe_mm == 0 and zero.accel_err == 0 and zero.pa_mpjpe_mm < 1e-9


def test_gain_histogram_matches_numpy(rng):
    a, b = rng.normal(50, 10, 5000), rng.normal(45, 10, 5000)
    h = gain_histogram(a, b, bin_width=2.0)
    counts, _ = np.histogram(a - b, bins=h.bin_edges)
    np.testing.assert_array_equal(h.counts, counts)
    np.testing.assert_allclose(h.bin_centers % 2.0, 0, atol=1e-9)
    assert h.weighted_contribution.sum() == pytest.approx(np.mean(a - b), abs=1e-9)
    assert h.counts.sum() == 5000


def test_gain_histogram_edge_cases(tmp_path):
    h = gain_histogram([], [])
    assert h.counts.size == 0 and h.mean_gain == 0.0
    h = gain_histogram([3.0, 3.0], [1.0, 1.0])
    assert h.counts.tolist() == [2] and h.bin_centers.tolist() == [2.0]
    with pytest.raises(ValueError):
        gain_histogram([1.0], [1.0], bin_width=0)
    h.write_csv(tmp_path / "h.csv")
    rows = list(csv.DictReader(open(tmp_path / "h.csv")))
    assert float(rows[0]["weighted_contribution"]) == 2.0
