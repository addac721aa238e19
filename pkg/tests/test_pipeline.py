import csv

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from rgmreg.data import DatasetConfig, generate_split, procedural_shape
from rgmreg.geometry import RigidTransform, apply_transform, euler_to_matrix, mie_rotation, mie_translation
from rgmreg.network import ModelConfig, RGMNet
from rgmreg.pipeline import (
    CSV_HEADER,
    FixedCorrespondenceModel,
    correspondence_grid,
    correspondence_precision,
    dump_correspondences,
    evaluate,
    read_pgm,
    register_icp,
    register_rgm,
    write_metrics_csv,
    write_pgm,
)

seeds = st.integers(0, 2**32 - 1)


def clean_samples(n=5, n_points=24, seed=0):
    return generate_split(DatasetConfig(n_points=n_points, seed=seed, n_test=n), "test")


def gt_stub(sample):
    return FixedCorrespondenceModel(sample.gt_matrix())


# learned-path driver


@given(seeds)
def test_ground_truth_stub_recovers_transform(seed):
    s = clean_samples(1, seed=seed % 1000)[0]
    result = register_rgm(s.source, s.target, gt_stub(s))
    assert mie_rotation(s.gt_transform.R, result.transform.R) < 1e-6
    assert mie_translation(s.gt_transform.t, result.transform.t) < 1e-9
    assert not result.degenerate


def test_identity_stub_on_equal_clouds(rng):
    X = rng.normal(size=(10, 3))
    result = register_rgm(X, X, FixedCorrespondenceModel(np.eye(10)))
    np.testing.assert_allclose(result.transform.R, np.eye(3), atol=1e-12)
    np.testing.assert_allclose(result.transform.t, 0.0, atol=1e-12)


def test_transform_is_composition_of_steps(rng):
    model = RGMNet(ModelConfig.small(K=5))
    X = rng.normal(size=(12, 3))
    Y = apply_transform(RigidTransform(euler_to_matrix([20, 10, 5]), np.array([0.1, 0, 0])), X)
    result = register_rgm(X, Y, model, iters=3)
    total = RigidTransform.identity()
    for step in result.steps:
        total = step.compose(total)
    np.testing.assert_allclose(result.transform.as_matrix(), total.as_matrix(), atol=1e-9)
    assert len(result.steps) == 3


def test_second_iteration_reextracts_features(rng):
    seen = []

    class Recorder(FixedCorrespondenceModel):
        def correspondence(self, X, Y, variant=None):
            seen.append(np.array(X))
            return super().correspondence(X, Y, variant)

    s = clean_samples(1)[0]
    register_rgm(s.source, s.target, Recorder(s.gt_matrix()), iters=2)
    assert len(seen) == 2
    np.testing.assert_allclose(seen[1], apply_transform(s.gt_transform, s.source), atol=1e-9)


def test_empty_correspondence_flags_degenerate(rng):
    X = rng.normal(size=(6, 3))
    result = register_rgm(X, X, FixedCorrespondenceModel(np.zeros((6, 6))))
    assert result.degenerate and result.steps == []
    assert np.array_equal(result.transform.as_matrix(), np.eye(4))


def test_iters_must_be_positive(rng):
    X = rng.normal(size=(6, 3))
    with pytest.raises(ValueError):
        register_rgm(X, X, FixedCorrespondenceModel(np.eye(6)), iters=0)


# ICP


def test_icp_identical_clouds(rng):
    X = rng.normal(size=(30, 3))
    result = register_icp(X, X)
    assert result.converged and len(result.steps) == 1
    np.testing.assert_allclose(result.transform.R, np.eye(3), atol=1e-12)


@pytest.mark.parametrize("family", ["box", "torus", "composite"])
def test_icp_small_rotation(family):
    X = procedural_shape(family, np.random.default_rng(2), 128)
    T = RigidTransform(euler_to_matrix([5.0, 0.0, 0.0]), np.zeros(3))
    result = register_icp(X, apply_transform(T, X), max_iters=50)
    assert mie_rotation(T.R, result.transform.R) < 1e-3


def test_icp_may_stop_in_a_local_optimum():
    X = procedural_shape("sphere", np.random.default_rng(0), 64)
    X = np.concatenate([X, [[1.5, 0, 0]]])
    T = RigidTransform(euler_to_matrix([45.0, 45.0, 45.0]), np.zeros(3))
    result = register_icp(X, apply_transform(T, X))
    assert result.converged
    assert np.isfinite(mie_rotation(T.R, result.transform.R))


def test_icp_starting_transform(rng):
    X = rng.normal(size=(20, 3))
    T = RigidTransform(euler_to_matrix([30.0, -20.0, 10.0]), np.array([0.3, 0, 0]))
    result = register_icp(X, apply_transform(T, X), T0=T)
    assert mie_rotation(T.R, result.transform.R) < 1e-6


# evaluation


def test_oracle_method():
    report = evaluate(clean_samples(), "oracle")
    s = report.summary()
    assert s["mie_r_deg"] == 0 and s["mie_t"] == 0 and s["recall"] == 1.0 and s["precision"] == 1.0


def test_empty_dataset_rejected():
    with pytest.raises(ValueError, match="empty"):
        evaluate([], "icp")


def test_learned_method_needs_weights_before_work():
    with pytest.raises(ValueError, match="weights"):
        evaluate([], "rgm")


def test_unknown_method():
    with pytest.raises(ValueError, match="unknown method"):
        evaluate(clean_samples(1), "fgr")


def test_variant_model_cannot_run_full_method():
    model = RGMNet(ModelConfig.small(K=5, variant="ais_variant"))
    with pytest.raises(ValueError, match="cannot run"):
        evaluate(clean_samples(1), "rgm", model)
    assert len(evaluate(clean_samples(1), "rgm_var1", model).rows) == 1


def test_evaluation_is_deterministic_and_thread_safe():
    model = RGMNet(ModelConfig.small(K=5))
    samples = clean_samples(4)
    a = evaluate(samples, "rgm", model).rows
    b = evaluate(samples, "rgm", model, jobs=3).rows
    assert a == b


def test_metrics_csv(tmp_path):
    report = evaluate(clean_samples(3), "oracle")
    write_metrics_csv(tmp_path / "m.csv", report)
    rows = list(csv.reader(open(tmp_path / "m.csv")))
    assert rows[0] == CSV_HEADER
    assert len(rows) == 1 + 3 + 1
    assert rows[-1][0] == "mean" and float(rows[-1][-1]) == 1.0
    assert [r[0] for r in rows[1:4]] == ["test_00000", "test_00001", "test_00002"]


def test_precision():
    from rgmreg.assignment import HardCorrespondence

    gt = HardCorrespondence.from_pairs([[0, 0], [1, 1], [2, 2]], (3, 3))
    pred = HardCorrespondence.from_pairs([[0, 0], [1, 2]], (3, 3))
    assert correspondence_precision(pred, gt) == 0.5
    assert correspondence_precision(HardCorrespondence.empty((3, 3)), gt) == 0.0


# image dump


def test_pgm_round_trip(tmp_path, rng):
    img = rng.integers(0, 256, size=(5, 7)).astype(np.uint8)
    write_pgm(tmp_path / "a.pgm", img)
    assert (tmp_path / "a.pgm").read_bytes().startswith(b"P5\n7 5\n255\n")
    assert np.array_equal(read_pgm(tmp_path / "a.pgm"), img)


def test_correspondence_grid():
    img = correspondence_grid([np.eye(2), np.zeros((2, 3)), np.ones((1, 1))])
    # 2 x 2 tiles of 2 x 3 cells with a 1-pixel separator
    assert img.shape == (5, 7)
    assert img[0, 0] == 255 and img[0, 1] == 0 and img[0, 2] == 0
    assert img[2, 0] == 64 and img[0, 3] == 64
    assert img[3, 0] == 255 and img[3, 1] == 0
    assert (img == 255).sum() == 3


def test_dump_correspondences(tmp_path):
    report = evaluate(clean_samples(4, n_points=16), "oracle")
    dump_correspondences(tmp_path / "c.pgm", report)
    img = read_pgm(tmp_path / "c.pgm")
    assert img.shape == (33, 33)
    assert (img == 255).sum() == 4 * 16
