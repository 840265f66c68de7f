import csv
import math

import numpy as np
import pytest

from cdlm import tensor as T
from cdlm.data import DatasetSpec, DomainBatch, gen_synthetic_pair
from cdlm.errors import ConfigurationError, DimensionError, UsageError
from cdlm.evaluation import (ABLATION_HEADER, GAMMA_PAIRS, EvalReport, MomentEstimate, a_distance,
                             adaptation_accuracy, consistency_grid, depth_grid, evaluate, export_embeddings,
                             gamma_grid, image_metrics, per_class_accuracy, read_ablation_csv, run_ablations,
                             train_source_classifier, verify_moments, write_adaptation_mosaic)
from cdlm.io import read_netpbm
from cdlm.model import CDLM, NetConfig
from cdlm.trainer import TrainConfig

NET = NetConfig(conv=((8, 3, 2), (8, 3, 2)), z_dim=6, disc_hidden=16)


@pytest.fixture(scope="module")
def pair():
    return gen_synthetic_pair(DatasetSpec(n_train=64, n_test=32, seed=1))


@pytest.fixture(scope="module")
def model():
    return CDLM(NET, seed=0)


@pytest.fixture(scope="module")
def clf(pair):
    return train_source_classifier(pair.source_train, epochs=1)


# -- moments ------------------------------------------------------------------------------
@pytest.mark.parametrize("g1,g2", [(0.0, 1.0), (1.0, 0.1), (1.0, 0.0)])
def test_moment_identity_holds(model, pair, g1, g2):
    report = verify_moments(model, pair.target_test.images, g1, g2, n_samples=20_000, seed=1)
    assert report.passed, report.max_abs_z


def test_moment_mutation_is_detected(model, pair):
    from cdlm.model import closed_form_moments

    def no_gamma2(info, rep, g1, g2):
        return closed_form_moments(info, rep, g1, 0.0)

    report = verify_moments(model, pair.target_test.images, 1.0, 0.1, n_samples=20_000, closed_form=no_gamma2)
    assert report.max_abs_z > 5


def test_verify_moments_leaves_model_precision_alone(model, pair):
    verify_moments(model, pair.target_test.images, 1.0, 0.1, n_samples=1000)
    assert model.dtype == np.float32
    assert all(a.dtype == np.float32 for a in model.params.state_dict().values())


def test_verify_moments_sample_floor(model, pair):
    with pytest.raises(UsageError):
        verify_moments(model, pair.target_test.images, 1.0, 0.1, n_samples=10)


def test_moment_estimate():
    est = MomentEstimate.from_samples(np.array([[0.0, 1.0], [2.0, 1.0]]))
    np.testing.assert_allclose(est.mu_h, [1.0, 1.0])
    np.testing.assert_allclose(est.sigma_h, [1.0, 0.0])
    with pytest.raises(ConfigurationError):
        MomentEstimate(np.zeros(2), np.array([-1.0, 0.0]))


# -- metrics ------------------------------------------------------------------------------
def test_image_metrics():
    a = np.zeros((2, 3, 4, 4))
    assert image_metrics(a, a) == (0.0, math.inf)
    mse, psnr = image_metrics(a, a + 0.1)
    assert mse == pytest.approx(0.01) and psnr == pytest.approx(20.0)
    with pytest.raises(DimensionError):
        image_metrics(a, a[:1])


def test_a_distance_extremes():
    rng = np.random.default_rng(0)
    same = rng.normal(size=(400, 5))
    other = rng.normal(size=(400, 5))
    assert a_distance(same, other) < 0.3
    assert a_distance(same, other + 10.0) == 2.0
    with pytest.raises(UsageError):
        a_distance(same[:1], other)


def test_per_class_accuracy():
    out = per_class_accuracy(np.array([0, 1, 1, 0]), np.array([0, 1, 0, 0]), 3)
    assert out[:2] == [pytest.approx(2 / 3), 1.0] and math.isnan(out[2])


def test_adaptation_accuracy_needs_labels(model, clf, pair):
    with pytest.raises(UsageError):
        adaptation_accuracy(model, clf, pair.target_test.unlabeled())
    acc = adaptation_accuracy(model, clf, pair.target_test)
    assert 0.0 <= acc <= 1.0


def test_classifier_needs_labels(pair):
    with pytest.raises(UsageError):
        train_source_classifier(pair.source_train.unlabeled())


def test_evaluate_report(model, clf, pair, tmp_path):
    rep = evaluate(model, pair, clf, target_only=clf)
    assert 0 <= rep.a_distance_raw <= 2 and 0 <= rep.a_distance_cdlm <= 2
    assert len(rep.per_class) == 8 and not rep.psnr_infinite
    rows = dict(csv.reader(rep.write_csv(tmp_path / "r.csv").open()))
    assert rows["metric"] == "value" and float(rows["adapted_acc"]) == rep.adapted_acc


def test_a_distance_on_decoded_generations(model, clf, pair):
    rep = evaluate(model, pair, clf, a_distance_on="decoded")
    assert 0 <= rep.a_distance_cdlm <= 2
    with pytest.raises(ConfigurationError):
        evaluate(model, pair, clf, a_distance_on="pixels")


def test_eval_report_range_checks():
    with pytest.raises(ConfigurationError):
        EvalReport(1.2, 0.5, 0.5, 1.0, 1.0, 0.1, 10.0)
    with pytest.raises(ConfigurationError):
        EvalReport(0.5, 0.5, 0.5, 2.5, 1.0, 0.1, 10.0)


def test_embeddings_csv_round_trip(model, pair, tmp_path):
    path = export_embeddings(model, pair.source_test, pair.target_test.unlabeled(), tmp_path / "e.csv")
    rows = list(csv.reader(path.open()))
    assert rows[0] == ["domain", "label"] + [f"z{i}" for i in range(6)]
    body = rows[1:]
    assert len(body) == 64
    assert {r[0] for r in body} == {"source", "target"}
    assert all(r[1] == "-1" for r in body if r[0] == "target")
    z = np.array([[float(v) for v in r[2:]] for r in body])
    assert np.all(np.isfinite(z))


def test_adaptation_mosaic(model, pair, tmp_path):
    img = read_netpbm(write_adaptation_mosaic(model, pair.target_test, tmp_path / "m.ppm", n=8))
    assert img.shape[0] == 3 and img.shape[1] > img.shape[2] / 8


# -- ablations ------------------------------------------------------------------------------
def test_grids():
    base = TrainConfig(steps=3)
    g = gamma_grid(base, NET)
    assert [c.gammas for c in g] == list(GAMMA_PAIRS)
    c = {cell.label: (cell.train.beta1, cell.train.beta2) for cell in consistency_grid(base, NET)}
    assert c == {"none": (0, 0), "Lc_t": (0, 0.01), "Lc_s": (0.1, 0), "both": (0.1, 0.01)}
    d = depth_grid(base, NetConfig())
    assert [cell.net.tap_layer for cell in d] == [1, 2, 3]


def test_run_ablations_writes_rows_and_captures_errors(pair, clf, tmp_path):
    cells = gamma_grid(TrainConfig(steps=2, batch_size=8), NET)[:2]
    cells[1].net = NetConfig(height=8, width=8, conv=((4, 3, 2),), z_dim=6, disc_hidden=4)
    rows = run_ablations(cells, pair, clf, out_csv=tmp_path / "a.csv")
    back = read_ablation_csv(tmp_path / "a.csv")
    assert list(back[0]) == ABLATION_HEADER and len(back) == 2
    assert back[0]["error"] == "" and 0 <= float(back[0]["adapted_acc"]) <= 1
    assert rows[1]["error"].startswith("ConfigurationError") and back[1]["adapted_acc"] == ""
