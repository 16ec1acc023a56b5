import numpy as np
import pytest
from hypothesis import given, strategies as st

from robust_halfspace.bench import (BenchCell, CellResult, ExperimentReport, Method, NoiseMode, NoiseSpec,
                                    accuracy, error_rate, fit_baseline, fit_tree, gen_halfspace, inject_noise,
                                    noise_sensitivity, run_cell, split_train_test)
from robust_halfspace.core import Dataset, HyperParams, LinearModel
from robust_halfspace.errors import ConfigError, DataError
from robust_halfspace.train import NoisePolicy


def test_gen_halfspace_labels_follow_the_true_model():
    data, true_model = gen_halfspace(300, 5, margin=0.2, seed=1)
    assert data.features.shape == (300, 5)
    assert np.linalg.norm(true_model.w) == pytest.approx(1.0)
    assert abs(true_model.b) <= 0.1
    assert np.array_equal(data.labels, true_model.predict_many(data.features))
    assert np.all(np.abs(true_model.decision_function(data.features)) >= 0.2)


def test_gen_halfspace_is_reproducible_and_balanced():
    first, _ = gen_halfspace(2000, 10, seed=9)
    second, _ = gen_halfspace(2000, 10, seed=9)
    assert first == second
    assert 0.4 <= float(np.mean(first.labels == 1)) <= 0.6
    with pytest.raises(ConfigError):
        gen_halfspace(1, 3)
    with pytest.raises(ConfigError):
        gen_halfspace(10, 3, margin=-1.0)


def test_gen_halfspace_with_a_given_model():
    true_model = LinearModel([0.0, 1.0], 0.0)
    data, returned = gen_halfspace(50, 2, seed=0, true_model=true_model)
    assert returned == true_model
    assert np.array_equal(data.labels, np.where(data.features[:, 1] >= 0.0, 1, -1))
    with pytest.raises(DataError):
        gen_halfspace(50, 3, true_model=true_model)


def test_corrupted_count():
    assert NoiseSpec(0.3).corrupted_count(10) == 3
    assert NoiseSpec(0.25).corrupted_count(10) == 2
    assert NoiseSpec(0.0).corrupted_count(1000) == 0
    with pytest.raises(ConfigError):
        NoiseSpec(1.0)


def test_random_flip():
    data, true_model = gen_halfspace(200, 4, seed=2)
    noisy, flipped = inject_noise(data, NoiseSpec(0.15, NoiseMode.random_flip, seed=3), true_model)
    assert flipped.shape == (30,)
    assert np.array_equal(flipped, np.unique(flipped))
    assert np.array_equal(noisy.features, data.features)
    assert np.array_equal(np.flatnonzero(noisy.labels != data.labels), flipped)


def test_zero_rate_leaves_the_data_alone():
    data, true_model = gen_halfspace(100, 3, seed=4)
    for mode in NoiseMode:
        noisy, corrupted = inject_noise(data, NoiseSpec(0.0, mode, seed=1), true_model)
        assert noisy == data
        assert corrupted.size == 0


def test_boundary_flip_takes_the_closest_points():
    data, true_model = gen_halfspace(200, 3, seed=5)
    noisy, flipped = inject_noise(data, NoiseSpec(0.1, NoiseMode.boundary_flip), true_model)
    distance = np.abs(true_model.decision_function(data.features))
    untouched = np.setdiff1d(np.arange(data.n), flipped)
    assert flipped.shape == (20,)
    assert np.max(distance[flipped]) <= np.min(distance[untouched])
    assert np.all(noisy.labels[flipped] == -data.labels[flipped])


def test_feature_corruption():
    data, true_model = gen_halfspace(200, 3, seed=6)
    noisy, corrupted = inject_noise(data, NoiseSpec(0.2, NoiseMode.feature_corrupt, seed=8), true_model)
    untouched = np.setdiff1d(np.arange(data.n), corrupted)
    assert corrupted.shape == (40,)
    assert np.array_equal(noisy.features[untouched], data.features[untouched])
    assert np.array_equal(noisy.labels[untouched], data.labels[untouched])
    assert np.array_equal(noisy.labels[corrupted], -true_model.predict_many(noisy.features[corrupted]))


def test_split_train_test():
    data, _ = gen_halfspace(100, 2, seed=0)
    train, test = split_train_test(data)
    assert (train.n, test.n) == (80, 20)
    assert np.array_equal(np.vstack([train.features, test.features]), data.features)


@pytest.mark.parametrize("method", [Method.linear_svm, Method.logistic])
def test_linear_baselines_on_separable_data(method):
    data, _ = gen_halfspace(1000, 5, margin=0.5, seed=12)
    train, test = split_train_test(data)
    fitted = fit_baseline(train, method, HyperParams())
    assert accuracy(fitted.model, test) >= 0.99
    assert fitted.iterations >= 1


def test_decision_tree_baseline():
    data, _ = gen_halfspace(600, 3, seed=13)
    fitted = fit_baseline(data, Method.decision_tree, HyperParams())
    assert fitted.iterations == 0
    assert fitted.model.depth <= 5
    assert accuracy(fitted.model, data) > 0.8


def test_tree_on_an_axis_split():
    features = np.array([[0.0], [1.0], [2.0], [3.0]])
    tree = fit_tree(Dataset(features, np.array([-1, -1, 1, 1])))
    assert tree.depth == 1
    assert tree.root.threshold == 1.5
    assert list(tree.predict_many(features)) == [-1, -1, 1, 1]


def test_baselines_need_both_classes():
    data = Dataset(np.random.default_rng(0).standard_normal((10, 2)), np.ones(10, dtype=np.int64))
    for method in (Method.linear_svm, Method.logistic, Method.decision_tree):
        with pytest.raises(DataError):
            fit_baseline(data, method, HyperParams())
    with pytest.raises(ConfigError):
        fit_baseline(Dataset(np.array([[1.0], [-1.0]]), np.array([1, -1])), Method.proposed, HyperParams())


def test_accuracy_counts():
    features = np.array([[1.0]] * 45 + [[-1.0]] * 5 + [[-1.0]] * 47 + [[1.0]] * 3)
    labels = np.array([1] * 50 + [-1] * 50)
    data = Dataset(features, labels)
    model = LinearModel([1.0])
    assert accuracy(model, data) == 0.92
    assert error_rate(model, data) == pytest.approx(0.08)
    assert accuracy(model, data) + error_rate(model, data) == pytest.approx(1.0)


def test_noise_sensitivity():
    assert noise_sensitivity([(0.0, 0.95), (0.1, 0.90)]) == [(0.1, pytest.approx(0.5))]
    assert noise_sensitivity([(0.0, 0.9), (0.2, 0.9), (0.4, 0.95)]) == [(0.2, 0.0), (0.4, pytest.approx(0.25))]
    with pytest.raises(DataError):
        noise_sensitivity([(0.0, 0.9)])
    with pytest.raises(DataError):
        noise_sensitivity([(0.2, 0.9), (0.1, 0.8)])
    with pytest.raises(DataError):
        noise_sensitivity([(0.1, 0.9), (0.1, 0.8)])


@given(st.lists(st.floats(min_value=0.0, max_value=0.99), min_size=2, max_size=10, unique=True),
       st.floats(min_value=0.0, max_value=1.0))
def test_constant_accuracy_has_zero_sensitivity(rates, value):
    series = [(rate, value) for rate in sorted(rates)]
    assert all(sensitivity == 0.0 for _, sensitivity in noise_sensitivity(series))


def small_cell(rate: float, seed_index: int = 0) -> BenchCell:
    return BenchCell(rate=rate, seed_index=seed_index, master_seed=42, n=200, d=3, margin=0.0,
                     mode=NoiseMode.random_flip, hp=HyperParams(max_iterations=100),
                     policy=NoisePolicy.downweight, methods=tuple(Method))


def test_cell_seeds():
    assert small_cell(0.1).data_seed == small_cell(0.3).data_seed
    assert small_cell(0.1).noise_seed != small_cell(0.3).noise_seed
    assert small_cell(0.1, 0).data_seed != small_cell(0.1, 1).data_seed


def test_run_cell():
    result = run_cell(small_cell(0.2))
    assert result == run_cell(small_cell(0.2))
    assert set(result.accuracy_by_method) == set(Method)
    assert all(0.0 <= value <= 1.0 for value in result.accuracy_by_method.values())
    assert result.iterations_by_method[Method.decision_tree] == 0
    assert result.iterations_by_method[Method.proposed] >= 1


def test_clean_separable_cell():
    cell = BenchCell(rate=0.0, seed_index=0, master_seed=5, n=400, d=2, margin=1.0,
                     mode=NoiseMode.boundary_flip, hp=HyperParams(), policy=NoisePolicy.downweight,
                     methods=tuple(Method))
    result = run_cell(cell)
    assert all(value >= 0.95 for value in result.accuracy_by_method.values())


@pytest.fixture
def report():
    accuracies = {
        (0, 0.0): (0.95, 0.94), (0, 0.1): (0.93, 0.90), (0, 0.2): (0.91, 0.85),
        (1, 0.0): (0.97, 0.96), (1, 0.1): (0.95, 0.90), (1, 0.2): (0.92, 0.86),
    }
    methods = (Method.proposed, Method.logistic)
    cells = [
        CellResult(rate, seed, dict(zip(methods, values)), {Method.proposed: 100 + seed, Method.logistic: 300})
        for (seed, rate), values in accuracies.items()
    ]
    return ExperimentReport.from_cells(cells, methods, (0.1, 0.2))


def test_report_aggregation(report):
    first, second = report.rows
    assert first.noise_rate == 0.1
    assert first.accuracy_by_method[Method.proposed] == pytest.approx(0.94)
    assert first.accuracy_std_by_method[Method.proposed] == pytest.approx(0.01)
    assert first.sensitivity_by_method[Method.proposed] == pytest.approx(0.2)
    assert first.sensitivity_by_method[Method.logistic] == pytest.approx(0.5)
    assert second.sensitivity_by_method[Method.proposed] == pytest.approx(0.25)
    assert second.sensitivity_by_method[Method.logistic] == pytest.approx(0.45)
    assert first.iterations_by_method == {Method.proposed: 100, Method.logistic: 300}


def test_report_csv_round_trip(report, tmp_path):
    written = report.write_csvs(tmp_path)
    assert [path.name for path in written] == ["accuracy.csv", "sensitivity.csv", "convergence.csv"]
    header = (tmp_path / "accuracy.csv").read_text().splitlines()[0]
    assert header == "noise_rate,proposed_mean,proposed_std,logistic_mean,logistic_std"
    restored = ExperimentReport.read_csvs(tmp_path)
    assert restored.methods == report.methods
    for original, loaded in zip(report.rows, restored.rows):
        assert loaded.noise_rate == original.noise_rate
        assert loaded.iterations_by_method == original.iterations_by_method
        for method in report.methods:
            assert loaded.accuracy_by_method[method] == pytest.approx(original.accuracy_by_method[method], abs=1e-6)
            assert loaded.sensitivity_by_method[method] == pytest.approx(
                original.sensitivity_by_method[method], abs=1e-6)


def test_report_without_files(tmp_path):
    with pytest.raises(DataError):
        ExperimentReport.read_csvs(tmp_path)


def test_report_markdown(report):
    text = report.markdown()
    assert "## Model Accuracy Evaluation" in text
    assert "## Noise Sensitivity" in text
    assert "## Convergence Evaluation" in text
    assert "| Noise Rate | Proposed Model Accuracy | Logistic Regression Accuracy |" in text
    assert "| 0.1 | 94.0% ± 1.0 | 90.0% ± 0.0 |" in text
    assert "| 0.2 | 0.250 | 0.450 |" in text
