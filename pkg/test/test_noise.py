import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from robust_halfspace.core import Dataset, HyperParams, ScoreMode
from robust_halfspace.errors import DataError, InfeasibleError
from robust_halfspace.noise import (PerClassDetector, calibrate_slope, contrast_values, decision_value,
                                    decision_values, detector_decision_values, fit_detector, fit_ocsvm,
                                    load_detector, noise_profile, rate_from_decision, rbf_gram, rbf_kernel,
                                    save_detector, support_values)


def project_capped_simplex(values: np.ndarray, bound: float) -> np.ndarray:
    """Euclidean projection onto {0 <= a <= bound, sum(a) = 1}."""
    shifts = np.sort(np.concatenate([values, values - bound]))
    sums = np.clip(values[None, :] - shifts[:, None], 0.0, bound).sum(axis=1)
    k = int(np.flatnonzero(sums >= 1.0)[-1])
    low, high = shifts[k], shifts[k + 1]
    if sums[k] == sums[k + 1]:
        shift = low
    else:
        shift = low + (sums[k] - 1.0) * (high - low) / (sums[k] - sums[k + 1])
    return np.clip(values - shift, 0.0, bound)


def dense_dual_objective(points: np.ndarray, nu: float, gamma: float, iterations: int = 20_000) -> float:
    """Accelerated projected gradient on the full dual, used as an oracle for SMO."""
    gram = rbf_gram(points, points, gamma)
    np.fill_diagonal(gram, 1.0)
    size = points.shape[0]
    bound = 1.0 / (nu * size)
    lipschitz = float(np.max(np.linalg.eigvalsh(gram)))
    current = np.full(size, 1.0 / size)
    momentum, t = current.copy(), 1.0
    for _ in range(iterations):
        following = project_capped_simplex(momentum - gram @ momentum / lipschitz, bound)
        if following @ gram @ following > current @ gram @ current:
            # restart the momentum from the last iterate
            momentum, t = current, 1.0
            continue
        t_next = 0.5 * (1.0 + math.sqrt(1.0 + 4.0 * t * t))
        momentum = following + (t - 1.0) / t_next * (following - current)
        if np.max(np.abs(following - current)) < 1e-14:
            current = following
            break
        current, t = following, t_next
    return 0.5 * float(current @ gram @ current)


def test_rbf_kernel_values():
    assert rbf_kernel([1.0, 2.0], [1.0, 2.0], 0.7) == 1.0
    assert rbf_kernel([0.0, 0.0], [1.0, 0.0], 1.0) == pytest.approx(math.exp(-1.0), rel=1e-15)
    assert 0.0 < rbf_kernel([0.0], [3.0], 1.0) < 1.0
    with pytest.raises(DataError):
        rbf_kernel([1.0], [1.0, 2.0], 1.0)


@given(st.lists(st.floats(min_value=-10, max_value=10), min_size=6, max_size=6),
       st.floats(min_value=1e-3, max_value=10))
def test_rbf_kernel_is_symmetric(coordinates, gamma):
    first, second = coordinates[:3], coordinates[3:]
    assert rbf_kernel(first, second, gamma) == rbf_kernel(second, first, gamma)


def test_identical_points_split_evenly():
    model = fit_ocsvm(np.array([[1.0, 2.0], [1.0, 2.0]]), nu=1.0, gamma=1.0)
    assert model.alphas == pytest.approx(np.array([0.5, 0.5]))


def test_infeasible_nu():
    with pytest.raises(InfeasibleError):
        fit_ocsvm(np.zeros((5, 2)), nu=0.1)
    with pytest.raises(InfeasibleError):
        fit_ocsvm(np.zeros((1, 2)), nu=1.0)


def test_planted_five_points_match_the_oracle():
    points = np.array([[0.0, 0.0], [0.3, -0.2], [-0.1, 0.4], [0.2, 0.1], [3.0, 3.0]])
    model = fit_ocsvm(points, nu=0.4, gamma=1.0, tol=1e-10)
    assert model.dual_objective() == pytest.approx(dense_dual_objective(points, 0.4, 1.0), abs=1e-6)


def test_smo_matches_dense_qp():
    rng = np.random.default_rng(2024)
    for _ in range(50):
        size = int(rng.integers(2, 11))
        points = rng.standard_normal((size, 2))
        nu = float(rng.uniform(max(1.0 / size, 0.05), 1.0))
        gamma = float(rng.uniform(0.5, 2.0))
        model = fit_ocsvm(points, nu=nu, gamma=gamma, tol=1e-10)
        assert model.converged
        assert model.dual_objective() == pytest.approx(dense_dual_objective(points, nu, gamma), abs=1e-6)


def test_dual_feasibility():
    rng = np.random.default_rng(8)
    for nu in (0.05, 0.2, 0.5, 1.0):
        points = rng.standard_normal((60, 3))
        model = fit_ocsvm(points, nu=nu)
        assert abs(float(np.sum(model.alphas)) - 1.0) < 1e-8
        assert np.all(model.alphas >= -1e-12)
        assert np.all(model.alphas <= model.bound + 1e-12)
        assert np.all(model.alphas > 0.0)
        assert np.array_equal(model.support_points, points[model.support_indices])


@pytest.mark.parametrize("nu", [0.1, 0.3])
def test_nu_property(nu):
    for seed in range(10):
        points = np.random.default_rng(seed).standard_normal((200, 2))
        model = fit_ocsvm(points, nu=nu)
        outliers = float(np.mean(decision_values(model, points) < 0.0))
        support = model.alphas.shape[0] / 200
        assert outliers <= nu + 0.05
        assert support >= nu - 0.05


def test_two_point_margin():
    points = np.array([[0.0, 0.0], [1.0, 0.5]])
    model = fit_ocsvm(points, nu=0.5, gamma=1.0)
    assert model.alphas == pytest.approx(np.array([0.5, 0.5]))
    for point in points:
        assert decision_value(model, point) == pytest.approx(0.0, abs=1e-12)


def test_far_point_scores_minus_offset():
    points = np.random.default_rng(0).standard_normal((40, 2))
    model = fit_ocsvm(points, nu=0.2, gamma=1.0)
    far = decision_value(model, [1e3, -1e3])
    assert far == pytest.approx(-model.offset, abs=1e-12)
    assert far < 0.0


def test_planted_outlier_is_negative():
    for seed in range(10):
        rng = np.random.default_rng(seed)
        points = np.vstack([rng.standard_normal((99, 2)), [[10.0, 0.0]]])
        model = fit_ocsvm(points, nu=0.2)
        assert decision_value(model, points[-1]) < 0.0
        assert decision_values(model, points[-1:])[0] == pytest.approx(decision_value(model, points[-1]))


def test_decision_is_order_invariant():
    rng = np.random.default_rng(13)
    points = rng.standard_normal((30, 2))
    queries = rng.standard_normal((20, 2)) * 2
    original = fit_ocsvm(points, nu=0.3, gamma=0.8, tol=1e-12)
    shuffled = fit_ocsvm(points[rng.permutation(30)], nu=0.3, gamma=0.8, tol=1e-12)
    assert decision_values(shuffled, queries) == pytest.approx(decision_values(original, queries), abs=1e-8)


def test_rate_mapping():
    assert rate_from_decision(np.array([0.0]), 3.0)[0] == pytest.approx(0.5, abs=1e-15)
    assert rate_from_decision(np.array([1e6]), 3.0)[0] == 0.0
    assert rate_from_decision(np.array([-1e6]), 3.0)[0] == 1.0
    values = np.linspace(-5.0, 5.0, 101)
    rates = rate_from_decision(values, 2.0)
    assert np.all(np.diff(rates) <= 0.0)
    assert np.all((rates >= 0.0) & (rates <= 1.0))


def two_blobs(rng, per_class: int = 100, flipped: int = 0) -> tuple[Dataset, np.ndarray]:
    positive = rng.standard_normal((per_class, 2)) + 3.0
    negative = rng.standard_normal((per_class, 2)) - 3.0
    features = np.vstack([positive, negative])
    labels = np.array([1] * per_class + [-1] * per_class)
    labels[:flipped] = -1
    return Dataset(features, labels), np.arange(flipped)


def test_flipped_points_get_high_rates():
    for seed in range(10):
        data, flipped = two_blobs(np.random.default_rng(seed), flipped=5)
        detector = fit_detector(data, HyperParams())
        rates = noise_profile(detector, data).rates
        assert np.all(rates[flipped] > 0.5)
        assert np.median(rates[5:]) < 0.5


def test_calibration_quantile_own_scoring():
    data, _ = two_blobs(np.random.default_rng(1))
    hp = HyperParams(scoring=ScoreMode.own)
    detector = fit_detector(data, hp)
    for label in (1, -1):
        model, slope = detector.for_label(label)
        values = decision_values(model, data.features[data.class_indices(label)])
        anchor = np.quantile(values, hp.calibration_quantile)
        assert rate_from_decision(np.array([anchor]), slope)[0] == pytest.approx(hp.calibration_rate)


def test_calibration_quantile_contrast_scoring():
    data, _ = two_blobs(np.random.default_rng(1), flipped=10)
    hp = HyperParams()
    detector = fit_detector(data, hp)
    values = detector_decision_values(detector, data)
    for label in (1, -1):
        _, slope = detector.for_label(label)
        anchor = np.quantile(values[data.class_indices(label)], hp.calibration_quantile)
        assert rate_from_decision(np.array([anchor]), slope)[0] <= hp.calibration_rate + 1e-12


def test_calibrate_slope():
    values = np.array([-0.4, -0.2, 0.2, 0.4, 0.6, 0.8, 1.0])
    logit = np.log(9.0)
    one_sided = calibrate_slope(values, 0.9, 0.1)
    assert one_sided == pytest.approx(logit / 0.88)
    assert rate_from_decision(np.array([0.88]), one_sided)[0] == pytest.approx(0.1)
    two_sided = calibrate_slope(values, 0.9, 0.1, two_sided=True)
    assert two_sided == pytest.approx(logit / 0.15)
    assert rate_from_decision(np.array([-0.15]), two_sided)[0] == pytest.approx(0.9)
    assert calibrate_slope(np.abs(values), 0.9, 0.1, two_sided=True) == pytest.approx(logit / 0.88)


def test_support_values_leave_out_the_point_itself():
    points = np.random.default_rng(3).standard_normal((20, 2))
    model = fit_ocsvm(points, nu=0.5, gamma=0.5)
    gram = rbf_gram(model.support_points, model.support_points, model.gamma)
    np.fill_diagonal(gram, 0.0)
    assert support_values(model, model.support_points, exclude_self=True) == pytest.approx(gram @ model.alphas)
    assert support_values(model, points) - model.offset == pytest.approx(decision_values(model, points))


def test_contrast_values_are_bounded():
    data, flipped = two_blobs(np.random.default_rng(2), flipped=8)
    detector = fit_detector(data, HyperParams(nu=0.9))
    values = contrast_values(detector, data)
    assert np.all((values >= -1.0) & (values <= 1.0))
    assert np.all(values[flipped] < 0.0)
    assert np.median(values[8:]) > 0.0


def test_detector_needs_two_points_per_class():
    data = Dataset(np.array([[0.0], [1.0], [2.0]]), np.array([1, 1, -1]))
    with pytest.raises(InfeasibleError):
        fit_detector(data, HyperParams(nu=1.0))


def test_detector_json_round_trip(tmp_path):
    data, _ = two_blobs(np.random.default_rng(4), per_class=30)
    detector = fit_detector(data, HyperParams())
    save_detector(detector, tmp_path / "detector.json")
    loaded = load_detector(tmp_path / "detector.json")
    assert isinstance(loaded, PerClassDetector)
    assert np.array_equal(noise_profile(loaded, data).rates, noise_profile(detector, data).rates)
    assert loaded.scoring is ScoreMode.contrast


def test_detector_json_keeps_the_scoring_mode():
    data, _ = two_blobs(np.random.default_rng(5), per_class=30)
    detector = fit_detector(data, HyperParams(scoring=ScoreMode.own))
    loaded = PerClassDetector.from_json(detector.to_json())
    assert loaded.scoring is ScoreMode.own
    assert np.array_equal(noise_profile(loaded, data).rates, noise_profile(detector, data).rates)
