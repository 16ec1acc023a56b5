"""
One-Class SVM noise detector.

The dual of the nu-one-class problem

    minimise   1/2 sum_ij a_i a_j K(x_i, x_j)
    subject to 0 <= a_i <= 1 / (nu N),  sum_i a_i = 1

is solved by SMO with maximal-violating-pair selection over a dense RBF Gram
matrix. One model is fit per class. An example is scored either by the
decision value of its own label's model, or by how much more support that
model gives it than the other label's model does. The noise rate is a sigmoid
of the negated score.
"""
import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional
try:
    from typing import Self
except ImportError:  # Python < 3.11
    from typing_extensions import Self

import numpy as np

from robust_halfspace.core import Dataset, HyperParams, NoiseProfile, ScoreMode, frozen_array
from robust_halfspace.errors import ConfigError, DataError, InfeasibleError


DEFAULT_NU = 0.2
# contrast scores need nearly uniform coefficients to follow the class density
CONTRAST_NU = 0.9
CLASSES = (1, -1)
# share of the median disputed score that is mapped to rate 1 - calibration_rate
DISPUTED_ANCHOR = 0.5


def rbf_kernel(x1, x2, gamma: float) -> float:
    x1 = np.asarray(x1, dtype=np.float64)
    x2 = np.asarray(x2, dtype=np.float64)
    if x1.shape != x2.shape:
        raise DataError(f"kernel arguments differ in shape: {x1.shape} vs {x2.shape}")
    if not gamma > 0:
        raise ConfigError(f"RBF width 'gamma' must be > 0, got {gamma!r}")
    difference = x1 - x2
    return math.exp(-gamma * float(difference @ difference))


def rbf_gram(left: np.ndarray, right: np.ndarray, gamma: float) -> np.ndarray:
    squared = (np.sum(left * left, axis=1)[:, None]
               + np.sum(right * right, axis=1)[None, :]
               - 2.0 * left @ right.T)
    return np.exp(-gamma * np.maximum(squared, 0.0))


def default_gamma(points: np.ndarray) -> float:
    """1 / (d * var(features)), falling back to 1 for constant features."""
    variance = float(np.var(points))
    if variance <= 0.0:
        return 1.0
    return 1.0 / (points.shape[1] * variance)


@dataclass(frozen=True, eq=False)
class OcSvmModel:
    alphas: np.ndarray
    support_points: np.ndarray
    support_indices: np.ndarray
    offset: float
    gamma: float
    nu: float
    training_size: int
    converged: bool = True
    iterations: int = 0

    def __post_init__(self):
        object.__setattr__(self, 'alphas', frozen_array(self.alphas))
        object.__setattr__(self, 'support_points', frozen_array(self.support_points))
        object.__setattr__(self, 'support_indices', frozen_array(self.support_indices, dtype=np.int64))

    @property
    def d(self) -> int:
        return self.support_points.shape[1]

    @property
    def bound(self) -> float:
        return 1.0 / (self.nu * self.training_size)

    def dual_objective(self) -> float:
        gram = rbf_gram(self.support_points, self.support_points, self.gamma)
        return 0.5 * float(self.alphas @ gram @ self.alphas)

    def to_json(self) -> dict:
        return {
            'alphas': [float(value) for value in self.alphas],
            'support': [[float(value) for value in point] for point in self.support_points],
            'support_indices': [int(index) for index in self.support_indices],
            'offset': self.offset,
            'gamma': self.gamma,
            'nu': self.nu,
            'training_size': self.training_size,
            'converged': self.converged,
            'iterations': self.iterations,
        }

    @classmethod
    def from_json(cls, data: dict) -> Self:
        try:
            return cls(
                alphas=np.array(data['alphas'], dtype=np.float64),
                support_points=np.array(data['support'], dtype=np.float64).reshape(len(data['alphas']), -1),
                support_indices=np.array(data.get('support_indices', range(len(data['alphas'])))),
                offset=float(data['offset']),
                gamma=float(data['gamma']),
                nu=float(data['nu']),
                training_size=int(data.get('training_size', len(data['alphas']))),
                converged=bool(data.get('converged', True)),
                iterations=int(data.get('iterations', 0)),
            )
        except (KeyError, TypeError, ValueError) as error:
            raise DataError(f"malformed detector JSON: {error!r}") from error


def fit_ocsvm(points, nu: float, gamma: Optional[float] = None,
              tol: float = 1e-4, max_iterations: int = 100_000) -> OcSvmModel:
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2:
        raise DataError(f"points must form a 2-d matrix, got shape {points.shape}")
    size = points.shape[0]
    if size < 2:
        raise InfeasibleError(f"One-Class SVM needs at least 2 points, got {size}")
    if not 0 < nu <= 1:
        raise ConfigError(f"hyperparameter 'nu' must lie in (0, 1], got {nu!r}")
    if nu * size < 1 - 1e-9:
        raise InfeasibleError(f"nu * N = {nu} * {size} < 1: the dual constraints are infeasible")
    if gamma is None:
        gamma = default_gamma(points)
    if not gamma > 0:
        raise ConfigError(f"hyperparameter 'gamma' must be > 0, got {gamma!r}")

    gram = rbf_gram(points, points, gamma)
    np.fill_diagonal(gram, 1.0)
    bound = 1.0 / (nu * size)

    # feasible start: fill the first floor(nu N) coefficients to the bound
    alphas = np.zeros(size)
    full = min(int(nu * size + 1e-9), size)
    alphas[:full] = bound
    if full < size:
        alphas[full] = max(1.0 - full * bound, 0.0)
    grads = gram @ alphas

    converged = False
    iteration = 0
    for iteration in range(max_iterations):
        up = np.where(alphas < bound, grads, np.inf)
        low = np.where(alphas > 0.0, grads, -np.inf)
        i = int(np.argmin(up))
        j = int(np.argmax(low))
        violation = low[j] - up[i]
        if violation < tol:
            converged = True
            break
        curvature = gram[i, i] + gram[j, j] - 2.0 * gram[i, j]
        if curvature <= 0.0:
            curvature = 1e-12
        room_i = bound - alphas[i]
        room_j = alphas[j]
        delta = min(violation / curvature, room_i, room_j)
        alphas[i] = bound if delta == room_i else alphas[i] + delta
        alphas[j] = 0.0 if delta == room_j else alphas[j] - delta
        grads += delta * (gram[:, i] - gram[:, j])

    if not converged:
        logging.warning("SMO stopped at the iteration cap of %d without reaching tol=%g",
                        max_iterations, tol)
    logging.debug("SMO finished after %d iterations on %d points", iteration, size)

    grads = gram @ alphas
    tiny = 1e-12 * bound
    free = (alphas > tiny) & (alphas < bound - tiny)
    if np.any(free):
        offset = float(np.mean(grads[free]))
    else:
        at_bound = grads[alphas >= bound - tiny]
        at_zero = grads[alphas <= tiny]
        limits = []
        if at_bound.size:
            limits.append(float(np.max(at_bound)))
        if at_zero.size:
            limits.append(float(np.min(at_zero)))
        offset = sum(limits) / len(limits)

    support = np.flatnonzero(alphas > 0.0)
    return OcSvmModel(
        alphas=alphas[support],
        support_points=points[support],
        support_indices=support,
        offset=offset,
        gamma=float(gamma),
        nu=float(nu),
        training_size=size,
        converged=converged,
        iterations=iteration if converged else max_iterations,
    )


def support_values(model: OcSvmModel, points, exclude_self: bool = False) -> np.ndarray:
    """
    sum_i a_i K(s_i, x) for every row x of `points`.

    With `exclude_self`, support points that coincide with x are left out, so
    a training example does not count its own coefficient.
    """
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2 or points.shape[1] != model.d:
        raise DataError(f"detector expects {model.d} features, got shape {points.shape}")
    kernel = rbf_gram(points, model.support_points, model.gamma)
    if exclude_self:
        coincident = np.all(points[:, None, :] == model.support_points[None, :, :], axis=2)
        kernel = np.where(coincident, 0.0, kernel)
    return kernel @ model.alphas


def decision_values(model: OcSvmModel, points) -> np.ndarray:
    return support_values(model, points) - model.offset


def decision_value(model: OcSvmModel, x) -> float:
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (model.d,):
        raise DataError(f"detector expects {model.d} features, got shape {x.shape}")
    kernel = np.array([rbf_kernel(point, x, model.gamma) for point in model.support_points])
    return float(kernel @ model.alphas) - model.offset


def rate_from_decision(values: np.ndarray, slope: float) -> np.ndarray:
    """1 / (1 + exp(slope * f)), evaluated without overflow."""
    return np.exp(-np.logaddexp(0.0, slope * np.asarray(values, dtype=np.float64)))


def calibrate_slope(values: np.ndarray, quantile: float, target_rate: float, two_sided: bool = False) -> float:
    """
    Slope k that maps the `quantile` of `values` to `target_rate`.

    With `two_sided` the slope is steepened, if needed, until a negative value
    of DISPUTED_ANCHOR times the median negative value maps to
    1 - `target_rate`. The upper quantile then maps to `target_rate` or less.
    """
    values = np.asarray(values, dtype=np.float64)
    logit = math.log((1.0 - target_rate) / target_rate)
    anchor = float(np.quantile(values, quantile))
    if anchor > 0.0:
        slope = logit / anchor
    else:
        spread = float(np.std(values))
        logging.warning("Decision-value quantile %.3g is not positive, calibrating on spread %.3g",
                        anchor, spread)
        slope = logit / spread if spread > 0.0 else 1.0
    if two_sided:
        disputed = -values[values < 0.0]
        if disputed.size:
            scale = DISPUTED_ANCHOR * float(np.median(disputed))
            if scale > 0.0:
                slope = max(slope, logit / scale)
    return slope


@dataclass(frozen=True)
class PerClassDetector:
    model_pos: OcSvmModel
    model_neg: OcSvmModel
    slope_pos: float
    slope_neg: float
    scoring: ScoreMode = ScoreMode.contrast

    @property
    def d(self) -> int:
        return self.model_pos.d

    def for_label(self, label: int) -> tuple[OcSvmModel, float]:
        if label == 1:
            return self.model_pos, self.slope_pos
        return self.model_neg, self.slope_neg

    def with_slopes(self, slope_pos: float, slope_neg: float) -> Self:
        return PerClassDetector(self.model_pos, self.model_neg, slope_pos, slope_neg, self.scoring)

    def to_json(self) -> dict:
        return {
            'positive': {**self.model_pos.to_json(), 'slope': self.slope_pos},
            'negative': {**self.model_neg.to_json(), 'slope': self.slope_neg},
            'scoring': self.scoring.name,
        }

    @classmethod
    def from_json(cls, data: dict) -> Self:
        try:
            return cls(
                model_pos=OcSvmModel.from_json(data['positive']),
                model_neg=OcSvmModel.from_json(data['negative']),
                slope_pos=float(data['positive']['slope']),
                slope_neg=float(data['negative']['slope']),
                scoring=ScoreMode[data.get('scoring', ScoreMode.contrast.name)],
            )
        except (KeyError, TypeError, ValueError) as error:
            raise DataError(f"malformed detector JSON: {error!r}") from error


def resolve_nu(hp: HyperParams, expected_noise_rate: Optional[float] = None) -> float:
    if hp.nu is not None:
        return hp.nu
    if hp.scoring is ScoreMode.contrast:
        return CONTRAST_NU
    if expected_noise_rate is not None and 0 < expected_noise_rate <= 1:
        return expected_noise_rate
    return DEFAULT_NU


def fit_detector(data: Dataset, hp: HyperParams,
                 expected_noise_rate: Optional[float] = None) -> PerClassDetector:
    """
    Fit one One-Class SVM per label on `data`.

    Pass a trusted subset as `data` to train on clean points only. The rate
    slopes are calibrated per label on the scores of `data` itself.
    """
    nu = resolve_nu(hp, expected_noise_rate)
    gamma = hp.gamma if hp.gamma is not None else default_gamma(data.features)
    models = {}
    for label in CLASSES:
        points = data.features[data.class_indices(label)]
        if points.shape[0] < 2:
            raise InfeasibleError(f"class {label:+d} has {points.shape[0]} example(s), the detector needs at least 2")
        logging.info("Fitting One-Class SVM on %d examples of class %+d (nu=%g, gamma=%g)",
                     points.shape[0], label, nu, gamma)
        models[label] = fit_ocsvm(points, nu=nu, gamma=gamma,
                                  tol=hp.smo_tol, max_iterations=hp.smo_max_iterations)
    detector = PerClassDetector(models[1], models[-1], 1.0, 1.0, hp.scoring)
    values = detector_decision_values(detector, data)
    slopes = {
        label: calibrate_slope(values[data.class_indices(label)], hp.calibration_quantile, hp.calibration_rate,
                               two_sided=hp.scoring is ScoreMode.contrast)
        for label in CLASSES
    }
    logging.debug("Calibrated rate slopes: %+d -> %.4g, %+d -> %.4g", 1, slopes[1], -1, slopes[-1])
    return detector.with_slopes(slopes[1], slopes[-1])


def contrast_values(detector: PerClassDetector, data: Dataset) -> np.ndarray:
    """
    (own - other) / (own + other), where own and other are the support the
    example's label model and the opposite label model give it.

    Lies in [-1, 1]; 0 where both models support the example equally.
    """
    values = np.zeros(data.n)
    for label in CLASSES:
        indices = data.class_indices(label)
        if not indices.size:
            continue
        points = data.features[indices]
        own_model, _ = detector.for_label(label)
        other_model, _ = detector.for_label(-label)
        own = support_values(own_model, points, exclude_self=True)
        other = support_values(other_model, points, exclude_self=True)
        total = own + other
        values[indices] = np.divide(own - other, total, out=np.zeros_like(total), where=total > 0.0)
    return values


def detector_decision_values(detector: PerClassDetector, data: Dataset) -> np.ndarray:
    if data.d != detector.d:
        raise DataError(f"detector expects {detector.d} features, dataset has {data.d}")
    match detector.scoring:
        case ScoreMode.contrast:
            return contrast_values(detector, data)
        case ScoreMode.own:
            values = np.empty(data.n)
            for label in CLASSES:
                indices = data.class_indices(label)
                if indices.size:
                    model, _ = detector.for_label(label)
                    values[indices] = decision_values(model, data.features[indices])
            return values
        case _:
            raise NotImplementedError(f"Scoring mode '{detector.scoring}' is not implemented")


def noise_profile(detector: PerClassDetector, data: Dataset) -> NoiseProfile:
    values = detector_decision_values(detector, data)
    rates = np.empty(data.n)
    for label in CLASSES:
        indices = data.class_indices(label)
        if indices.size:
            _, slope = detector.for_label(label)
            rates[indices] = rate_from_decision(values[indices], slope)
    return NoiseProfile(rates)


def save_detector(detector: PerClassDetector, path: Path) -> None:
    with open(path, 'w') as detector_file:
        detector_file.write(json.dumps(detector.to_json(), sort_keys=True))


def load_detector(path: Path) -> PerClassDetector:
    with open(path, 'r') as detector_file:
        return PerClassDetector.from_json(json.loads(detector_file.read()))
