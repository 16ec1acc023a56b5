"""
Logistic base loss, the noise-augmented Elastic Net objective and its gradient.

The noise term lambda * mean(rate) is constant in the model parameters, so it
shows up in `composite_objective` but never in `composite_gradient`.
Per-example weights (see `robust_halfspace.train`) enter the data term as a
normalised weighted mean; `weights=None` means the plain mean.
"""
import math
from dataclasses import dataclass
from typing import NamedTuple, Optional

import numpy as np

from robust_halfspace.core import Dataset, HyperParams, LabeledExample, LinearModel, NoiseProfile
from robust_halfspace.errors import DataError


class Gradient(NamedTuple):
    w: np.ndarray
    b: float


@dataclass(frozen=True)
class ObjectiveValue:
    total: float
    data_term: float
    noise_term: float
    penalty_term: float


def logistic_losses(margins: np.ndarray) -> np.ndarray:
    """ln(1 + exp(-m)) in log-sum-exp form."""
    return np.logaddexp(0.0, -margins)


def logistic_slopes(margins: np.ndarray) -> np.ndarray:
    """Derivative of the logistic loss w.r.t. the margin, -1 / (1 + exp(m))."""
    return -np.exp(-np.logaddexp(0.0, margins))


def base_loss(model: LinearModel, example: LabeledExample) -> float:
    if example.x.shape[0] != model.d:
        raise DataError(f"model expects {model.d} features, example has {example.x.shape[0]}")
    margin = example.y * (float(example.x @ model.w) + model.b)
    return float(logistic_losses(np.array(margin)))


def elastic_net_penalty(w: np.ndarray, hp: HyperParams) -> float:
    return hp.alpha * ((1.0 - hp.rho) / 2.0 * float(w @ w) + hp.rho * float(np.sum(np.abs(w))))


def elastic_net_gradient(w: np.ndarray, hp: HyperParams) -> np.ndarray:
    # np.sign(0) == 0 keeps zero weights stationary under the pure penalty
    return hp.alpha * (1.0 - hp.rho) * w + hp.alpha * hp.rho * np.sign(w)


def _check_inputs(model: LinearModel, data: Dataset, noise: NoiseProfile,
                  weights: Optional[np.ndarray]) -> None:
    if model.d != data.d:
        raise DataError(f"model expects {model.d} features, dataset has {data.d}")
    if len(noise) != data.n:
        raise DataError(f"noise profile has {len(noise)} rates for {data.n} examples")
    if weights is not None and weights.shape != (data.n,):
        raise DataError(f"got {weights.shape[0]} weights for {data.n} examples")


def margins(model: LinearModel, data: Dataset) -> np.ndarray:
    return data.labels * model.decision_function(data.features)


def data_term(model: LinearModel, data: Dataset, weights: Optional[np.ndarray] = None) -> float:
    losses = logistic_losses(margins(model, data))
    if weights is None:
        return float(np.mean(losses))
    return float(weights @ losses / np.sum(weights))


def composite_objective(model: LinearModel, data: Dataset, noise: NoiseProfile, hp: HyperParams,
                        weights: Optional[np.ndarray] = None) -> ObjectiveValue:
    _check_inputs(model, data, noise, weights)
    data_value = data_term(model, data, weights)
    noise_value = hp.lam * float(np.mean(noise.rates))
    penalty_value = elastic_net_penalty(model.w, hp)
    return ObjectiveValue(
        total=math.fsum((data_value, noise_value, penalty_value)),
        data_term=data_value,
        noise_term=noise_value,
        penalty_term=penalty_value,
    )


def composite_gradient(model: LinearModel, data: Dataset, noise: NoiseProfile, hp: HyperParams,
                       weights: Optional[np.ndarray] = None) -> Gradient:
    _check_inputs(model, data, noise, weights)
    slopes = logistic_slopes(margins(model, data)) * data.labels
    if weights is None:
        coefficients = slopes / data.n
    else:
        coefficients = slopes * weights / np.sum(weights)
    grad_w = data.features.T @ coefficients + elastic_net_gradient(model.w, hp)
    grad_b = float(np.sum(coefficients))
    return Gradient(grad_w, grad_b)
