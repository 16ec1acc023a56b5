import json
import logging
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Optional

import numpy as np

from robust_halfspace.core import Dataset, HyperParams, LinearModel, NoiseProfile
from robust_halfspace.errors import ConfigError, InfeasibleError
from robust_halfspace.loss import (Gradient, ObjectiveValue, composite_gradient, composite_objective,
                                   elastic_net_gradient)
from robust_halfspace.noise import PerClassDetector, fit_detector, noise_profile
from robust_halfspace.optim import ConvergenceRecord, Optimizer, Problem, run_until_converged


class NoisePolicy(Enum):
    skip = 'Skip'
    downweight = 'Down-weight'
    off = 'Off'


@dataclass(frozen=True)
class TrainConfig:
    hp: HyperParams = field(default_factory=HyperParams)
    optimizer: Optimizer = Optimizer.adam
    noise_policy: NoisePolicy = NoisePolicy.downweight
    seed: int = 0
    batch_size: Optional[int] = None
    refit_every: int = 0
    expected_noise_rate: Optional[float] = None

    def __post_init__(self):
        if self.batch_size is not None and self.batch_size < 1:
            raise ConfigError(f"'batch_size' must be a positive integer, got {self.batch_size!r}")
        if self.refit_every < 0:
            raise ConfigError(f"'refit_every' must be >= 0, got {self.refit_every!r}")


@dataclass(frozen=True, eq=False)
class TrainedModel:
    model: LinearModel
    convergence: ConvergenceRecord
    noise: NoiseProfile
    skipped_count: int
    weights: Optional[np.ndarray] = None
    detector: Optional[PerClassDetector] = None

    def to_json(self) -> dict:
        return {
            'model': self.model.to_json(),
            'convergence': self.convergence.to_json(),
            'rates': [float(rate) for rate in self.noise.rates],
            'skipped_count': self.skipped_count,
        }


class CompositeProblem(Problem):
    """The noise-augmented Elastic Net objective over fixed data, rates and weights."""

    def __init__(self, data: Dataset, noise: NoiseProfile, hp: HyperParams,
                 weights: Optional[np.ndarray] = None):
        self.data = data
        self.noise = noise
        self.hp = hp
        self.weights = weights
        self.n = data.n

    def evaluate(self, model: LinearModel) -> ObjectiveValue:
        return composite_objective(model, self.data, self.noise, self.hp, self.weights)

    def objective(self, model: LinearModel) -> float:
        return self.evaluate(model).total

    def gradient(self, model: LinearModel, batch: Optional[np.ndarray] = None) -> Gradient:
        if batch is None:
            return composite_gradient(model, self.data, self.noise, self.hp, self.weights)
        weights = None if self.weights is None else self.weights[batch]
        if weights is not None and not np.any(weights > 0):
            # every example of this batch is skipped, only the penalty pulls
            return Gradient(elastic_net_gradient(model.w, self.hp), 0.0)
        return composite_gradient(model, self.data.subset(batch), NoiseProfile(self.noise.rates[batch]),
                                  self.hp, weights)


def effective_weight(rate: float, policy: NoisePolicy, tau: float) -> float:
    match policy:
        case NoisePolicy.off:
            return 1.0
        case NoisePolicy.downweight:
            return 1.0 - rate
        case NoisePolicy.skip:
            return 0.0 if rate > tau else 1.0
        case _:
            raise NotImplementedError(f"Noise policy '{policy}' is not implemented")


def effective_weights(rates: np.ndarray, policy: NoisePolicy, tau: float) -> np.ndarray:
    return np.array([effective_weight(float(rate), policy, tau) for rate in rates])


def fit_weighted(data: Dataset, noise: NoiseProfile, weights: Optional[np.ndarray], cfg: TrainConfig,
                 refresh=None) -> tuple[LinearModel, ConvergenceRecord]:
    """Minimise the composite objective from the zero model with fixed weights."""
    if weights is not None and not np.sum(weights) > 0:
        raise InfeasibleError("every example has zero weight, nothing is left to learn from")
    problem = CompositeProblem(data, noise, cfg.hp, weights)
    return run_until_converged(
        problem,
        LinearModel.zeros(data.d),
        cfg.optimizer,
        cfg.hp,
        batch_size=cfg.batch_size,
        seed=cfg.seed,
        refresh=refresh,
        refresh_every=cfg.refit_every if refresh is not None else 0,
    )


def adaptive_fit(data: Dataset, cfg: TrainConfig, trusted: Optional[Dataset] = None) -> TrainedModel:
    """
    Score every example, then fit the weighted objective.

    The detector is fit once up front on `trusted` if given, else on `data`
    itself. With `cfg.refit_every > 0` it is refit periodically on the
    examples it currently considers clean (rate <= tau).
    """
    hp = cfg.hp
    if cfg.noise_policy is NoisePolicy.off:
        logging.info("Training on %d examples with the noise detector switched off", data.n)
        model, record = fit_weighted(data, NoiseProfile.clean(data.n), None, cfg)
        return TrainedModel(model, record, NoiseProfile.clean(data.n), skipped_count=0)

    detector = fit_detector(trusted if trusted is not None else data, hp, cfg.expected_noise_rate)
    profile = noise_profile(detector, data)
    weights = effective_weights(profile.rates, cfg.noise_policy, hp.tau)
    if not np.sum(weights) > 0:
        raise InfeasibleError(f"every one of the {data.n} examples was scored as noise, nothing is left to learn from")
    state = {'detector': detector, 'profile': profile, 'weights': weights}

    def refresh(_: LinearModel) -> CompositeProblem:
        clean = np.flatnonzero(state['profile'].rates <= hp.tau)
        try:
            state['detector'] = fit_detector(data.subset(clean), hp, cfg.expected_noise_rate)
        except InfeasibleError as error:
            logging.warning("Keeping the previous detector, refit is infeasible: %s", error)
            return CompositeProblem(data, state['profile'], hp, state['weights'])
        new_profile = noise_profile(state['detector'], data)
        new_weights = effective_weights(new_profile.rates, cfg.noise_policy, hp.tau)
        if np.sum(new_weights) > 0:
            state['profile'], state['weights'] = new_profile, new_weights
        return CompositeProblem(data, state['profile'], hp, state['weights'])

    logging.info("Training on %d examples, policy %s, mean noise rate %.4f",
                 data.n, cfg.noise_policy.name, float(np.mean(profile.rates)))
    model, record = fit_weighted(data, profile, weights, cfg,
                                 refresh=refresh if cfg.refit_every > 0 else None)
    final_weights = state['weights']
    skipped = int(np.sum(final_weights == 0.0)) if cfg.noise_policy is NoisePolicy.skip else 0
    logging.info("Finished after %d iterations (converged=%s), %d examples skipped",
                 record.iterations_used, record.converged, skipped)
    return TrainedModel(model, record, state['profile'], skipped, final_weights, state['detector'])


def save_trained_model(trained: TrainedModel, path: Path) -> None:
    with open(path, 'w') as model_file:
        model_file.write(json.dumps(trained.to_json(), sort_keys=True))
