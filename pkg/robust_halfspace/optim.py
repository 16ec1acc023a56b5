import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Optional, Protocol
try:
    from typing import Self
except ImportError:  # Python < 3.11
    from typing_extensions import Self

import numpy as np

from robust_halfspace.core import HyperParams, LinearModel, frozen_array
from robust_halfspace.errors import NumericalError
from robust_halfspace.loss import Gradient


CONSECUTIVE_SMALL_DECREASES = 3


class Optimizer(Enum):
    adam = 'Adam'
    sgd = 'SGD'


class Problem(Protocol):
    """Objective/gradient provider consumed by `run_until_converged`."""
    n: int

    def objective(self, model: LinearModel) -> float:
        ...

    def gradient(self, model: LinearModel, batch: Optional[np.ndarray] = None) -> Gradient:
        ...


@dataclass(frozen=True, eq=False)
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    def __post_init__(self):
        object.__setattr__(self, 'm', frozen_array(self.m))
        object.__setattr__(self, 'v', frozen_array(self.v))

    @classmethod
    def initial(cls, d: int) -> Self:
        # one extra slot for the bias
        return cls(np.zeros(d + 1), np.zeros(d + 1), 0)


@dataclass(frozen=True)
class ConvergenceRecord:
    iterations_used: int
    converged: bool
    final_objective: float
    objective_trace: tuple[float, ...] = field(default=())
    diverged: bool = False

    def to_json(self) -> dict:
        return {
            'iterations_used': self.iterations_used,
            'converged': self.converged,
            'diverged': self.diverged,
            'final_objective': self.final_objective,
            'objective_trace': list(self.objective_trace),
        }


def _checked(grad: Gradient) -> tuple[np.ndarray, float]:
    grad_w = np.asarray(grad.w, dtype=np.float64)
    grad_b = float(grad.b)
    if not (np.all(np.isfinite(grad_w)) and math.isfinite(grad_b)):
        raise NumericalError("gradient contains NaN or Inf entries")
    return grad_w, grad_b


def sgd_step(model: LinearModel, grad: Gradient, hp: HyperParams) -> LinearModel:
    grad_w, grad_b = _checked(grad)
    return LinearModel(model.w - hp.eta * grad_w, model.b - hp.eta * grad_b)


def adam_step(model: LinearModel, grad: Gradient, state: AdamState,
              hp: HyperParams) -> tuple[LinearModel, AdamState]:
    """
    One Adam update with the stabiliser inside the square root:
    theta -= eta * m_hat / sqrt(v_hat + epsilon).
    """
    grad_w, grad_b = _checked(grad)
    g = np.append(grad_w, grad_b)
    t = state.t + 1
    m = hp.beta1 * state.m + (1.0 - hp.beta1) * g
    v = hp.beta2 * state.v + (1.0 - hp.beta2) * (g * g)
    m_hat = m / (1.0 - hp.beta1 ** t)
    v_hat = v / (1.0 - hp.beta2 ** t)
    step = hp.eta * m_hat / np.sqrt(v_hat + hp.epsilon)
    new_model = LinearModel(model.w - step[:-1], model.b - step[-1])
    return new_model, AdamState(m, v, t)


def _infinity_norm(grad: Gradient) -> float:
    return max(float(np.max(np.abs(grad.w), initial=0.0)), abs(float(grad.b)))


def _finite_gradient(grad: Gradient) -> bool:
    return bool(np.all(np.isfinite(grad.w))) and math.isfinite(float(grad.b))


def run_until_converged(problem: Problem,
                        initial: LinearModel,
                        optimizer: Optimizer,
                        hp: HyperParams,
                        batch_size: Optional[int] = None,
                        seed: int = 0,
                        refresh: Optional[Callable[[LinearModel], Problem]] = None,
                        refresh_every: int = 0,
                        ) -> tuple[LinearModel, ConvergenceRecord]:
    """
    Iterate full passes until the objective settles.

    Stops when the relative objective change stays below `hp.tol` for three
    consecutive iterations, when the gradient infinity norm drops below
    `hp.tol`, or after `hp.max_iterations` iterations. A non-finite
    objective or gradient ends the run with `diverged=True` and returns the
    best model seen so far.

    With `batch_size` set, one iteration is one shuffled pass of mini-batch
    steps. With `refresh` set, the problem is rebuilt from the current model
    every `refresh_every` iterations while the optimizer state carries over.
    """
    rng = np.random.default_rng(seed)
    model = initial
    adam_state = AdamState.initial(initial.d)
    previous = problem.objective(model)
    best_model, best_value = model, previous
    trace: list[float] = []
    small_changes = 0
    converged = False

    def step(current: LinearModel, grad: Gradient) -> LinearModel:
        nonlocal adam_state
        match optimizer:
            case Optimizer.sgd:
                return sgd_step(current, grad, hp)
            case Optimizer.adam:
                current, adam_state = adam_step(current, grad, adam_state, hp)
                return current
            case _:
                raise NotImplementedError(f"Optimizer '{optimizer}' is not implemented")

    def diverged(reason: str) -> tuple[LinearModel, ConvergenceRecord]:
        logging.warning("Optimization diverged after %d iterations: %s", len(trace), reason)
        return best_model, ConvergenceRecord(
            iterations_used=len(trace),
            converged=False,
            final_objective=best_value,
            objective_trace=tuple(trace),
            diverged=True,
        )

    if not math.isfinite(previous):
        return diverged("initial objective is not finite")

    for iteration in range(1, hp.max_iterations + 1):
        full_gradient = problem.gradient(model)
        if not _finite_gradient(full_gradient):
            return diverged("gradient is not finite")
        if _infinity_norm(full_gradient) < hp.tol:
            converged = True
            break
        try:
            if batch_size is None:
                model = step(model, full_gradient)
            else:
                order = rng.permutation(problem.n)
                for start in range(0, problem.n, batch_size):
                    batch_gradient = problem.gradient(model, order[start:start + batch_size])
                    if not _finite_gradient(batch_gradient):
                        return diverged("mini-batch gradient is not finite")
                    model = step(model, batch_gradient)
        except NumericalError as error:
            return diverged(str(error))
        value = problem.objective(model)
        trace.append(value)
        if not math.isfinite(value):
            return diverged("objective is not finite")
        logging.debug("iteration %d: objective %.12g", iteration, value)
        if value < best_value:
            best_model, best_value = model, value
        change = abs(previous - value) / max(abs(previous), 1e-300)
        small_changes = small_changes + 1 if change < hp.tol else 0
        previous = value
        if small_changes >= CONSECUTIVE_SMALL_DECREASES:
            converged = True
            break
        if refresh is not None and refresh_every > 0 and iteration % refresh_every == 0:
            problem = refresh(model)
            previous = problem.objective(model)
            small_changes = 0

    return model, ConvergenceRecord(
        iterations_used=len(trace),
        converged=converged,
        final_objective=problem.objective(model),
        objective_trace=tuple(trace),
    )
