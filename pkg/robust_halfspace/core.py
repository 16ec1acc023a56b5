import csv
import json
import logging
import math
from dataclasses import dataclass, fields, replace, asdict
from enum import Enum
from pathlib import Path
from typing import Iterator, Optional, Sequence
try:
    from typing import Self
except ImportError:  # Python < 3.11
    from typing_extensions import Self

import numpy as np

from robust_halfspace.errors import ConfigError, DataError, NumericalError


def frozen_array(values, dtype=np.float64) -> np.ndarray:
    """Copy `values` into a new read-only numpy array."""
    array = np.array(values, dtype=dtype, copy=True)
    array.setflags(write=False)
    return array


@dataclass(frozen=True, eq=False)
class LabeledExample:
    x: np.ndarray
    y: int

    def __post_init__(self):
        object.__setattr__(self, 'x', frozen_array(self.x))
        if self.x.ndim != 1:
            raise DataError(f"feature vector must be one-dimensional, got shape {self.x.shape}")
        if not np.all(np.isfinite(self.x)):
            raise DataError("feature vector contains NaN or Inf entries")
        if self.y not in (-1, 1):
            raise DataError(f"label must be -1 or +1, got {self.y!r}")
        object.__setattr__(self, 'y', int(self.y))

    def __eq__(self, other) -> bool:
        if not isinstance(other, LabeledExample):
            return NotImplemented
        return self.y == other.y and np.array_equal(self.x, other.x)

    def __hash__(self):
        return hash((self.y, self.x.tobytes()))


@dataclass(frozen=True, eq=False)
class Dataset:
    """
    Feature matrix `features` of shape (n, d) and labels in {-1, +1}.

    Stored column-wise for vectorised loss evaluation; `examples` gives the
    per-row view.
    """
    features: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        features = frozen_array(self.features)
        labels = frozen_array(self.labels, dtype=np.int64)
        if features.ndim != 2:
            raise DataError(f"features must be a 2-d matrix, got shape {features.shape}")
        if features.shape[0] == 0:
            raise DataError("dataset is empty")
        if features.shape[1] == 0:
            raise DataError("dataset has zero feature columns")
        if labels.shape != (features.shape[0],):
            raise DataError(f"got {labels.shape[0]} labels for {features.shape[0]} examples")
        if not np.all(np.isfinite(features)):
            row = int(np.argwhere(~np.isfinite(features))[0, 0])
            raise DataError(f"example {row} contains NaN or Inf entries")
        if not np.all(np.isin(labels, (-1, 1))):
            raise DataError("labels must all be -1 or +1")
        object.__setattr__(self, 'features', features)
        object.__setattr__(self, 'labels', labels)

    @classmethod
    def from_examples(cls, examples: Sequence[LabeledExample]) -> Self:
        if len(examples) == 0:
            raise DataError("dataset is empty")
        dims = {example.x.shape[0] for example in examples}
        if len(dims) != 1:
            raise DataError(f"inconsistent feature dimensions: {sorted(dims)}")
        return cls(np.stack([example.x for example in examples]),
                   np.array([example.y for example in examples]))

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def d(self) -> int:
        return self.features.shape[1]

    @property
    def examples(self) -> Iterator[LabeledExample]:
        for x, y in zip(self.features, self.labels):
            yield LabeledExample(x, int(y))

    def subset(self, indices) -> Self:
        indices = np.asarray(indices, dtype=np.int64)
        return Dataset(self.features[indices], self.labels[indices])

    def class_indices(self, label: int) -> np.ndarray:
        return np.flatnonzero(self.labels == label)

    def __len__(self) -> int:
        return self.n

    def __eq__(self, other) -> bool:
        if not isinstance(other, Dataset):
            return NotImplemented
        return (np.array_equal(self.features, other.features)
                and np.array_equal(self.labels, other.labels))


@dataclass(frozen=True, eq=False)
class LinearModel:
    w: np.ndarray
    b: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, 'w', frozen_array(self.w))
        object.__setattr__(self, 'b', float(self.b))
        if self.w.ndim != 1:
            raise DataError(f"weight vector must be one-dimensional, got shape {self.w.shape}")
        if not (np.all(np.isfinite(self.w)) and math.isfinite(self.b)):
            raise NumericalError("model parameters must be finite")

    @classmethod
    def zeros(cls, d: int) -> Self:
        return cls(np.zeros(d), 0.0)

    @property
    def d(self) -> int:
        return self.w.shape[0]

    def decision_function(self, features: np.ndarray) -> np.ndarray:
        features = np.asarray(features, dtype=np.float64)
        if features.shape[-1] != self.d:
            raise DataError(f"expected {self.d} features, got {features.shape[-1]}")
        return features @ self.w + self.b

    def predict_many(self, features: np.ndarray) -> np.ndarray:
        # sign(0) = +1
        return np.where(self.decision_function(features) >= 0.0, 1, -1)

    def to_json(self) -> dict:
        return {'w': [float(value) for value in self.w], 'b': self.b}

    @classmethod
    def from_json(cls, data: dict) -> Self:
        try:
            return cls(np.array(data['w'], dtype=np.float64), float(data['b']))
        except (KeyError, TypeError, ValueError) as error:
            raise DataError(f"malformed model JSON: {error!r}") from error

    def __eq__(self, other) -> bool:
        if not isinstance(other, LinearModel):
            return NotImplemented
        return self.b == other.b and np.array_equal(self.w, other.w)


@dataclass(frozen=True, eq=False)
class NoiseProfile:
    rates: np.ndarray

    def __post_init__(self):
        rates = frozen_array(self.rates)
        if rates.ndim != 1:
            raise DataError(f"noise rates must be one-dimensional, got shape {rates.shape}")
        if not np.all((rates >= 0.0) & (rates <= 1.0)):
            raise DataError("noise rates must lie in [0, 1]")
        object.__setattr__(self, 'rates', rates)

    @classmethod
    def clean(cls, n: int) -> Self:
        return cls(np.zeros(n))

    def __len__(self) -> int:
        return self.rates.shape[0]


class ScoreMode(Enum):
    own = 'Own label'
    contrast = 'Own versus other label'


@dataclass(frozen=True)
class HyperParams:
    """
    Every tunable constant of the learner, range-checked on construction.

    `nu` and `gamma` may be left as None; the detector then derives them from
    the data (see `robust_halfspace.noise`). `scoring` selects how the
    detector turns its two class models into one value per example.
    """
    lam: float = 1.0
    alpha: float = 0.01
    rho: float = 0.5
    eta: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    nu: Optional[float] = None
    gamma: Optional[float] = None
    tau: float = 0.9
    max_iterations: int = 1000
    tol: float = 1e-6
    calibration_quantile: float = 0.9
    calibration_rate: float = 0.1
    smo_tol: float = 1e-4
    smo_max_iterations: int = 100_000
    scoring: ScoreMode = ScoreMode.contrast

    def __post_init__(self):
        if not isinstance(self.scoring, ScoreMode):
            try:
                object.__setattr__(self, 'scoring', ScoreMode[str(self.scoring).strip()])
            except KeyError as error:
                choices = ', '.join(mode.name for mode in ScoreMode)
                raise ConfigError(f"hyperparameter 'scoring' must be one of {choices}, "
                                  f"got {self.scoring!r}") from error
        checks = [
            ('lam', self.lam >= 0, "must be >= 0"),
            ('alpha', self.alpha >= 0, "must be >= 0"),
            ('rho', 0 <= self.rho <= 1, "must lie in [0, 1]"),
            ('eta', self.eta > 0, "must be > 0"),
            ('beta1', 0 <= self.beta1 < 1, "must lie in [0, 1)"),
            ('beta2', 0 <= self.beta2 < 1, "must lie in [0, 1)"),
            ('epsilon', self.epsilon > 0, "must be > 0"),
            ('nu', self.nu is None or 0 < self.nu <= 1, "must lie in (0, 1]"),
            ('gamma', self.gamma is None or self.gamma > 0, "must be > 0"),
            ('tau', 0 < self.tau <= 1, "must lie in (0, 1]"),
            ('max_iterations', isinstance(self.max_iterations, int) and self.max_iterations >= 1,
             "must be a positive integer"),
            ('tol', self.tol >= 0, "must be >= 0"),
            ('calibration_quantile', 0 < self.calibration_quantile < 1, "must lie in (0, 1)"),
            ('calibration_rate', 0 < self.calibration_rate < 0.5, "must lie in (0, 0.5)"),
            ('smo_tol', self.smo_tol > 0, "must be > 0"),
            ('smo_max_iterations', isinstance(self.smo_max_iterations, int) and self.smo_max_iterations >= 1,
             "must be a positive integer"),
        ]
        for name, valid, message in checks:
            value = getattr(self, name)
            if isinstance(value, float) and math.isnan(value):
                valid = False
            if not valid:
                raise ConfigError(f"hyperparameter '{name}' {message}, got {value!r}")

    def replace(self, **overrides) -> Self:
        unknown = set(overrides) - {f.name for f in fields(self)}
        if unknown:
            raise ConfigError(f"unknown hyperparameter(s): {', '.join(sorted(unknown))}")
        return replace(self, **overrides)

    def to_json(self) -> dict:
        return {**asdict(self), 'scoring': self.scoring.name}

    @classmethod
    def from_json(cls, data: dict) -> Self:
        return cls().replace(**data)


def predict(model: LinearModel, x) -> int:
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (model.d,):
        raise DataError(f"expected a vector of {model.d} features, got shape {x.shape}")
    return 1 if float(x @ model.w) + model.b >= 0.0 else -1


def _parse_label(text: str, line_number: int) -> float:
    try:
        label = float(text)
    except ValueError as error:
        raise DataError(f"line {line_number}: label {text!r} is not numeric") from error
    if label not in (-1.0, 0.0, 1.0):
        raise DataError(f"line {line_number}: label {text!r} is not one of -1, +1, 0, 1")
    return label


def load_dataset(path: Path, data_format: str = 'csv', header: bool = False) -> Dataset:
    """
    Read d feature columns followed by one label column per row.

    Labels given as 0/1 are remapped to -1/+1. Blank lines are ignored, line
    numbers in error messages are 1-based and count the header.
    """
    if data_format != 'csv':
        raise ConfigError(f"unsupported data format {data_format!r}")
    path = Path(path)
    logging.info("Loading dataset from %s", path)
    rows: list[list[float]] = []
    labels: list[float] = []
    try:
        with open(path, 'r', newline='') as csv_file:
            for line_number, row in enumerate(csv.reader(csv_file), start=1):
                if header and line_number == 1:
                    continue
                if not row or all(cell.strip() == '' for cell in row):
                    continue
                if len(row) < 2:
                    raise DataError(f"line {line_number}: expected features and a label, got {len(row)} column(s)")
                try:
                    values = [float(cell) for cell in row[:-1]]
                except ValueError as error:
                    raise DataError(f"line {line_number}: malformed row: {error}") from error
                if not all(math.isfinite(value) for value in values):
                    raise DataError(f"line {line_number}: feature values must be finite")
                if rows and len(values) != len(rows[0]):
                    raise DataError(f"line {line_number}: expected {len(rows[0])} features, got {len(values)}")
                rows.append(values)
                labels.append(_parse_label(row[-1].strip(), line_number))
    except OSError as error:
        raise DataError(f"cannot read dataset {path}: {error}") from error
    if not rows:
        raise DataError(f"dataset {path} contains no examples")
    label_array = np.array(labels)
    if np.any(label_array == 0.0):
        if np.any(label_array == -1.0):
            raise DataError("labels mix the 0/1 and -1/+1 encodings")
        label_array = np.where(label_array == 0.0, -1.0, 1.0)
    return Dataset(np.array(rows), label_array.astype(np.int64))


def save_dataset(data: Dataset, path: Path, header: bool = False) -> None:
    with open(path, 'w', newline='') as csv_file:
        writer = csv.writer(csv_file, lineterminator='\n')
        if header:
            writer.writerow([f"x{index}" for index in range(data.d)] + ['y'])
        for x, y in zip(data.features, data.labels):
            writer.writerow([repr(float(value)) for value in x] + [int(y)])


def save_model(model: LinearModel, path: Path) -> None:
    with open(path, 'w') as model_file:
        model_file.write(json.dumps(model.to_json(), sort_keys=True))


def load_model(path: Path) -> LinearModel:
    with open(path, 'r') as model_file:
        return LinearModel.from_json(json.loads(model_file.read()))
