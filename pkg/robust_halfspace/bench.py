"""
Synthetic halfspace benchmark: data generation, malicious noise, baselines and metrics.

Accuracy is always measured on a clean held-out split; noise is injected into
the training split only.
"""
import csv
import logging
import math
import statistics
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Optional, Protocol, Sequence
try:
    from typing import Self
except ImportError:  # Python < 3.11
    from typing_extensions import Self

import numpy as np

from robust_halfspace.core import Dataset, HyperParams, LinearModel, NoiseProfile
from robust_halfspace.errors import ConfigError, DataError
from robust_halfspace.loss import Gradient, elastic_net_gradient, elastic_net_penalty
from robust_halfspace.optim import ConvergenceRecord, Optimizer, run_until_converged
from robust_halfspace.train import CompositeProblem, NoisePolicy, TrainConfig, adaptive_fit


MAX_RESAMPLE_ROUNDS = 100
TEST_FRACTION = 0.2
TREE_MAX_DEPTH = 5


class NoiseMode(Enum):
    random_flip = 'Random label flip'
    boundary_flip = 'Boundary label flip'
    feature_corrupt = 'Feature corruption'


class Method(Enum):
    # declaration order is the report column order
    proposed = 'Proposed Model'
    linear_svm = 'SVM'
    logistic = 'Logistic Regression'
    decision_tree = 'Decision Tree'


class Classifier(Protocol):
    def predict_many(self, features: np.ndarray) -> np.ndarray:
        ...


@dataclass(frozen=True)
class NoiseSpec:
    rate: float
    mode: NoiseMode = NoiseMode.random_flip
    seed: int = 0

    def __post_init__(self):
        if not 0 <= self.rate < 1:
            raise ConfigError(f"noise 'rate' must lie in [0, 1), got {self.rate!r}")

    def corrupted_count(self, n: int) -> int:
        # the epsilon keeps products like 0.3 * 10 = 3.0000000000000004 exact
        return int(math.floor(self.rate * n + 1e-9))


@dataclass(frozen=True)
class MetricsRow:
    noise_rate: float
    accuracy_by_method: dict[Method, float]
    sensitivity_by_method: dict[Method, float]
    iterations_by_method: dict[Method, int]
    accuracy_std_by_method: dict[Method, float] = field(default_factory=dict)


def gen_halfspace(n: int, d: int, margin: float = 0.0, seed: int = 0,
                  true_model: Optional[LinearModel] = None) -> tuple[Dataset, LinearModel]:
    """
    Draw standard Gaussian features labelled by a halfspace.

    Unless `true_model` is given, the normal is a random unit vector and the
    bias is drawn from [-0.1, 0.1]. Points closer than `margin` to the
    boundary are redrawn.
    """
    if n < 2:
        raise ConfigError(f"'n' must be >= 2, got {n!r}")
    if d < 1:
        raise ConfigError(f"'d' must be >= 1, got {d!r}")
    if margin < 0:
        raise ConfigError(f"'margin' must be >= 0, got {margin!r}")
    rng = np.random.default_rng(seed)
    if true_model is None:
        direction = rng.standard_normal(d)
        true_model = LinearModel(direction / np.linalg.norm(direction), rng.uniform(-0.1, 0.1))
    elif true_model.d != d:
        raise DataError(f"true model has {true_model.d} weights, expected {d}")

    for _ in range(MAX_RESAMPLE_ROUNDS):
        features = rng.standard_normal((n, d))
        for _ in range(MAX_RESAMPLE_ROUNDS):
            too_close = np.abs(true_model.decision_function(features)) < margin
            if not np.any(too_close):
                break
            features[too_close] = rng.standard_normal((int(np.sum(too_close)), d))
        else:
            raise DataError(f"could not keep every point {margin} away from the boundary "
                            f"within {MAX_RESAMPLE_ROUNDS} resampling rounds")
        labels = true_model.predict_many(features)
        if np.any(labels == 1) and np.any(labels == -1):
            return Dataset(features, labels), true_model
    raise DataError(f"could not draw both classes within {MAX_RESAMPLE_ROUNDS} attempts")


def inject_noise(data: Dataset, spec: NoiseSpec, true_model: LinearModel) -> tuple[Dataset, np.ndarray]:
    """Corrupt exactly floor(rate * n) distinct examples, returning their sorted indices."""
    count = spec.corrupted_count(data.n)
    if count == 0:
        return data, np.array([], dtype=np.int64)
    rng = np.random.default_rng(spec.seed)
    features = np.array(data.features)
    labels = np.array(data.labels)
    match spec.mode:
        case NoiseMode.random_flip:
            chosen = rng.choice(data.n, size=count, replace=False)
            labels[chosen] = -labels[chosen]
        case NoiseMode.boundary_flip:
            distance = np.abs(true_model.decision_function(data.features))
            chosen = np.argsort(distance, kind='stable')[:count]
            labels[chosen] = -labels[chosen]
        case NoiseMode.feature_corrupt:
            chosen = rng.choice(data.n, size=count, replace=False)
            scale = float(np.std(data.features)) or 1.0
            features[chosen] = rng.normal(0.0, 3.0 * scale, size=(count, data.d))
            labels[chosen] = -true_model.predict_many(features[chosen])
        case _:
            raise NotImplementedError(f"Noise mode '{spec.mode}' is not implemented")
    logging.debug("Injected %s noise into %d of %d examples", spec.mode.name, count, data.n)
    return Dataset(features, labels), np.sort(chosen)


def split_train_test(data: Dataset, test_fraction: float = TEST_FRACTION) -> tuple[Dataset, Dataset]:
    test_size = max(1, int(round(data.n * test_fraction)))
    if test_size >= data.n:
        raise ConfigError(f"cannot hold out {test_size} of {data.n} examples")
    cut = data.n - test_size
    return data.subset(np.arange(cut)), data.subset(np.arange(cut, data.n))


class HingeProblem:
    """Mean hinge loss plus an L2 penalty, minimised by subgradient descent."""

    def __init__(self, data: Dataset, hp: HyperParams):
        self.data = data
        self.hp = hp.replace(rho=0.0)
        self.n = data.n

    def objective(self, model: LinearModel) -> float:
        margins = self.data.labels * model.decision_function(self.data.features)
        return float(np.mean(np.maximum(0.0, 1.0 - margins))) + elastic_net_penalty(model.w, self.hp)

    def gradient(self, model: LinearModel, batch: Optional[np.ndarray] = None) -> Gradient:
        data = self.data if batch is None else self.data.subset(batch)
        margins = data.labels * model.decision_function(data.features)
        coefficients = np.where(margins < 1.0, -data.labels, 0.0) / data.n
        grad_w = data.features.T @ coefficients + elastic_net_gradient(model.w, self.hp)
        return Gradient(grad_w, float(np.sum(coefficients)))


@dataclass(frozen=True)
class TreeNode:
    label: int
    feature: Optional[int] = None
    threshold: float = 0.0
    left: Optional['TreeNode'] = None
    right: Optional['TreeNode'] = None

    @property
    def is_leaf(self) -> bool:
        return self.feature is None


@dataclass(frozen=True)
class TreeModel:
    """Axis-aligned binary tree; `x[feature] <= threshold` goes left."""
    root: TreeNode
    d: int

    def predict_one(self, x: np.ndarray) -> int:
        node = self.root
        while not node.is_leaf:
            node = node.left if x[node.feature] <= node.threshold else node.right
        return node.label

    def predict_many(self, features: np.ndarray) -> np.ndarray:
        features = np.asarray(features, dtype=np.float64)
        if features.shape[-1] != self.d:
            raise DataError(f"expected {self.d} features, got {features.shape[-1]}")
        return np.array([self.predict_one(x) for x in features], dtype=np.int64)

    @property
    def depth(self) -> int:
        def node_depth(node: TreeNode) -> int:
            if node.is_leaf:
                return 0
            return 1 + max(node_depth(node.left), node_depth(node.right))
        return node_depth(self.root)


def _gini(positive_fraction: np.ndarray) -> np.ndarray:
    return 2.0 * positive_fraction * (1.0 - positive_fraction)


def _majority(labels: np.ndarray) -> int:
    # ties go to +1, as in predict
    return 1 if np.sum(labels == 1) * 2 >= labels.shape[0] else -1


def _best_split(features: np.ndarray, labels: np.ndarray) -> Optional[tuple[int, float, float]]:
    size = labels.shape[0]
    best = None
    counts = np.arange(1, size)
    for feature in range(features.shape[1]):
        order = np.argsort(features[:, feature], kind='stable')
        values = features[order, feature]
        positives = np.cumsum(labels[order] == 1)[:-1]
        left_gini = _gini(positives / counts)
        right_gini = _gini((positives[-1] + (labels[order[-1]] == 1) - positives) / (size - counts))
        impurity = (counts * left_gini + (size - counts) * right_gini) / size
        impurity = np.where(values[:-1] < values[1:], impurity, np.inf)
        position = int(np.argmin(impurity))
        if np.isfinite(impurity[position]) and (best is None or impurity[position] < best[2]):
            threshold = 0.5 * (values[position] + values[position + 1])
            best = (feature, float(threshold), float(impurity[position]))
    return best


def _grow(features: np.ndarray, labels: np.ndarray, depth: int, max_depth: int) -> TreeNode:
    label = _majority(labels)
    parent_gini = float(_gini(np.array(np.mean(labels == 1))))
    if depth >= max_depth or labels.shape[0] < 2 or parent_gini == 0.0:
        return TreeNode(label)
    split = _best_split(features, labels)
    if split is None or split[2] >= parent_gini:
        return TreeNode(label)
    feature, threshold, _ = split
    goes_left = features[:, feature] <= threshold
    return TreeNode(
        label=label,
        feature=feature,
        threshold=threshold,
        left=_grow(features[goes_left], labels[goes_left], depth + 1, max_depth),
        right=_grow(features[~goes_left], labels[~goes_left], depth + 1, max_depth),
    )


def fit_tree(data: Dataset, max_depth: int = TREE_MAX_DEPTH) -> TreeModel:
    """Depth-limited CART with Gini splitting; not part of the learner, only a comparison column."""
    return TreeModel(_grow(np.asarray(data.features), np.asarray(data.labels), 0, max_depth), data.d)


@dataclass(frozen=True)
class BaselineFit:
    model: Classifier
    convergence: Optional[ConvergenceRecord] = None

    @property
    def iterations(self) -> int:
        return 0 if self.convergence is None else self.convergence.iterations_used


def fit_baseline(data: Dataset, method: Method, hp: HyperParams,
                 optimizer: Optimizer = Optimizer.sgd, seed: int = 0) -> BaselineFit:
    if not (np.any(data.labels == 1) and np.any(data.labels == -1)):
        raise DataError("baselines need examples of both classes")
    match method:
        case Method.logistic:
            # the unweighted learner: same problem and optimizer stack, L2 only, no noise term
            ridge = hp.replace(rho=0.0, lam=0.0)
            problem = CompositeProblem(data, NoiseProfile.clean(data.n), ridge)
            model, record = run_until_converged(problem, LinearModel.zeros(data.d), optimizer, ridge, seed=seed)
            return BaselineFit(model, record)
        case Method.linear_svm:
            problem = HingeProblem(data, hp)
            model, record = run_until_converged(problem, LinearModel.zeros(data.d), Optimizer.sgd, hp, seed=seed)
            return BaselineFit(model, record)
        case Method.decision_tree:
            return BaselineFit(fit_tree(data))
        case _:
            raise ConfigError(f"'{method.name}' is not a baseline method")


def accuracy(model: Classifier, data: Dataset) -> float:
    """(true positives + true negatives) / total samples"""
    return float(np.count_nonzero(model.predict_many(data.features) == data.labels)) / data.n


def error_rate(model: Classifier, data: Dataset) -> float:
    return float(np.count_nonzero(model.predict_many(data.features) != data.labels)) / data.n


def noise_sensitivity(accuracies: Sequence[tuple[float, float]]) -> list[tuple[float, float]]:
    """
    |acc_i - acc_{i-1}| / (rate_i - rate_{i-1}) for every row after the first.

    The first row is the anchor, normally the clean rate 0.
    """
    if len(accuracies) < 2:
        raise DataError(f"noise sensitivity needs at least 2 rows, got {len(accuracies)}")
    rates = [rate for rate, _ in accuracies]
    for previous, current in zip(rates, rates[1:]):
        if not current > previous:
            raise DataError(f"noise rates must be strictly increasing, got {previous} then {current}")
    return [
        (rate, abs(acc - previous_acc) / (rate - previous_rate))
        for (previous_rate, previous_acc), (rate, acc) in zip(accuracies, accuracies[1:])
    ]


@dataclass(frozen=True)
class BenchCell:
    """One (noise rate, seed) experiment, self-contained so it can run in a worker process."""
    rate: float
    seed_index: int
    master_seed: int
    n: int
    d: int
    margin: float
    mode: NoiseMode
    hp: HyperParams
    policy: NoisePolicy
    methods: tuple[Method, ...]

    def sub_seed(self, *coordinates: int) -> int:
        sequence = np.random.SeedSequence([self.master_seed, *coordinates])
        return int(sequence.generate_state(1)[0])

    @property
    def data_seed(self) -> int:
        # shared by every rate of one seed so the sweep is paired
        return self.sub_seed(self.seed_index)

    @property
    def noise_seed(self) -> int:
        return self.sub_seed(self.seed_index, int(round(self.rate * 1_000_000)))


@dataclass(frozen=True)
class CellResult:
    rate: float
    seed_index: int
    accuracy_by_method: dict[Method, float]
    iterations_by_method: dict[Method, int]


def run_cell(cell: BenchCell) -> CellResult:
    data, true_model = gen_halfspace(cell.n, cell.d, cell.margin, seed=cell.data_seed)
    train, test = split_train_test(data)
    noisy, _ = inject_noise(train, NoiseSpec(cell.rate, cell.mode, cell.noise_seed), true_model)
    accuracies, iterations = {}, {}
    for method in cell.methods:
        if method is Method.proposed:
            cfg = TrainConfig(
                hp=cell.hp,
                optimizer=Optimizer.adam,
                noise_policy=cell.policy,
                seed=cell.noise_seed,
                expected_noise_rate=cell.rate if cell.rate > 0 else None,
            )
            trained = adaptive_fit(noisy, cfg)
            model, used = trained.model, trained.convergence.iterations_used
        else:
            fitted = fit_baseline(noisy, method, cell.hp, seed=cell.noise_seed)
            model, used = fitted.model, fitted.iterations
        accuracies[method] = accuracy(model, test)
        iterations[method] = used
    logging.info("Cell rate=%.2f seed=%d done: %s", cell.rate, cell.seed_index,
                 ", ".join(f"{method.name}={value:.4f}" for method, value in accuracies.items()))
    return CellResult(cell.rate, cell.seed_index, accuracies, iterations)


@dataclass(frozen=True)
class ExperimentReport:
    methods: tuple[Method, ...]
    rows: tuple[MetricsRow, ...]

    @classmethod
    def from_cells(cls, results: Sequence[CellResult], methods: Sequence[Method],
                   rates: Sequence[float]) -> Self:
        """
        Aggregate per-seed results: accuracy mean/stdev, sensitivity mean and
        median iteration count. `results` must include the clean anchor rate 0.
        """
        methods = tuple(methods)
        by_seed: dict[int, dict[float, CellResult]] = {}
        for result in results:
            by_seed.setdefault(result.seed_index, {})[result.rate] = result
        swept = sorted(set(rates) | {0.0})
        sensitivities: dict[tuple[float, Method], list[float]] = {}
        for cells in by_seed.values():
            for method in methods:
                series = [(rate, cells[rate].accuracy_by_method[method]) for rate in swept]
                for rate, value in noise_sensitivity(series) if len(series) > 1 else []:
                    sensitivities.setdefault((rate, method), []).append(value)
        rows = []
        for rate in sorted(rates):
            cells = [seed_cells[rate] for _, seed_cells in sorted(by_seed.items())]
            rows.append(MetricsRow(
                noise_rate=rate,
                accuracy_by_method={method: statistics.fmean(cell.accuracy_by_method[method] for cell in cells)
                                    for method in methods},
                accuracy_std_by_method={method: statistics.pstdev(cell.accuracy_by_method[method] for cell in cells)
                                        for method in methods},
                sensitivity_by_method={method: statistics.fmean(sensitivities.get((rate, method), [0.0]))
                                       for method in methods},
                iterations_by_method={method: statistics.median_low(cell.iterations_by_method[method]
                                                                    for cell in cells)
                                      for method in methods},
            ))
        return cls(methods, tuple(rows))

    def write_csvs(self, out_dir: Path) -> list[Path]:
        accuracy_path = out_dir / 'accuracy.csv'
        sensitivity_path = out_dir / 'sensitivity.csv'
        convergence_path = out_dir / 'convergence.csv'
        with open(accuracy_path, 'w', newline='') as csv_file:
            writer = csv.writer(csv_file, lineterminator='\n')
            writer.writerow(['noise_rate'] + [f"{method.name}_{stat}" for method in self.methods
                                              for stat in ('mean', 'std')])
            for row in self.rows:
                writer.writerow([f"{row.noise_rate:.4f}"] + [
                    f"{value:.6f}" for method in self.methods
                    for value in (row.accuracy_by_method[method], row.accuracy_std_by_method.get(method, 0.0))
                ])
        with open(sensitivity_path, 'w', newline='') as csv_file:
            writer = csv.writer(csv_file, lineterminator='\n')
            writer.writerow(['noise_rate'] + [method.name for method in self.methods])
            for row in self.rows:
                if row.noise_rate == 0.0:
                    continue
                writer.writerow([f"{row.noise_rate:.4f}"] + [
                    f"{row.sensitivity_by_method[method]:.6f}" for method in self.methods])
        with open(convergence_path, 'w', newline='') as csv_file:
            writer = csv.writer(csv_file, lineterminator='\n')
            writer.writerow(['noise_rate'] + [method.name for method in self.methods])
            for row in self.rows:
                writer.writerow([f"{row.noise_rate:.4f}"] + [
                    str(row.iterations_by_method[method]) for method in self.methods])
        return [accuracy_path, sensitivity_path, convergence_path]

    @classmethod
    def read_csvs(cls, out_dir: Path) -> Self:
        """Rebuild a report from the three CSV files `write_csvs` produces."""
        def read(name: str) -> list[dict[str, str]]:
            try:
                with open(out_dir / name, 'r', newline='') as csv_file:
                    return list(csv.DictReader(csv_file))
            except OSError as error:
                raise DataError(f"cannot read {out_dir / name}: {error}") from error

        accuracy_rows = read('accuracy.csv')
        sensitivity_rows = {float(row['noise_rate']): row for row in read('sensitivity.csv')}
        convergence_rows = {float(row['noise_rate']): row for row in read('convergence.csv')}
        if not accuracy_rows:
            raise DataError(f"{out_dir / 'accuracy.csv'} has no data rows")
        methods = tuple(method for method in Method if f"{method.name}_mean" in accuracy_rows[0])
        rows = []
        for row in accuracy_rows:
            rate = float(row['noise_rate'])
            sensitivity = sensitivity_rows.get(rate, {})
            rows.append(MetricsRow(
                noise_rate=rate,
                accuracy_by_method={method: float(row[f"{method.name}_mean"]) for method in methods},
                accuracy_std_by_method={method: float(row[f"{method.name}_std"]) for method in methods},
                sensitivity_by_method={method: float(sensitivity.get(method.name, 0.0)) for method in methods},
                iterations_by_method={method: int(convergence_rows[rate][method.name]) for method in methods},
            ))
        return cls(methods, tuple(rows))

    def markdown(self) -> str:
        """Three tables in the column order of the classic comparison: accuracy, sensitivity, iterations."""
        headers = [method.value for method in self.methods]

        def table(title: str, suffix: str, cells) -> list[str]:
            lines = [f"## {title}", "",
                     "| Noise Rate | " + " | ".join(f"{header} {suffix}" for header in headers) + " |",
                     "|---" * (len(headers) + 1) + "|"]
            for row in self.rows:
                values = cells(row)
                if values is not None:
                    lines.append(f"| {row.noise_rate:.1f} | " + " | ".join(values) + " |")
            return lines + [""]

        lines = ["# Experiment Summary", ""]
        lines += table("Model Accuracy Evaluation", "Accuracy", lambda row: [
            f"{100 * row.accuracy_by_method[method]:.1f}% ± {100 * row.accuracy_std_by_method.get(method, 0.0):.1f}"
            for method in self.methods])
        lines += table("Noise Sensitivity", "Sensitivity", lambda row: None if row.noise_rate == 0.0 else [
            f"{row.sensitivity_by_method[method]:.3f}" for method in self.methods])
        lines += table("Convergence Evaluation", "Iterations", lambda row: [
            str(row.iterations_by_method[method]) for method in self.methods])
        return "\n".join(lines)
