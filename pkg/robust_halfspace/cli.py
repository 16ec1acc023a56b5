import argparse
import csv
import logging
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from robust_halfspace import APP_NAME, APP_VERSION
from robust_halfspace.bench import (BenchCell, ExperimentReport, Method, accuracy, fit_baseline, run_cell)
from robust_halfspace.core import Dataset, ScoreMode, load_dataset, save_model
from robust_halfspace.errors import ConfigError, HalfspaceError, OutputError
from robust_halfspace.noise import detector_decision_values, fit_detector, noise_profile, save_detector
from robust_halfspace.settings import Command, RunConfig
from robust_halfspace.train import TrainConfig, adaptive_fit, save_trained_model


SUMMARY_NAME = 'summary.md'


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog='robust_halfspace', description=f"{APP_NAME} {APP_VERSION}")
    parser.add_argument('command', choices=[command.name for command in Command])
    parser.add_argument('-d', '--debug', action='store_true')
    parser.add_argument('--config', type=Path, help="TOML config file or manifest.json of a previous run")
    parser.add_argument('--data', type=Path, help="CSV of feature columns followed by a label column")
    parser.add_argument('--trusted', type=Path, help="CSV of trusted clean examples to fit the detector on")
    parser.add_argument('--header', action='store_true', default=None, help="skip the first CSV line")
    parser.add_argument('--samples', type=int, help="synthetic dataset size")
    parser.add_argument('--dim', type=int, help="synthetic feature dimension")
    parser.add_argument('--margin', type=float, help="synthetic minimum distance to the boundary")
    parser.add_argument('--noise-mode', dest='noise_mode')
    parser.add_argument('--rates', help="comma separated noise rates in [0, 1)")
    parser.add_argument('--methods', help="comma separated subset of " + ','.join(m.name for m in Method))
    parser.add_argument('--seeds', type=int, help="number of seeds per noise rate")
    parser.add_argument('--seed', type=int, help="master seed")
    parser.add_argument('--policy')
    parser.add_argument('--optimizer')
    parser.add_argument('--out', type=Path, help="output directory")
    parser.add_argument('--workers', type=int)
    parser.add_argument('--batch-size', dest='batch_size', type=int)
    parser.add_argument('--refit-every', dest='refit_every', type=int)
    hyperparams = parser.add_argument_group('hyperparameters')
    hyperparams.add_argument('--lambda', dest='lam', type=float)
    hyperparams.add_argument('--alpha', type=float)
    hyperparams.add_argument('--rho', type=float)
    hyperparams.add_argument('--eta', type=float)
    hyperparams.add_argument('--nu', type=float)
    hyperparams.add_argument('--gamma', type=float)
    hyperparams.add_argument('--scoring', choices=[mode.name for mode in ScoreMode],
                             help="score an example by its own label model only, or against the other label's model")
    hyperparams.add_argument('--tau', type=float)
    hyperparams.add_argument('--max-iterations', dest='max_iterations', type=int)
    hyperparams.add_argument('--tol', type=float)
    return parser


HYPERPARAM_FLAGS = ('lam', 'alpha', 'rho', 'eta', 'nu', 'gamma', 'scoring', 'tau', 'max_iterations', 'tol')
RUN_FLAGS = ('data', 'trusted', 'header', 'samples', 'dim', 'margin', 'noise_mode', 'rates', 'methods',
             'seeds', 'seed', 'policy', 'optimizer', 'out', 'workers', 'batch_size', 'refit_every')


def resolve_config(args: argparse.Namespace) -> RunConfig:
    """Defaults, then the config file, then every flag that was given."""
    config = RunConfig.load(args.config) if args.config is not None else RunConfig()
    overrides = {name: getattr(args, name) for name in RUN_FLAGS}
    overrides['command'] = args.command
    overrides['hyperparams'] = {name: getattr(args, name) for name in HYPERPARAM_FLAGS}
    if args.methods is not None and not overrides['methods'].strip():
        raise ConfigError("'methods' must name at least one method")
    return RunConfig.from_mapping(overrides, base=config)


def _ensure_out(config: RunConfig) -> None:
    try:
        config.out.mkdir(parents=True, exist_ok=True)
    except OSError as error:
        raise OutputError(f"cannot create output directory {config.out}: {error}") from error


def _load(config: RunConfig, path: Optional[Path]) -> Optional[Dataset]:
    if path is None:
        return None
    return load_dataset(path, header=config.header)


def run_train(config: RunConfig) -> int:
    if config.data is None:
        raise ConfigError("'data' is required for the train command")
    data = _load(config, config.data)
    method = config.methods[0]
    if method is Method.proposed:
        train_config = TrainConfig(hp=config.hp, optimizer=config.optimizer, noise_policy=config.policy,
                                   seed=config.seed, batch_size=config.batch_size,
                                   refit_every=config.refit_every)
        trained = adaptive_fit(data, train_config, trusted=_load(config, config.trusted))
        model, iterations, skipped = trained.model, trained.convergence.iterations_used, trained.skipped_count
    else:
        fitted = fit_baseline(data, method, config.hp, optimizer=config.optimizer, seed=config.seed)
        model, iterations, skipped, trained = fitted.model, fitted.iterations, 0, None
    _ensure_out(config)
    config.save_manifest()
    if method is Method.decision_tree:
        logging.info("Decision trees have no JSON form, only the summary is written")
    else:
        save_model(model, config.out / 'model.json')
    if trained is not None:
        save_trained_model(trained, config.out / 'training.json')
    print(f"method={method.name} accuracy={accuracy(model, data):.4f} "
          f"iterations={iterations} skipped_count={skipped}")
    return 0


def run_detect(config: RunConfig) -> int:
    if config.data is None:
        raise ConfigError("'data' is required for the detect command")
    data = _load(config, config.data)
    trusted = _load(config, config.trusted)
    detector = fit_detector(trusted if trusted is not None else data, config.hp)
    values = detector_decision_values(detector, data)
    rates = noise_profile(detector, data).rates
    _ensure_out(config)
    config.save_manifest()
    save_detector(detector, config.out / 'detector.json')
    with open(config.out / 'rates.csv', 'w', newline='') as csv_file:
        writer = csv.writer(csv_file, lineterminator='\n')
        writer.writerow(['index', 'label', 'decision_value', 'rate', 'flagged'])
        for index, (label, value, rate) in enumerate(zip(data.labels, values, rates)):
            writer.writerow([index, int(label), repr(float(value)), repr(float(rate)), int(rate > config.hp.tau)])
    flagged = int(np.sum(rates > config.hp.tau))
    print(f"examples={data.n} flagged={flagged} mean_rate={float(np.mean(rates)):.4f}")
    return 0


def bench_cells(config: RunConfig) -> list[BenchCell]:
    swept = sorted(set(config.rates) | {0.0})
    return [
        BenchCell(rate=rate, seed_index=seed_index, master_seed=config.seed, n=config.samples,
                  d=config.dim, margin=config.margin, mode=config.noise_mode, hp=config.hp,
                  policy=config.policy, methods=config.methods)
        for rate in swept
        for seed_index in range(config.seeds)
    ]


def run_bench(config: RunConfig) -> int:
    _ensure_out(config)
    config.save_manifest()
    cells = bench_cells(config)
    logging.info("Running %d experiment cells on %d worker(s)", len(cells), config.workers)
    if config.workers == 1:
        results = [run_cell(cell) for cell in cells]
    else:
        with ProcessPoolExecutor(max_workers=config.workers) as pool:
            results = list(pool.map(run_cell, cells))
    report = ExperimentReport.from_cells(results, config.methods, config.rates)
    try:
        written = report.write_csvs(config.out)
        with open(config.out / SUMMARY_NAME, 'w') as summary_file:
            summary_file.write(report.markdown())
    except OSError as error:
        raise OutputError(f"cannot write results to {config.out}: {error}") from error
    for path in written:
        logging.info("Wrote %s", path)
    print(report.markdown())
    return 0


def run_report(config: RunConfig) -> int:
    report = ExperimentReport.read_csvs(config.out)
    try:
        with open(config.out / SUMMARY_NAME, 'w') as summary_file:
            summary_file.write(report.markdown())
    except OSError as error:
        raise OutputError(f"cannot write {config.out / SUMMARY_NAME}: {error}") from error
    print(report.markdown())
    return 0


def main(args: argparse.Namespace) -> int:
    try:
        config = resolve_config(args)
        match config.command:
            case Command.train:
                return run_train(config)
            case Command.detect:
                return run_detect(config)
            case Command.bench:
                return run_bench(config)
            case Command.report:
                return run_report(config)
            case _:
                raise NotImplementedError(f"Command '{config.command}' is not implemented")
    except HalfspaceError as error:
        logging.error("%s: %s", type(error).__name__, error)
        return error.exit_code
    except OSError as error:
        logging.error("I/O failure: %s", error)
        return OutputError.exit_code


def run(argv: Sequence[str]) -> int:
    return main(build_parser().parse_args(list(argv)))
