"""
Run configuration: built-in defaults, overridden by a config file, overridden by flags.

Config files are TOML or the JSON manifest a previous run wrote; both use the
keys of `RunConfig.to_json`.
"""
import json
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from dataclasses import dataclass, field, fields, replace
from enum import Enum
from pathlib import Path
from typing import Any, Optional
try:
    from typing import Self
except ImportError:  # Python < 3.11
    from typing_extensions import Self

from robust_halfspace import APP_VERSION
from robust_halfspace.bench import Method, NoiseMode
from robust_halfspace.core import HyperParams
from robust_halfspace.errors import ConfigError, OutputError
from robust_halfspace.optim import Optimizer
from robust_halfspace.train import NoisePolicy


MANIFEST_NAME = 'manifest.json'
DEFAULT_RATES = (0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9)


class Command(Enum):
    train = 'Train a single model'
    detect = 'Score a dataset with the noise detector'
    bench = 'Run the noise-rate sweep'
    report = 'Render the markdown summary of a sweep'


def _enum_member(enum_type: type[Enum], name: Any, key: str) -> Enum:
    if isinstance(name, enum_type):
        return name
    try:
        return enum_type[str(name).strip()]
    except KeyError as error:
        choices = ', '.join(member.name for member in enum_type)
        raise ConfigError(f"'{key}' must be one of {choices}, got {name!r}") from error


def _as_list(value: Any) -> list:
    if isinstance(value, str):
        return [item for item in (part.strip() for part in value.split(',')) if item]
    return list(value)


@dataclass(frozen=True)
class RunConfig:
    command: Command = Command.bench
    data: Optional[Path] = None
    trusted: Optional[Path] = None
    header: bool = False
    samples: int = 2000
    dim: int = 10
    margin: float = 0.0
    noise_mode: NoiseMode = NoiseMode.boundary_flip
    hp: HyperParams = field(default_factory=HyperParams)
    rates: tuple[float, ...] = DEFAULT_RATES
    methods: tuple[Method, ...] = tuple(Method)
    seeds: int = 10
    seed: int = 0
    out: Path = Path('results')
    policy: NoisePolicy = NoisePolicy.downweight
    optimizer: Optimizer = Optimizer.adam
    workers: int = 1
    batch_size: Optional[int] = None
    refit_every: int = 0

    def __post_init__(self):
        if not self.methods:
            raise ConfigError("'methods' must name at least one method")
        if len(set(self.methods)) != len(self.methods):
            raise ConfigError("'methods' must not repeat a method")
        if not self.rates:
            raise ConfigError("'rates' must contain at least one noise rate")
        for rate in self.rates:
            if not 0 <= rate < 1:
                raise ConfigError(f"'rates' must lie in [0, 1), got {rate!r}")
        if any(current <= previous for previous, current in zip(self.rates, self.rates[1:])):
            raise ConfigError(f"'rates' must be sorted and distinct, got {list(self.rates)}")
        checks = [
            ('seeds', self.seeds >= 1),
            ('samples', self.samples >= 10),
            ('dim', self.dim >= 1),
            ('margin', self.margin >= 0),
            ('workers', self.workers >= 1),
            ('refit_every', self.refit_every >= 0),
            ('batch_size', self.batch_size is None or self.batch_size >= 1),
        ]
        for name, valid in checks:
            if not valid:
                raise ConfigError(f"'{name}' is out of range: {getattr(self, name)!r}")

    @classmethod
    def from_mapping(cls, mapping: dict, base: Optional[Self] = None) -> Self:
        """Overlay the keys of `mapping` on `base` (or the defaults); None values are ignored."""
        base = base if base is not None else cls()
        known = {f.name for f in fields(cls)} | {'hyperparams', 'version'}
        unknown = set(mapping) - known
        if unknown:
            raise ConfigError(f"unknown configuration key(s): {', '.join(sorted(unknown))}")
        updates: dict[str, Any] = {}
        try:
            for key, value in mapping.items():
                if value is None or key == 'version':
                    continue
                match key:
                    case 'hyperparams':
                        overrides = {name: item for name, item in value.items() if item is not None}
                        updates['hp'] = base.hp.replace(**overrides)
                    case 'hp':
                        updates['hp'] = value if isinstance(value, HyperParams) else base.hp.replace(**value)
                    case 'command':
                        updates[key] = _enum_member(Command, value, key)
                    case 'noise_mode':
                        updates[key] = _enum_member(NoiseMode, value, key)
                    case 'policy':
                        updates[key] = _enum_member(NoisePolicy, value, key)
                    case 'optimizer':
                        updates[key] = _enum_member(Optimizer, value, key)
                    case 'methods':
                        updates[key] = tuple(_enum_member(Method, item, key) for item in _as_list(value))
                    case 'rates':
                        updates[key] = tuple(float(item) for item in _as_list(value))
                    case 'data' | 'trusted' | 'out':
                        updates[key] = Path(value)
                    case 'samples' | 'dim' | 'seeds' | 'seed' | 'workers' | 'refit_every' | 'batch_size':
                        updates[key] = int(value)
                    case 'margin':
                        updates[key] = float(value)
                    case 'header':
                        updates[key] = bool(value)
        except (TypeError, ValueError) as error:
            raise ConfigError(f"invalid configuration value: {error}") from error
        return replace(base, **updates)

    @classmethod
    def load(cls, path: Path) -> Self:
        path = Path(path)
        try:
            if path.suffix == '.toml':
                with open(path, 'rb') as config_file:
                    mapping = tomllib.load(config_file)
            else:
                with open(path, 'r') as config_file:
                    mapping = json.loads(config_file.read())
        except OSError as error:
            raise ConfigError(f"cannot read config file {path}: {error}") from error
        except (tomllib.TOMLDecodeError, json.JSONDecodeError) as error:
            raise ConfigError(f"config file {path} is malformed: {error}") from error
        return cls.from_mapping(mapping)

    def to_json(self) -> dict:
        return {
            'version': APP_VERSION,
            'command': self.command.name,
            'data': None if self.data is None else str(self.data),
            'trusted': None if self.trusted is None else str(self.trusted),
            'header': self.header,
            'samples': self.samples,
            'dim': self.dim,
            'margin': self.margin,
            'noise_mode': self.noise_mode.name,
            'hyperparams': self.hp.to_json(),
            'rates': list(self.rates),
            'methods': [method.name for method in self.methods],
            'seeds': self.seeds,
            'seed': self.seed,
            'out': str(self.out),
            'policy': self.policy.name,
            'optimizer': self.optimizer.name,
            'workers': self.workers,
            'batch_size': self.batch_size,
            'refit_every': self.refit_every,
        }

    def save_manifest(self) -> Path:
        manifest_path = self.out / MANIFEST_NAME
        try:
            self.out.mkdir(parents=True, exist_ok=True)
            with open(manifest_path, 'w') as manifest_file:
                manifest_file.write(json.dumps(self.to_json(), indent=2, sort_keys=True) + '\n')
        except OSError as error:
            raise OutputError(f"cannot write to output directory {self.out}: {error}") from error
        return manifest_path
