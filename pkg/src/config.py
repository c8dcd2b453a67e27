import json
import os
from dataclasses import asdict, dataclass, field, fields
from typing import Any, Callable, Dict, Iterable, Optional, Tuple

from dotenv import load_dotenv

from errors import ConfigError, UsageError

ARTIFACT_VERSION = '0.1.0'

DEFAULT_DATASETS_FILE_PATH = 'config/datasets.yml'
DEFAULT_OUTPUT_DIR = 'results'
DEFAULT_SCENARIO = 'adaptive'
DEFAULT_DATASET = 'mnist'
DEFAULT_BATCH_SIZE = 4
DEFAULT_BATCH_SIZES = (4, 8, 16, 32)
DEFAULT_EPOCHS = 10
DEFAULT_LEARNING_RATE = 0.01
DEFAULT_SGD_MOMENTUM = 0.9
DEFAULT_SEED = 0
DEFAULT_UPR_P = 0.10
DEFAULT_LOR_P = 0.10
DEFAULT_CONV_FILTERS = (32, 64, 64)
DEFAULT_DROPOUT_RATE = 0.2
DEFAULT_BN_EPS = 1e-5
DEFAULT_BN_MOMENTUM = 0.1
DEFAULT_FOLDS = 3
DEFAULT_SUBSET_SIZE = 9000
DEFAULT_EVAL_CAP = 1000
DEFAULT_REPLICATIONS = 20
DEFAULT_SWEEP_WIDTHS = (0.05, 0.1, 0.2, 0.3)
DEFAULT_GRADCHECK_POINTS = 10

SCENARIOS = ('bn', 'no_bn', 'adaptive')
GATE_OVERRIDES = ('none', 'always', 'never')
ADAPTIVE_EVAL_MODES = ('identity', 'running')


def _env_datasets_file_path() -> str:
    return os.getenv('DATASETS_FILE_PATH', DEFAULT_DATASETS_FILE_PATH)


def default_output_dir() -> str:
    """Output directory from the environment, falling back to ./results."""
    load_dotenv()
    return os.getenv('OUTPUT_DIR', DEFAULT_OUTPUT_DIR)


@dataclass
class TrainConfig:
    """Resolved configuration of one experiment."""
    scenario: str = DEFAULT_SCENARIO
    dataset: str = DEFAULT_DATASET
    train_paths: Tuple[str, ...] = ()
    test_paths: Tuple[str, ...] = ()
    datasets_file_path: str = field(default_factory=_env_datasets_file_path)
    batch_size: int = DEFAULT_BATCH_SIZE
    batch_sizes: Tuple[int, ...] = DEFAULT_BATCH_SIZES
    epochs: int = DEFAULT_EPOCHS
    learning_rate: float = DEFAULT_LEARNING_RATE
    sgd_momentum: float = DEFAULT_SGD_MOMENTUM
    seed: int = DEFAULT_SEED
    upr_p: float = DEFAULT_UPR_P
    lor_p: float = DEFAULT_LOR_P
    conv_filters: Tuple[int, ...] = DEFAULT_CONV_FILTERS
    conv_padding: int = 0
    conv_stride: int = 1
    dropout_rate: float = DEFAULT_DROPOUT_RATE
    bn_eps: float = DEFAULT_BN_EPS
    bn_momentum: float = DEFAULT_BN_MOMENTUM
    folds: int = DEFAULT_FOLDS
    subset_size: int = DEFAULT_SUBSET_SIZE
    eval_cap: int = DEFAULT_EVAL_CAP
    gate_override: str = 'none'
    adaptive_eval: str = 'identity'
    replications: int = DEFAULT_REPLICATIONS
    sweep_widths: Tuple[float, ...] = DEFAULT_SWEEP_WIDTHS
    gradcheck_points: int = DEFAULT_GRADCHECK_POINTS

    def validate(self) -> None:
        """Validate value ranges; raises ConfigError naming the key."""
        if self.scenario not in SCENARIOS:
            raise ConfigError(f"scenario must be one of {SCENARIOS}, got '{self.scenario}'")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be at least 1, got {self.epochs}")
        if self.scenario == 'adaptive' and self.epochs < 2:
            raise ConfigError("epochs must be at least 2 for the adaptive scenario (epoch 1 calibrates)")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be positive, got {self.batch_size}")
        if not self.batch_sizes or min(self.batch_sizes) < 1:
            raise ConfigError(f"batch_sizes must be positive integers, got {self.batch_sizes}")
        if self.learning_rate <= 0:
            raise ConfigError(f"learning_rate must be positive, got {self.learning_rate}")
        if not 0.0 <= self.sgd_momentum < 1.0:
            raise ConfigError(f"sgd_momentum must lie in [0, 1), got {self.sgd_momentum}")
        if self.seed < 0:
            raise ConfigError(f"seed must be non-negative, got {self.seed}")
        if self.upr_p < 0:
            raise ConfigError(f"upr_p must be non-negative, got {self.upr_p}")
        if not 0.0 <= self.lor_p <= 1.0:
            raise ConfigError(f"lor_p must lie in [0, 1], got {self.lor_p}")
        if len(self.conv_filters) != 3 or min(self.conv_filters) < 1:
            raise ConfigError(f"conv_filters must be three positive integers, got {self.conv_filters}")
        if self.conv_padding < 0 or self.conv_stride < 1:
            raise ConfigError(f"conv_padding must be >= 0 and conv_stride >= 1, got "
                              f"{self.conv_padding} and {self.conv_stride}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError(f"dropout_rate must lie in [0, 1), got {self.dropout_rate}")
        if self.bn_eps <= 0:
            raise ConfigError(f"bn_eps must be positive, got {self.bn_eps}")
        if not 0.0 <= self.bn_momentum <= 1.0:
            raise ConfigError(f"bn_momentum must lie in [0, 1], got {self.bn_momentum}")
        if self.folds < 2:
            raise ConfigError(f"folds must be at least 2, got {self.folds}")
        if self.subset_size < 0 or self.eval_cap < 0:
            raise ConfigError("subset_size and eval_cap must be non-negative (0 disables the cap)")
        if self.gate_override not in GATE_OVERRIDES:
            raise ConfigError(f"gate_override must be one of {GATE_OVERRIDES}, got '{self.gate_override}'")
        if self.adaptive_eval not in ADAPTIVE_EVAL_MODES:
            raise ConfigError(f"adaptive_eval must be one of {ADAPTIVE_EVAL_MODES}, got '{self.adaptive_eval}'")
        if self.replications < 1:
            raise ConfigError(f"replications must be positive, got {self.replications}")
        if not self.sweep_widths or min(self.sweep_widths) < 0:
            raise ConfigError(f"sweep_widths must be non-negative, got {self.sweep_widths}")
        if self.gradcheck_points < 1:
            raise ConfigError(f"gradcheck_points must be positive, got {self.gradcheck_points}")

    def to_dict(self) -> Dict[str, Any]:
        """Plain dict for the run JSON; tuples become lists."""
        return {key: list(value) if isinstance(value, tuple) else value for key, value in asdict(self).items()}

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'TrainConfig':
        """Rebuild a config from `to_dict` output (for example a parsed run JSON)."""
        config = cls()
        for key, value in data.items():
            if isinstance(value, list):
                value = ','.join(str(v) for v in value)
            set_value(config, key, str(value))
        config.validate()
        return config


def _tuple_parser(item: Callable[[str], Any]) -> Callable[[str], Tuple[Any, ...]]:
    def parse(raw: str) -> Tuple[Any, ...]:
        return tuple(item(part.strip()) for part in raw.split(',') if part.strip())
    return parse


FIELD_PARSERS: Dict[str, Callable[[str], Any]] = {
    'scenario': str,
    'dataset': str,
    'train_paths': _tuple_parser(str),
    'test_paths': _tuple_parser(str),
    'datasets_file_path': str,
    'batch_size': int,
    'batch_sizes': _tuple_parser(int),
    'epochs': int,
    'learning_rate': float,
    'sgd_momentum': float,
    'seed': int,
    'upr_p': float,
    'lor_p': float,
    'conv_filters': _tuple_parser(int),
    'conv_padding': int,
    'conv_stride': int,
    'dropout_rate': float,
    'bn_eps': float,
    'bn_momentum': float,
    'folds': int,
    'subset_size': int,
    'eval_cap': int,
    'gate_override': str,
    'adaptive_eval': str,
    'replications': int,
    'sweep_widths': _tuple_parser(float),
    'gradcheck_points': int,
}


def valid_keys() -> Tuple[str, ...]:
    return tuple(f.name for f in fields(TrainConfig))


def set_value(config: TrainConfig, key: str, raw: str) -> None:
    """
    Parse `raw` with the key's type and assign it.

    Raises:
        UsageError: If the key is not a TrainConfig field
        ConfigError: If the value cannot be parsed
    """
    if key not in FIELD_PARSERS:
        raise UsageError(f"Unknown config key '{key}'. Valid keys: {', '.join(valid_keys())}")
    try:
        value = FIELD_PARSERS[key](raw.strip())
    except ValueError:
        raise ConfigError(f"Cannot parse value '{raw}' for config key '{key}'")
    setattr(config, key, value)


def parse_config_file(file_path: str) -> Dict[str, str]:
    """
    Read `key = value` lines; '#' starts a comment, blank lines are skipped.

    Returns:
        Dict of raw string values in file order
    """
    try:
        with open(file_path, 'r') as f:
            lines = f.readlines()
    except FileNotFoundError:
        raise FileNotFoundError(f"Configuration file '{file_path}' not found")

    values: Dict[str, str] = {}
    for number, line in enumerate(lines, 1):
        content = line.split('#', 1)[0].strip()
        if not content:
            continue
        if '=' not in content:
            raise ConfigError(f"'{file_path}' line {number}: expected 'key = value', got '{content}'")
        key, raw = content.split('=', 1)
        values[key.strip()] = raw.strip()
    return values


def resolve_config(file_path: Optional[str] = None, overrides: Optional[Dict[str, str]] = None) -> TrainConfig:
    """
    Resolve defaults < environment < config file < command-line overrides.

    Args:
        file_path: Optional key = value config file
        overrides: Raw flag values keyed by config key

    Returns:
        TrainConfig: Validated configuration
    """
    load_dotenv()
    config = TrainConfig()
    layers: Iterable[Dict[str, str]] = (parse_config_file(file_path) if file_path else {}, overrides or {})
    for layer in layers:
        for key, raw in layer.items():
            set_value(config, key, raw)
    config.validate()
    return config


def config_from_run_json(file_path: str) -> TrainConfig:
    """Rebuild the resolved config embedded in a run.json."""
    with open(file_path, 'r') as f:
        return TrainConfig.from_dict(json.load(f)['config'])
