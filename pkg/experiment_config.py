"""
Experiment Config
JSON experiment configuration with defaults, validation and `--key=value`
command-line overrides.
"""
import copy
import json
from typing import Any, Dict, Iterable, List, Optional, Tuple

PIPELINES = ('train_eval', 'grid', 'folds', 'synth', 'representation', 'dwell_signal')

DEFAULTS: Dict[str, Any] = {
    'pipeline': 'train_eval',
    'seed': 0,
    'input': None,
    'synth': {
        'num_items': 200,
        'num_sessions': 20000,
        'days': 8,
        'signal': 0.9,
        'dwell_short': [1.0, 5.0],
        'dwell_long': [30.0, 40.0],
        'branching': 4,
        'seed': None,
        'session_length': [2, 10],
        'start_date': '2014-04-01',
        'daily_signal': None,
    },
    'preprocess': {
        'strict': True,
        'min_len': 2,
        'min_support': 5,
        'max_len': 16,
        'dwell_cap': 3600,
        'augment_train': True,
        'augment_eval': True,
    },
    'model': {
        'kind': 'dt',
        'item_em_size': 128,
        'it_rnn_size': 128,
        'dt_em_size': 16,
        'dt_rnn_size': 8,
        'item_encoding': 'embedding',
    },
    'models': [],
    'train': {
        'epochs': 6,
        'batch_size': 256,
        'lr': 0.001,
        'beta1': 0.9,
        'beta2': 0.999,
        'eps': 1e-8,
        'shuffle': True,
    },
    'eval': {
        'k': 20,
        'batch_size': 1024,
        'last_prefix_only': False,
    },
    'grid': {
        'dt_em_sizes': [4, 8, 16, 32],
        'dt_rnn_sizes': [4, 8, 16, 32, 64, 128],
        'workers': 1,
        'control': False,
    },
    'folds': {
        'n': 6,
        'workers': 1,
    },
    'study': {
        'seeds': [0, 1, 2],
        'signals': [0.9, 0.0],
    },
}


class ConfigError(ValueError):
    """Raised for a missing or malformed configuration, naming the file and key."""

    def __init__(self, message: str, path: Optional[str] = None, key: Optional[str] = None):
        where = ' '.join(part for part in (path and f"in {path}", key and f"at {key}") if part)
        super().__init__(f"{message} ({where})" if where else message)
        self.path = path
        self.key = key


def _merge(base: Dict[str, Any], update: Dict[str, Any], path: Optional[str], prefix: str = ''):
    for key, value in update.items():
        dotted = f"{prefix}{key}"
        if key not in base:
            raise ConfigError(f"unknown key {dotted!r}", path, dotted)
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"{dotted!r} must be an object", path, dotted)
            _merge(base[key], value, path, dotted + '.')
        else:
            base[key] = value


def validate_config(config: Dict[str, Any], path: Optional[str] = None) -> Dict[str, Any]:
    if config['pipeline'] not in PIPELINES:
        raise ConfigError(f"pipeline must be one of {PIPELINES}, got {config['pipeline']!r}",
                          path, 'pipeline')
    if not isinstance(config['seed'], int):
        raise ConfigError(f"seed must be an integer, got {config['seed']!r}", path, 'seed')
    if config['model']['kind'] not in ('it', 'dt'):
        raise ConfigError(f"model kind must be 'it' or 'dt', got {config['model']['kind']!r}",
                          path, 'model.kind')
    if not isinstance(config['models'], list):
        raise ConfigError("models must be a list of model objects", path, 'models')
    for i, spec in enumerate(config['models']):
        if not isinstance(spec, dict):
            raise ConfigError("each model must be an object", path, f'models[{i}]')
        unknown = set(spec) - set(DEFAULTS['model']) - {'label'}
        if unknown:
            raise ConfigError(f"unknown model keys {sorted(unknown)}", path, f'models[{i}]')
    return config


def build_config(data: Optional[Dict[str, Any]] = None, path: Optional[str] = None) -> Dict[str, Any]:
    """Defaults overlaid with data, then validated."""
    config = copy.deepcopy(DEFAULTS)
    _merge(config, data or {}, path)
    return validate_config(config, path)


def load_config(path: str) -> Dict[str, Any]:
    try:
        with open(path, 'r', encoding='utf-8') as f:
            data = json.load(f)
    except FileNotFoundError:
        raise ConfigError("config file not found", path) from None
    except json.JSONDecodeError as e:
        raise ConfigError(f"invalid JSON: {e}", path) from None
    if not isinstance(data, dict):
        raise ConfigError("config must be a JSON object", path)
    return build_config(data, path)


def parse_value(text: str) -> Any:
    """JSON when it parses, otherwise the raw string."""
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def parse_overrides(args: Iterable[str]) -> List[Tuple[str, Any]]:
    """Turn ['--train.epochs=3', '--input=clicks.csv'] into (dotted key, value) pairs."""
    overrides = []
    for arg in args:
        if not arg.startswith('--') or '=' not in arg:
            raise ConfigError(f"override {arg!r} must look like --key=value")
        key, value = arg[2:].split('=', 1)
        overrides.append((key.replace('-', '_'), parse_value(value)))
    return overrides


def apply_overrides(config: Dict[str, Any], overrides: Iterable[Tuple[str, Any]],
                    path: Optional[str] = None) -> Dict[str, Any]:
    """Set dotted keys in a copy of config and re-validate."""
    config = copy.deepcopy(config)
    for dotted, value in overrides:
        update: Dict[str, Any] = {}
        cursor = update
        parts = dotted.split('.')
        for part in parts[:-1]:
            cursor = cursor.setdefault(part, {})
        cursor[parts[-1]] = value
        _merge(config, update, path)
    return validate_config(config, path)
