"""
Experiment Configuration
========================

Section-based key=value configuration (config.ini) resolved into an
ExperimentConfig dataclass tree.

Resolution order (later wins):
1. dataclass defaults
2. the config file
3. SFE_LAB_DATA environment variable (data.dir only)
4. command-line overrides ("section.key" -> value)

Unknown sections or keys and malformed values raise ConfigError naming the
section and key.
"""

import configparser
import hashlib
import json
import logging
import os
import typing
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Dict, Iterable, Optional, Tuple, Union

from attacks import ATTACK_NAMES
from classifier import MODEL_NAMES, TAPS
from errors import ConfigError
from sfe import DISCRIMINATOR_HEADS, GENERATOR_DEPTHS

logger = logging.getLogger(__name__)

DATA_ENV = 'SFE_LAB_DATA'

# keys that never change results and stay out of the hash
UNHASHED = {'run': ('out_dir', 'threads'), 'logging': ('level',)}


@dataclass
class DataConfig:
    dir: str = 'data/mnist'
    train_limit: Optional[int] = 10000
    test_limit: Optional[int] = 2000


@dataclass
class ModelConfig:
    name: str = 'cnn1'
    tap: str = 'dense'
    epochs: int = 12
    batch_size: int = 128


@dataclass
class AttackConfig:
    method: str = 'bim'
    eval_methods: Tuple[str, ...] = ('fgsm', 'bim', 'mifgsm', 'pgd', 'deepfool', 'auna', 'cra', 'pwa')
    limit: Optional[int] = 2000
    eps: Optional[float] = None
    step: Optional[float] = None
    iters: Optional[int] = None
    decay: Optional[float] = None


@dataclass
class SfeConfig:
    k_d: int = 5
    m_b: int = 64
    iterations: int = 3000
    generator_depth: str = 'none'
    discriminator_head: str = 'tanh'


@dataclass
class DetectorConfig:
    epochs: int = 20
    batch_size: int = 64
    threshold: float = 0.5
    split_ratio: float = 0.7


@dataclass
class EvaluationConfig:
    transfer_train: Tuple[str, ...] = ('bim',)
    transfer_test: Tuple[str, ...] = ('fgsm', 'bim', 'pgd')
    benign_sample: int = 1000
    adaptive: bool = True
    trend: bool = True
    report_format: str = 'csv'
    record_timings: bool = False


@dataclass
class RunConfig:
    seed: int = 0
    out_dir: str = 'runs'
    threads: int = 1


@dataclass
class LoggingConfig:
    level: str = 'INFO'


@dataclass
class ExperimentConfig:
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    attack: AttackConfig = field(default_factory=AttackConfig)
    sfe: SfeConfig = field(default_factory=SfeConfig)
    detector: DetectorConfig = field(default_factory=DetectorConfig)
    evaluation: EvaluationConfig = field(default_factory=EvaluationConfig)
    run: RunConfig = field(default_factory=RunConfig)
    logging: LoggingConfig = field(default_factory=LoggingConfig)

    def to_dict(self) -> Dict[str, Dict[str, Any]]:
        return asdict(self)

    def section(self, name: str):
        if name not in SECTIONS:
            raise ConfigError(f"Unknown config section [{name}]")
        return getattr(self, name)


SECTIONS = tuple(f.name for f in fields(ExperimentConfig))


def _coerce(section: str, key: str, raw: Any, typ) -> Any:
    """Convert a raw (string or already typed) value to the field's declared type."""
    origin = typing.get_origin(typ)
    args = typing.get_args(typ)
    if origin is Union and type(None) in args:
        if raw is None or (isinstance(raw, str) and raw.strip().lower() in ('', 'none')):
            return None
        inner = next(a for a in args if a is not type(None))
        return _coerce(section, key, raw, inner)
    if origin is tuple:
        items = raw.split(',') if isinstance(raw, str) else list(raw)
        return tuple(str(item).strip() for item in items if str(item).strip())
    try:
        if typ is bool:
            if isinstance(raw, bool):
                return raw
            state = configparser.ConfigParser.BOOLEAN_STATES.get(str(raw).strip().lower())
            if state is None:
                raise ValueError(f"not a boolean: {raw!r}")
            return state
        if typ is int:
            return int(str(raw).strip()) if not isinstance(raw, int) else raw
        if typ is float:
            return float(str(raw).strip()) if not isinstance(raw, float) else raw
        return str(raw).strip()
    except ValueError as e:
        raise ConfigError(f"[{section}] {key}: malformed value {raw!r} ({e})") from e


def _set(config: ExperimentConfig, section: str, key: str, raw: Any):
    if section not in SECTIONS:
        raise ConfigError(f"Unknown config section [{section}]")
    target = getattr(config, section)
    types = typing.get_type_hints(type(target))
    if key not in types:
        raise ConfigError(f"Unknown key '{key}' in section [{section}]")
    setattr(target, key, _coerce(section, key, raw, types[key]))


def validate(config: ExperimentConfig):
    """
    Raises:
        ConfigError: a value outside its allowed range or set
    """
    checks = [
        ('model', 'name', config.model.name in MODEL_NAMES, f"one of {MODEL_NAMES}"),
        ('model', 'tap', config.model.tap in TAPS, f"one of {TAPS}"),
        ('model', 'epochs', config.model.epochs >= 0, ">= 0"),
        ('model', 'batch_size', config.model.batch_size >= 1, ">= 1"),
        ('attack', 'method', config.attack.method in ATTACK_NAMES, f"one of {ATTACK_NAMES}"),
        ('attack', 'eval_methods', set(config.attack.eval_methods) <= set(ATTACK_NAMES), f"subset of {ATTACK_NAMES}"),
        ('attack', 'eps', config.attack.eps is None or config.attack.eps >= 0, ">= 0"),
        ('sfe', 'k_d', config.sfe.k_d >= 0, ">= 0"),
        ('sfe', 'm_b', config.sfe.m_b >= 1, ">= 1"),
        ('sfe', 'iterations', config.sfe.iterations >= 0, ">= 0"),
        ('sfe', 'generator_depth', config.sfe.generator_depth in GENERATOR_DEPTHS, f"one of {tuple(GENERATOR_DEPTHS)}"),
        ('sfe', 'discriminator_head', config.sfe.discriminator_head in DISCRIMINATOR_HEADS,
         f"one of {DISCRIMINATOR_HEADS}"),
        ('detector', 'threshold', 0.0 <= config.detector.threshold <= 1.0, "in [0, 1]"),
        ('detector', 'split_ratio', 0.0 < config.detector.split_ratio < 1.0, "in (0, 1)"),
        ('detector', 'epochs', config.detector.epochs >= 0, ">= 0"),
        ('evaluation', 'transfer_train', set(config.evaluation.transfer_train) <= set(ATTACK_NAMES),
         f"subset of {ATTACK_NAMES}"),
        ('evaluation', 'transfer_test', set(config.evaluation.transfer_test) <= set(ATTACK_NAMES),
         f"subset of {ATTACK_NAMES}"),
        ('evaluation', 'report_format', config.evaluation.report_format in ('csv', 'json'), "csv or json"),
        ('run', 'threads', config.run.threads >= 1, ">= 1"),
        ('logging', 'level', config.logging.level.upper() in ('DEBUG', 'INFO', 'WARNING', 'ERROR'),
         "DEBUG, INFO, WARNING or ERROR"),
    ]
    for section, key, ok, expected in checks:
        if not ok:
            value = getattr(getattr(config, section), key)
            raise ConfigError(f"[{section}] {key}: {value!r} must be {expected}")


def parse_config(path: Optional[Union[str, Path]] = None,
                 overrides: Optional[Dict[str, Any]] = None) -> ExperimentConfig:
    """
    Build the resolved configuration.

    Args:
        path: config.ini to read (None = defaults only)
        overrides: {"section.key": value} applied last; None values are ignored

    Raises:
        FileNotFoundError: path given but missing
        ConfigError: unknown section/key or malformed value
    """
    config = ExperimentConfig()
    if path is not None:
        path = Path(path)
        if not path.exists():
            logger.error(f"✗ Configuration file not found: {path}")
            raise FileNotFoundError(path)
        parser = configparser.ConfigParser(interpolation=None)
        try:
            parser.read(path, encoding='utf-8')
        except configparser.Error as e:
            raise ConfigError(f"{path}: {e}") from e
        for section in parser.sections():
            for key, raw in parser.items(section):
                _set(config, section, key, raw)
        logger.info(f"Loading configuration from {path}...")

    env_dir = os.environ.get(DATA_ENV)
    if env_dir:
        config.data.dir = env_dir

    for dotted, value in (overrides or {}).items():
        if value is None:
            continue
        if '.' not in dotted:
            raise ConfigError(f"Override '{dotted}' must look like section.key")
        section, key = dotted.split('.', 1)
        _set(config, section, key, value)

    validate(config)
    return config


def require_data_dir(config: ExperimentConfig) -> Path:
    """
    Raises:
        ConfigError: the dataset directory does not exist
    """
    path = Path(config.data.dir)
    if not path.is_dir():
        raise ConfigError(f"[data] dir: dataset directory {path} not found "
                          f"(set --data-dir, {DATA_ENV} or [data] dir)")
    return path


def config_hash(config: ExperimentConfig, sections: Optional[Iterable[str]] = None) -> str:
    """
    First 12 hex digits of SHA-256 over the canonical JSON of the config.

    Only `sections` are hashed when given. Output location, thread count and
    log level never enter the hash.
    """
    data = config.to_dict()
    for section, keys in UNHASHED.items():
        for key in keys:
            data[section].pop(key, None)
    if sections is not None:
        data = {name: data[name] for name in sections}
    canonical = json.dumps(data, sort_keys=True, separators=(',', ':'))
    return hashlib.sha256(canonical.encode('utf-8')).hexdigest()[:12]


def log_config(config: ExperimentConfig):
    logger.info("✓ Configuration resolved:")
    for section, values in config.to_dict().items():
        for key, value in values.items():
            logger.info(f"  [{section}] {key} = {value}")
