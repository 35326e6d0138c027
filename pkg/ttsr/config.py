#!/usr/bin/env python
"""This module implements run configuration: the RunConfig record, its validation and YAML loading """
import dataclasses
import hashlib
import json
import logging
import math
import os
from dataclasses import dataclass, field
from typing import Optional, Tuple

import yaml

from ttsr import ConfigError
from ttsr.enums import Mode, Backend, SynthesisFormat


__all__ = [
    'EndpointConfig',
    'ToyConfig',
    'RunConfig',
    'validate_config',
    'config_from_dict',
    'load_config',
    'config_hash',
    'DEFAULT_API_KEY_ENV',
]

logger = logging.getLogger(__name__)

DEFAULT_API_KEY_ENV = 'TTSR_API_KEY'

# learning rate filled in when none is given; the remote value is informational only
_default_learning_rate = {
    Backend.TOY: 4.0,
    Backend.REMOTE: 3e-7,
}


@dataclass(frozen=True)
class EndpointConfig:
    """Connection settings of an OpenAI-compatible chat-completions endpoint"""
    url: str = 'http://localhost:8000'
    model: str = 'default'
    temperature: float = 1.0
    concurrency: int = 4
    timeout: float = 60.0
    max_retries: int = 3
    backoff: float = 0.5
    api_key_env: str = DEFAULT_API_KEY_ENV

    def api_key(self):
        """Bearer token read from the configured environment variable, or None"""
        return os.environ.get(self.api_key_env) or None


@dataclass(frozen=True)
class ToyConfig:
    """Shape of the built-in modular-arithmetic task family and of the toy policy"""
    modulus: int = 97
    difficulties: Tuple[int, ...] = (1, 2, 3, 4, 5, 6)
    n_features: int = 64
    n_buckets: int = 5
    test_size: int = 32
    eval_size: int = 64
    temperature: float = 1.0
    init_scale: float = 0.01
    # spread of the hashed-feature weights and initial trust in the worked value; together they set how often
    # the untrained policy answers long chains wrongly
    feature_scale: float = 0.7
    work_prior: float = 3.0

    @property
    def n_digits(self):
        """Answer width D in base-10 digits"""
        return len(str(self.modulus - 1))


@dataclass(frozen=True)
class RunConfig:
    """
    Every knob of a test-time run. Defaults follow the published test-time parameters (G=8, M=4, T=20, KL 0.001,
    batch 16, lambda 1.0, tau 0.75)
    """
    # pylint: disable=invalid-name,too-many-instance-attributes
    G: int = 8
    M: int = 4
    M_fail: Optional[int] = None
    T: int = 20
    batch_size: int = 16
    epsilon: float = 0.2
    beta: float = 0.001
    delta: float = 1e-4
    lambda_: float = 1.0
    tau: float = 0.75
    learning_rate: Optional[float] = None
    teacher_learning_rate: float = 2.0
    max_len: int = 4096
    mode: Mode = Mode.TTSR
    backend: Backend = Backend.TOY
    seed: int = 0
    student_epochs: int = 1
    workers: int = 1
    eval_k: int = 32
    synthesis_format: SynthesisFormat = SynthesisFormat.JSON
    questions_path: Optional[str] = None
    endpoint: EndpointConfig = field(default_factory=EndpointConfig)
    toy: ToyConfig = field(default_factory=ToyConfig)

    @property
    def effective_lambda(self):
        """Similarity penalty coefficient actually applied; the no_sim_penalty ablation forces 0"""
        return 0.0 if Mode(self.mode) is Mode.NO_SIM_PENALTY else self.lambda_

    def to_dict(self):
        """Plain document form; ``lambda_`` is written under its external name ``lambda``"""
        data = dataclasses.asdict(self)
        data['lambda'] = data.pop('lambda_')
        data['mode'] = Mode(self.mode).value
        data['backend'] = Backend(self.backend).value
        data['synthesis_format'] = SynthesisFormat(self.synthesis_format).value
        data['toy']['difficulties'] = list(self.toy.difficulties)
        return data


_int_fields = ('G', 'M', 'M_fail', 'T', 'batch_size', 'max_len', 'seed', 'student_epochs', 'workers', 'eval_k')
_float_fields = ('epsilon', 'beta', 'delta', 'lambda_', 'tau', 'learning_rate', 'teacher_learning_rate')
_enum_fields = {'mode': Mode, 'backend': Backend, 'synthesis_format': SynthesisFormat}

_endpoint_int_fields = ('concurrency', 'max_retries')
_endpoint_float_fields = ('temperature', 'timeout', 'backoff')
_toy_int_fields = ('modulus', 'n_features', 'n_buckets', 'test_size', 'eval_size')
_toy_float_fields = ('temperature', 'init_scale', 'feature_scale', 'work_prior')


def _as_int(value, name, problems):
    if value is None:
        return None
    if isinstance(value, bool) or not isinstance(value, (int, float, str)):
        problems.append((name, 'must be an integer'))
        return None
    try:
        number = float(value)
    except ValueError:
        problems.append((name, 'must be an integer'))
        return None
    if not math.isfinite(number) or number != int(number):
        problems.append((name, 'must be an integer'))
        return None
    return int(number)


def _as_float(value, name, problems):
    if value is None:
        return None
    if isinstance(value, bool):
        problems.append((name, 'must be a number'))
        return None
    try:
        number = float(value)
    except (TypeError, ValueError):
        problems.append((name, 'must be a number'))
        return None
    if not math.isfinite(number):
        problems.append((name, 'must be finite'))
        return None
    return number


def _check(problems, condition, name, message):
    if not condition:
        problems.append((name, message))


def _validate_endpoint(endpoint, problems):
    values = {}
    for name in _endpoint_int_fields:
        values[name] = _as_int(getattr(endpoint, name), 'endpoint.' + name, problems)
    for name in _endpoint_float_fields:
        values[name] = _as_float(getattr(endpoint, name), 'endpoint.' + name, problems)
    for name in ('url', 'model', 'api_key_env'):
        value = getattr(endpoint, name)
        _check(problems, isinstance(value, str) and value, 'endpoint.' + name, 'must be a non-empty string')
        values[name] = value
    if values['concurrency'] is not None:
        _check(problems, values['concurrency'] >= 1, 'endpoint.concurrency', 'concurrency ≥ 1 required')
    if values['max_retries'] is not None:
        _check(problems, 0 <= values['max_retries'] <= 3, 'endpoint.max_retries', 'max_retries must be in [0, 3]')
    if values['timeout'] is not None:
        _check(problems, values['timeout'] > 0, 'endpoint.timeout', 'timeout > 0 required')
    if values['backoff'] is not None:
        _check(problems, values['backoff'] >= 0, 'endpoint.backoff', 'backoff ≥ 0 required')
    if values['temperature'] is not None:
        _check(problems, values['temperature'] >= 0, 'endpoint.temperature', 'temperature ≥ 0 required')
    return values


def _validate_toy(toy, problems):
    values = {}
    for name in _toy_int_fields:
        values[name] = _as_int(getattr(toy, name), 'toy.' + name, problems)
    for name in _toy_float_fields:
        values[name] = _as_float(getattr(toy, name), 'toy.' + name, problems)
    difficulties = toy.difficulties
    if isinstance(difficulties, (int, str)) or not difficulties:
        problems.append(('toy.difficulties', 'must be a non-empty list of chain lengths'))
        values['difficulties'] = None
    else:
        parsed = tuple(_as_int(k, 'toy.difficulties', problems) for k in difficulties)
        if any(k is not None and k < 1 for k in parsed):
            problems.append(('toy.difficulties', 'every difficulty must be ≥ 1'))
        values['difficulties'] = parsed
    if values['modulus'] is not None:
        _check(problems, values['modulus'] >= 2, 'toy.modulus', 'modulus ≥ 2 required')
    for name in ('n_features', 'n_buckets', 'test_size', 'eval_size'):
        if values[name] is not None:
            _check(problems, values[name] >= 1, 'toy.' + name, '{0} ≥ 1 required'.format(name))
    if values['temperature'] is not None:
        _check(problems, values['temperature'] > 0, 'toy.temperature', 'temperature > 0 required')
    if values['init_scale'] is not None:
        _check(problems, values['init_scale'] >= 0, 'toy.init_scale', 'init_scale ≥ 0 required')
    if values['feature_scale'] is not None:
        _check(problems, values['feature_scale'] >= 0, 'toy.feature_scale', 'feature_scale ≥ 0 required')
    return values


def validate_config(cfg):
    """
    Check every invariant of a :class:`RunConfig` and fill derived defaults

    :param cfg:
        a RunConfig, possibly with raw (string or float) values

    :raises:
        - ConfigError - listing every violated invariant together with its field name
        - TypeError - if ``cfg`` is not a RunConfig

    :returns:
        a validated RunConfig; validating it again returns an equal value
    """
    # pylint: disable=too-many-branches
    if not isinstance(cfg, RunConfig):
        raise TypeError('validate_config expects a RunConfig, you provided {0}'.format(type(cfg).__name__))
    problems = []
    values = {}
    for name in _int_fields:
        values[name] = _as_int(getattr(cfg, name), name, problems)
    for name in _float_fields:
        values[name] = _as_float(getattr(cfg, name), name.rstrip('_'), problems)
    for name, enum in _enum_fields.items():
        try:
            values[name] = enum(getattr(cfg, name))
        except ValueError:
            allowed = '|'.join(member.value for member in enum)
            problems.append((name, 'must be one of {0}'.format(allowed)))
            values[name] = None

    if values['G'] is not None:
        _check(problems, values['G'] >= 2, 'G', 'G ≥ 2 required')
    if values['M'] is not None:
        _check(problems, values['M'] >= 1, 'M', 'M ≥ 1 required')
    if values['M_fail'] is None and getattr(cfg, 'M_fail') is None:
        values['M_fail'] = values['M']
    elif values['M_fail'] is not None:
        _check(problems, values['M_fail'] >= 1, 'M_fail', 'M_fail ≥ 1 required')
    if values['T'] is not None:
        _check(problems, values['T'] >= 0, 'T', 'T ≥ 0 required')
    if values['batch_size'] is not None:
        _check(problems, values['batch_size'] >= 1, 'batch_size', 'batch_size ≥ 1 required')
    if values['epsilon'] is not None:
        _check(problems, 0 < values['epsilon'] < 1, 'epsilon', 'epsilon must be in (0, 1)')
    if values['beta'] is not None:
        _check(problems, values['beta'] >= 0, 'beta', 'beta ≥ 0 required')
    if values['delta'] is not None:
        _check(problems, values['delta'] > 0, 'delta', 'delta > 0 required')
    if values['lambda_'] is not None:
        _check(problems, values['lambda_'] >= 0, 'lambda', 'lambda ≥ 0 required')
    if values['tau'] is not None:
        _check(problems, 0 <= values['tau'] < 1, 'tau', 'tau must be in [0, 1)')
    if values['learning_rate'] is None and cfg.learning_rate is None and values['backend'] is not None:
        values['learning_rate'] = _default_learning_rate[values['backend']]
    elif values['learning_rate'] is not None:
        _check(problems, values['learning_rate'] >= 0, 'learning_rate', 'learning_rate ≥ 0 required')
    if values['teacher_learning_rate'] is not None:
        _check(problems, values['teacher_learning_rate'] >= 0, 'teacher_learning_rate',
               'teacher_learning_rate ≥ 0 required')
    for name in ('max_len', 'student_epochs', 'workers', 'eval_k'):
        if values[name] is not None:
            _check(problems, values[name] >= 1, name, '{0} ≥ 1 required'.format(name))
    if values['seed'] is not None:
        _check(problems, values['seed'] >= 0, 'seed', 'seed ≥ 0 required')

    if not isinstance(cfg.endpoint, EndpointConfig):
        problems.append(('endpoint', 'must be an endpoint block'))
        endpoint = None
    else:
        endpoint = _validate_endpoint(cfg.endpoint, problems)
    if not isinstance(cfg.toy, ToyConfig):
        problems.append(('toy', 'must be a toy block'))
        toy = None
    else:
        toy = _validate_toy(cfg.toy, problems)

    if values['backend'] is Backend.REMOTE and not cfg.questions_path:
        problems.append(('questions_path', 'the remote backend needs a questions file'))

    if problems:
        raise ConfigError(problems)

    values['questions_path'] = cfg.questions_path
    return RunConfig(endpoint=EndpointConfig(**endpoint), toy=ToyConfig(**toy), **values)


def _split_known(data, known, prefix, problems):
    if not isinstance(data, dict):
        problems.append((prefix.rstrip('.') or 'config', 'must be a mapping'))
        return {}
    unknown = sorted(set(data) - set(known))
    for name in unknown:
        problems.append((prefix + str(name), 'unknown key'))
    return {name: value for name, value in data.items() if name in known}


def config_from_dict(data, **overrides):
    """
    Build and validate a :class:`RunConfig` from a plain document. The key ``lambda`` maps to ``lambda_``;
    unknown keys are errors. ``overrides`` (e.g. from the command line) win over the document; None values are
    ignored
    """
    problems = []
    data = dict(data or {})
    if 'lambda' in data:
        data['lambda_'] = data.pop('lambda')
    for name, value in overrides.items():
        if value is not None:
            data[name] = value
    known = {f.name for f in dataclasses.fields(RunConfig)}
    top = _split_known(data, known, '', problems)
    endpoint_known = {f.name for f in dataclasses.fields(EndpointConfig)}
    toy_known = {f.name for f in dataclasses.fields(ToyConfig)}
    top['endpoint'] = EndpointConfig(**_split_known(top.get('endpoint', {}) or {}, endpoint_known,
                                                    'endpoint.', problems))
    toy = _split_known(top.get('toy', {}) or {}, toy_known, 'toy.', problems)
    if isinstance(toy.get('difficulties'), list):
        toy['difficulties'] = tuple(toy['difficulties'])
    top['toy'] = ToyConfig(**toy)
    if problems:
        raise ConfigError(problems)
    return validate_config(RunConfig(**top))


def load_config(path, **overrides):
    """
    Read a YAML (or JSON) config file

    :raises:
        - ConfigError - on unreadable, malformed or invalid documents
    """
    try:
        with open(path, 'r', encoding='utf-8') as stream:
            data = yaml.safe_load(stream)
    except OSError as error:
        raise ConfigError([('config', 'cannot read {0}: {1}'.format(path, error.strerror))]) from error
    except yaml.YAMLError as error:
        raise ConfigError([('config', 'malformed document {0}: {1}'.format(path, error))]) from error
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError([('config', 'top level of {0} must be a mapping'.format(path))])
    cfg = config_from_dict(data, **overrides)
    logger.info('Loaded configuration from %s (mode=%s, backend=%s)', path, cfg.mode.value, cfg.backend.value)
    return cfg


def config_hash(cfg):
    """SHA-256 hex digest of the canonical JSON form of a validated config"""
    document = json.dumps(cfg.to_dict(), sort_keys=True, separators=(',', ':'), ensure_ascii=True)
    return hashlib.sha256(document.encode('utf-8')).hexdigest()
