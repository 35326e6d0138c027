#!/usr/bin/env python
"""This module defines the core domain types, errors and the policy contract of the ttsr package """
# pylint: disable=too-many-lines
# the value records live together so that snapshot (de)serialisation has a single home

import abc
import math
from dataclasses import dataclass, field
from typing import Dict, Optional, Tuple

from .version import __version__, __version_info__
from .enums import Source, Operator


__all__ = [
    '__version__',
    '__version_info__',
    'enums',
    'config',
    'grpo',
    'consensus',
    'similarity',
    'rewards',
    'curriculum',
    'tasks',
    'policies',
    'orchestrator',
    'rundir',
    'EMPTY_ANSWER',
    'ConfigError',
    'ParseFailure',
    'GroupTooSmall',
    'ContinuityError',
    'NonFiniteGradient',
    'EndpointError',
    'EndpointTimeout',
    'IterationAborted',
    'ToyQuestionSpec',
    'Question',
    'QuestionView',
    'Trajectory',
    'TrajectoryGroup',
    'FailedInstance',
    'ReflectionRecord',
    'ErrorHittingStrategy',
    'SelfTest',
    'SynthesisRecord',
    'VariantQuestion',
    'IterationSnapshot',
    'PolicyHandle',
    'Policy',
]


EMPTY_ANSWER = '∅'

ADVANTAGE_SUM_TOLERANCE = 1e-9


class ConfigError(ValueError):
    """
    Raised by config validation; carries every violated invariant as ``(field, message)`` pairs
    """
    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__('; '.join('{0}: {1}'.format(name, msg) for name, msg in self.problems))


class ParseFailure(ValueError):
    """
    Raised when a Teacher output doesn't match its schema. ``field`` names the offending field, if any
    """
    def __init__(self, message, field_name=None):
        self.field = field_name
        super().__init__(message)


class GroupTooSmall(ValueError):
    """Raised when a rollout group has fewer than two members"""


class ContinuityError(ValueError):
    """Raised when the old distribution has zero mass where the new one has positive mass"""


class NonFiniteGradient(ArithmeticError):
    """
    Raised when a policy gradient contains NaN or infinite entries. ``block`` names the parameter block
    """
    def __init__(self, block, message=None):
        self.block = block
        super().__init__(message or 'non-finite gradient in parameter block {0}'.format(block))


class EndpointError(OSError):
    """
    Raised when a chat-completions endpoint can't serve a request
    """
    def __init__(self, message, question_id=None, status=None):
        self.question_id = question_id
        self.status = status
        super().__init__(message)


class EndpointTimeout(EndpointError):
    """Raised when every attempt of a request timed out"""


class IterationAborted(RuntimeError):
    """
    Raised when a test-time iteration fails midway. ``snapshot`` holds the state persisted up to the failure
    """
    def __init__(self, message, snapshot=None):
        self.snapshot = snapshot
        super().__init__(message)


def _tuple_of_str(values, name):
    if isinstance(values, str) or not isinstance(values, (list, tuple)):
        raise ParseFailure('{0} must be a list of strings'.format(name), name)
    if not values:
        raise ParseFailure('{0} must not be empty'.format(name), name)
    for value in values:
        if not isinstance(value, str) or not value.strip():
            raise ParseFailure('{0} must contain only non-empty strings'.format(name), name)
    return tuple(values)


def _non_empty_str(value, name):
    if not isinstance(value, str):
        raise ParseFailure('{0} must be a string'.format(name), name)
    if not value.strip():
        raise ParseFailure('{0} must not be empty'.format(name), name)
    return value


@dataclass(frozen=True)
class ToyQuestionSpec:
    """
    A toy modular-arithmetic instance: start from 0 and fold ``op_chain`` modulo ``modulus``
    """
    modulus: int
    op_chain: Tuple[Tuple[Operator, int], ...]

    def __post_init__(self):
        if int(self.modulus) < 2:
            raise ValueError('modulus should be at least 2, you provided {0}'.format(self.modulus))
        chain = tuple((Operator(op), int(operand)) for op, operand in self.op_chain)
        if not chain:
            raise ValueError('op_chain should contain at least one step')
        for _, operand in chain:
            if not 0 <= operand < int(self.modulus):
                raise ValueError('operand {0} is outside [0, {1})'.format(operand, self.modulus))
        object.__setattr__(self, 'modulus', int(self.modulus))
        object.__setattr__(self, 'op_chain', chain)

    @property
    def difficulty(self):
        """Chain length k"""
        return len(self.op_chain)

    def answer(self):
        """Left fold of the chain from 0"""
        acc = 0
        for operator, operand in self.op_chain:
            acc = operator.apply(acc, operand, self.modulus)
        return acc

    def to_dict(self):
        return {'modulus': self.modulus, 'op_chain': [[op.value, operand] for op, operand in self.op_chain]}

    @classmethod
    def from_dict(cls, data):
        return cls(modulus=data['modulus'], op_chain=tuple((op, operand) for op, operand in data['op_chain']))


@dataclass(frozen=True)
class QuestionView:
    """
    The reward-facing view of a :class:`Question`. It has no ground truth, so nothing on the reward path can
    read one
    """
    id: str
    body: str
    source: Source = Source.TEST
    origin_id: Optional[str] = None
    toy_payload: Optional[ToyQuestionSpec] = None


@dataclass(frozen=True)
class Question:
    """
    A solvable task instance, either an original test item or a Teacher-synthesised variant
    """
    # pylint: disable=invalid-name
    id: str
    body: str
    source: Source = Source.TEST
    origin_id: Optional[str] = None
    toy_payload: Optional[ToyQuestionSpec] = None
    ground_truth: Optional[str] = None

    def __post_init__(self):
        object.__setattr__(self, 'source', Source(self.source))
        if not self.id:
            raise ValueError('question id must not be empty')
        if self.source is Source.VARIANT and not self.origin_id:
            raise ValueError('variant question {0} has no origin_id'.format(self.id))
        if self.toy_payload is not None:
            expected = str(self.toy_payload.answer())
            if self.ground_truth is None:
                raise ValueError('toy question {0} carries no ground truth'.format(self.id))
            if self.ground_truth != expected:
                raise ValueError(
                    'ground truth of {0} is {1}, but its op_chain folds to {2}'.format(self.id, self.ground_truth,
                                                                                     expected)
                )

    def view(self):
        """Return the reward-facing view of this question"""
        return QuestionView(id=self.id, body=self.body, source=self.source, origin_id=self.origin_id,
                            toy_payload=self.toy_payload)

    def to_dict(self):
        return {
            'id': self.id,
            'body': self.body,
            'source': self.source.value,
            'origin_id': self.origin_id,
            'toy_payload': None if self.toy_payload is None else self.toy_payload.to_dict(),
            'ground_truth': self.ground_truth,
        }

    @classmethod
    def from_dict(cls, data):
        payload = data.get('toy_payload')
        return cls(id=data['id'], body=data['body'], source=data.get('source', Source.TEST.value),
                   origin_id=data.get('origin_id'),
                   toy_payload=None if payload is None else ToyQuestionSpec.from_dict(payload),
                   ground_truth=data.get('ground_truth'))


@dataclass(frozen=True)
class Trajectory:
    """
    One sampled reasoning trajectory. ``old_logprobs``/``old_distributions`` record the behaviour policy at
    sampling time and are absent for endpoints that expose no log-probabilities. ``context`` holds
    policy-specific conditioning indices (hashed features, a difficulty bucket)
    """
    question_id: str
    token_ids: Tuple[int, ...]
    text: str
    answer_raw: str
    answer_canonical: str
    old_logprobs: Optional[Tuple[float, ...]] = None
    old_distributions: Optional[Tuple[Tuple[float, ...], ...]] = None
    context: Tuple[int, ...] = ()

    def __post_init__(self):
        # pylint: disable=import-outside-toplevel,cyclic-import
        from ttsr.consensus import canonicalize_answer

        object.__setattr__(self, 'token_ids', tuple(int(x) for x in self.token_ids))
        object.__setattr__(self, 'context', tuple(int(x) for x in self.context))
        if self.answer_canonical != canonicalize_answer(self.answer_raw):
            raise ValueError(
                'answer_canonical {0!r} does not derive from answer_raw {1!r}'.format(self.answer_canonical,
                                                                                      self.answer_raw)
            )
        if self.old_logprobs is not None:
            logprobs = tuple(float(x) for x in self.old_logprobs)
            if len(logprobs) != len(self.token_ids) or not logprobs:
                raise ValueError('old_logprobs length {0} differs from token count {1}'.format(
                    len(logprobs), len(self.token_ids)))
            if any(x > 0.0 or math.isnan(x) for x in logprobs):
                raise ValueError('old_logprobs must all be <= 0')
            object.__setattr__(self, 'old_logprobs', logprobs)
        if self.old_distributions is not None:
            dists = tuple(tuple(float(p) for p in row) for row in self.old_distributions)
            if len(dists) != len(self.token_ids):
                raise ValueError('one old distribution per token is required')
            object.__setattr__(self, 'old_distributions', dists)

    @property
    def length(self):
        """|y|: token count, or the word count of the text when no token ids are known (at least 1)"""
        if self.token_ids:
            return len(self.token_ids)
        return max(1, len(self.text.split()))

    def to_dict(self):
        return {
            'question_id': self.question_id,
            'token_ids': list(self.token_ids),
            'text': self.text,
            'answer_raw': self.answer_raw,
            'answer_canonical': self.answer_canonical,
            'old_logprobs': None if self.old_logprobs is None else list(self.old_logprobs),
            'old_distributions': None if self.old_distributions is None else [list(r) for r in
                                                                              self.old_distributions],
            'context': list(self.context),
        }

    @classmethod
    def from_dict(cls, data):
        logprobs = data.get('old_logprobs')
        dists = data.get('old_distributions')
        return cls(question_id=data['question_id'], token_ids=tuple(data['token_ids']), text=data['text'],
                   answer_raw=data['answer_raw'], answer_canonical=data['answer_canonical'],
                   old_logprobs=None if logprobs is None else tuple(logprobs),
                   old_distributions=None if dists is None else tuple(tuple(r) for r in dists),
                   context=tuple(data.get('context', ())))


@dataclass(frozen=True)
class TrajectoryGroup:
    """
    The G trajectories of one question together with their consensus, binary rewards and advantages
    """
    question_id: str
    trajectories: Tuple[Trajectory, ...]
    rewards: Tuple[float, ...]
    advantages: Tuple[float, ...]
    pseudo_target: str
    tie_flag: bool
    score_s: float

    def __post_init__(self):
        object.__setattr__(self, 'trajectories', tuple(self.trajectories))
        object.__setattr__(self, 'rewards', tuple(float(r) for r in self.rewards))
        object.__setattr__(self, 'advantages', tuple(float(a) for a in self.advantages))
        size = len(self.trajectories)
        if size == 0 or len(self.rewards) != size or len(self.advantages) != size:
            raise ValueError('trajectories, rewards and advantages must have the same non-zero length')
        if any(r not in (0.0, 1.0) for r in self.rewards):
            raise ValueError('group rewards must each be 0 or 1')
        if sum(self.rewards) / size != self.score_s:
            raise ValueError('score_s {0} differs from the mean reward'.format(self.score_s))
        if len(set(self.rewards)) == 1:
            if any(a != 0.0 for a in self.advantages):
                raise ValueError('equal rewards must give exactly zero advantages')
        elif abs(math.fsum(self.advantages)) > ADVANTAGE_SUM_TOLERANCE:
            raise ValueError('advantages must sum to 0')

    @property
    def size(self):
        """G"""
        return len(self.trajectories)

    def to_dict(self, with_trajectories=True):
        data = {
            'question_id': self.question_id,
            'rewards': list(self.rewards),
            'advantages': list(self.advantages),
            'pseudo_target': self.pseudo_target,
            'tie_flag': self.tie_flag,
            'score_s': self.score_s,
        }
        if with_trajectories:
            data['trajectories'] = [t.to_dict() for t in self.trajectories]
        return data

    @classmethod
    def from_dict(cls, data, trajectories=None):
        if trajectories is None:
            trajectories = [Trajectory.from_dict(t) for t in data['trajectories']]
        return cls(question_id=data['question_id'], trajectories=tuple(trajectories),
                   rewards=tuple(data['rewards']), advantages=tuple(data['advantages']),
                   pseudo_target=data['pseudo_target'], tie_flag=data['tie_flag'], score_s=data['score_s'])


@dataclass(frozen=True)
class FailedInstance:
    """
    A failed tuple (x, y, y_hat): a question view, a zero-reward trajectory and the consensus it missed. An empty
    consensus fails every trajectory of its group
    """
    question: QuestionView
    trajectory: Trajectory
    pseudo_target: str
    score_s: float = 0.0

    def __post_init__(self):
        if not isinstance(self.question, QuestionView):
            raise TypeError('failed instances carry the reward-facing question view, not {0}'.format(
                type(self.question).__name__))
        if self.pseudo_target != EMPTY_ANSWER and self.trajectory.answer_canonical == self.pseudo_target:
            raise ValueError('trajectory of {0} agrees with its pseudo target'.format(self.question.id))


@dataclass(frozen=True)
class ReflectionRecord:
    """A schema-valid reasoning-weakness diagnosis"""
    reasoning_weakness: str
    trigger_conditions: Tuple[str, ...]
    failure_signature: Tuple[str, ...]
    localization_summary: str

    def __post_init__(self):
        _non_empty_str(self.reasoning_weakness, 'reasoning_weakness')
        object.__setattr__(self, 'trigger_conditions', _tuple_of_str(self.trigger_conditions,
                                                                     'trigger_conditions'))
        object.__setattr__(self, 'failure_signature', _tuple_of_str(self.failure_signature, 'failure_signature'))
        _non_empty_str(self.localization_summary, 'localization_summary')

    def to_dict(self):
        return {
            'reasoning_weakness': self.reasoning_weakness,
            'trigger_conditions': list(self.trigger_conditions),
            'failure_signature': list(self.failure_signature),
            'localization_summary': self.localization_summary,
        }

    @classmethod
    def from_dict(cls, data):
        return cls(**{name: data[name] for name in ('reasoning_weakness', 'trigger_conditions',
                                                    'failure_signature', 'localization_summary')})


@dataclass(frozen=True)
class ErrorHittingStrategy:
    """How a synthesised question is meant to trigger the weakness"""
    what_to_avoid: Tuple[str, ...]
    what_to_add: Tuple[str, ...]
    shortcut_to_block: Tuple[str, ...]
    fairness_check: str

    def __post_init__(self):
        for name in ('what_to_avoid', 'what_to_add', 'shortcut_to_block'):
            object.__setattr__(self, name, _tuple_of_str(getattr(self, name),
                                                         'error_hitting_strategy.' + name))
        _non_empty_str(self.fairness_check, 'error_hitting_strategy.fairness_check')


@dataclass(frozen=True)
class SelfTest:
    """Model-side self-test verdicts; each starts with YES or NO"""
    likely_to_trigger_weakness: str
    learnable_frontier: str
    not_surface_paraphrase: str

    def __post_init__(self):
        for name in ('likely_to_trigger_weakness', 'learnable_frontier', 'not_surface_paraphrase'):
            value = _non_empty_str(getattr(self, name), 'self_test.' + name)
            if not value.lstrip().upper().startswith(('YES', 'NO')):
                raise ParseFailure('self_test.{0} must begin with YES or NO'.format(name), 'self_test.' + name)


@dataclass(frozen=True)
class SynthesisRecord:
    """A schema-valid synthesis output: one generated question plus its rationale and self-test"""
    anchor_structure: Tuple[str, ...]
    error_hitting_strategy: ErrorHittingStrategy
    generated_question: str
    hit_rationale: Tuple[str, ...]
    self_test: SelfTest

    def __post_init__(self):
        object.__setattr__(self, 'anchor_structure', _tuple_of_str(self.anchor_structure, 'anchor_structure'))
        _non_empty_str(self.generated_question, 'generated_question')
        object.__setattr__(self, 'hit_rationale', _tuple_of_str(self.hit_rationale, 'hit_rationale'))

    def to_dict(self):
        strategy = self.error_hitting_strategy
        return {
            'anchor_structure': list(self.anchor_structure),
            'error_hitting_strategy': {
                'what_to_avoid': list(strategy.what_to_avoid),
                'what_to_add': list(strategy.what_to_add),
                'shortcut_to_block': list(strategy.shortcut_to_block),
                'fairness_check': strategy.fairness_check,
            },
            'generated_question': self.generated_question,
            'hit_rationale': list(self.hit_rationale),
            'self_test': {
                'likely_to_trigger_weakness': self.self_test.likely_to_trigger_weakness,
                'learnable_frontier': self.self_test.learnable_frontier,
                'not_surface_paraphrase': self.self_test.not_surface_paraphrase,
            },
        }


@dataclass(frozen=True)
class VariantQuestion:
    """
    A synthesised question that passed the format gate, with its difficulty and diversity scores
    """
    question: Question
    s_score: float
    r_diff: float
    r_sim: float
    r_teacher: Optional[float]
    gated: bool = True
    lambda_: float = 1.0

    def __post_init__(self):
        if self.question.source is not Source.VARIANT:
            raise ValueError('variant {0} is not marked as a variant question'.format(self.question.id))
        if self.gated:
            expected = max(0.0, self.r_diff - self.lambda_ * self.r_sim)
            if self.r_teacher is None or abs(self.r_teacher - expected) > 1e-12:
                raise ValueError('r_teacher of {0} should be {1}'.format(self.question.id, expected))
        elif self.r_teacher is not None:
            raise ValueError('gated-out variants carry no teacher reward')

    def to_dict(self):
        return {
            'question': self.question.to_dict(),
            's_score': self.s_score,
            'r_diff': self.r_diff,
            'r_sim': self.r_sim,
            'r_teacher': self.r_teacher,
            'gated': self.gated,
            'lambda': self.lambda_,
        }

    @classmethod
    def from_dict(cls, data):
        return cls(question=Question.from_dict(data['question']), s_score=data['s_score'], r_diff=data['r_diff'],
                   r_sim=data['r_sim'], r_teacher=data['r_teacher'], gated=data['gated'],
                   lambda_=data['lambda'])


@dataclass(frozen=True)
class IterationSnapshot:
    """
    The full state of one test-time iteration: D_t, the rollout groups, Teacher outputs and metrics.
    ``variants`` is the admitted pool X_var^(t); ``candidates`` every gated and scored candidate
    """
    # pylint: disable=too-many-instance-attributes
    t: int
    training_set: Tuple[str, ...]
    groups: Tuple[TrajectoryGroup, ...] = ()
    reflections: Tuple[ReflectionRecord, ...] = ()
    variants: Tuple[VariantQuestion, ...] = ()
    candidates: Tuple[VariantQuestion, ...] = ()
    metrics: Dict[str, float] = field(default_factory=dict)
    error: Optional[str] = None

    def __post_init__(self):
        for name in ('training_set', 'groups', 'reflections', 'variants', 'candidates'):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        known = set(self.training_set)
        for variant in self.variants + self.candidates:
            if variant.question.origin_id not in known:
                raise ValueError('variant {0} derives from {1}, which is not in D_{2}'.format(
                    variant.question.id, variant.question.origin_id, self.t))

    def to_dict(self, with_trajectories=True):
        return {
            't': self.t,
            'training_set': list(self.training_set),
            'groups': [g.to_dict(with_trajectories=with_trajectories) for g in self.groups],
            'reflections': [r.to_dict() for r in self.reflections],
            'variants': [v.to_dict() for v in self.variants],
            'candidates': [v.to_dict() for v in self.candidates],
            'metrics': dict(self.metrics),
            'error': self.error,
        }

    @classmethod
    def from_dict(cls, data, trajectories=None):
        """
        :param trajectories:
            optional mapping question_id -> list of trajectories, used when the document was written without them
        """
        groups = []
        for group in data['groups']:
            trajs = None if trajectories is None else trajectories[group['question_id']]
            groups.append(TrajectoryGroup.from_dict(group, trajectories=trajs))
        return cls(t=data['t'], training_set=tuple(data['training_set']), groups=tuple(groups),
                   reflections=tuple(ReflectionRecord.from_dict(r) for r in data['reflections']),
                   variants=tuple(VariantQuestion.from_dict(v) for v in data['variants']),
                   candidates=tuple(VariantQuestion.from_dict(v) for v in data.get('candidates', ())),
                   metrics=dict(data['metrics']), error=data.get('error'))


class PolicyHandle(abc.ABC):
    """
    A learnable parameter block as seen by the GRPO optimizer. Trajectories scored through a handle must
    come from the same block
    """
    name = 'policy'

    @abc.abstractmethod
    def get_parameters(self):
        """Return a flat copy of the parameters"""

    @abc.abstractmethod
    def set_parameters(self, flat):
        """Overwrite the parameters from a flat vector"""

    @abc.abstractmethod
    def score_logprobs(self, trajectory):
        """Per-token log-probabilities of ``trajectory`` under the current parameters"""

    @abc.abstractmethod
    def token_distributions(self, trajectory):
        """Full categorical distribution per token position under the current parameters"""

    @abc.abstractmethod
    def logprob_gradient(self, trajectory, weights):
        """Gradient of sum_t w_t log pi(y_t | ...) with respect to the flat parameters"""

    @abc.abstractmethod
    def kl_gradient(self, trajectory, weights):
        """Gradient of sum_t w_t KL(pi(.|...) || old_t) against the trajectory's stored old distributions"""


class Policy(abc.ABC):
    """
    The policy contract shared by the two backends. A single model plays both roles; backends that can learn
    expose a ``student`` and a ``teacher`` :class:`PolicyHandle`
    """
    learnable = False
    student = None
    teacher = None

    @abc.abstractmethod
    def sample_group(self, question, group_size, rng=None, temperature=None):
        """
        Sample ``group_size`` trajectories for a question view

        :returns:
            a list of :class:`Trajectory`
        """

    @abc.abstractmethod
    def greedy_answer(self, question):
        """Canonical answer of the deterministic (temperature -> 0) decode"""
