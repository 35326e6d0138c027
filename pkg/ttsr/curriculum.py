#!/usr/bin/env python
"""This module implements the curriculum: failed-instance sampling, Teacher prompts and their parsers, D_t and
variant admission """
import json
import logging
import os
from dataclasses import dataclass

from jinja2 import Environment, FileSystemLoader

from ttsr import (FailedInstance, ReflectionRecord, SynthesisRecord, ErrorHittingStrategy, SelfTest, ParseFailure,
                  Question, QuestionView, Trajectory)


__all__ = [
    'collect_failed_instances',
    'untargeted_sources',
    'SynthesisSource',
    'sample_failed',
    'sample_batch',
    'build_reflection_prompt',
    'parse_reflection',
    'build_synthesis_prompt',
    'parse_synthesis',
    'build_student_prompt',
    'build_training_set',
    'admit_variants',
    'weakness_json',
]

logger = logging.getLogger(__name__)

_template_env = Environment(
    autoescape=False,
    loader=FileSystemLoader(os.path.join(os.path.dirname(os.path.abspath(__file__)), 'templates')),
    trim_blocks=True,
    keep_trailing_newline=True)

_reflection_fields = ('reasoning_weakness', 'trigger_conditions', 'failure_signature', 'localization_summary')
_strategy_fields = ('what_to_avoid', 'what_to_add', 'shortcut_to_block', 'fairness_check')
_self_test_fields = ('likely_to_trigger_weakness', 'learnable_frontier', 'not_surface_paraphrase')
_synthesis_fields = ('anchor_structure', 'error_hitting_strategy', 'generated_question', 'hit_rationale', 'self_test')


def _view_of(question):
    return question.view() if isinstance(question, Question) else question


def collect_failed_instances(groups, questions):
    """
    One :class:`ttsr.FailedInstance` per zero-reward trajectory, in group order

    :param groups: scored :class:`ttsr.TrajectoryGroup` objects

    :param questions: mapping question id -> Question or QuestionView
    """
    failed = []
    for group in groups:
        view = _view_of(questions[group.question_id])
        for trajectory, reward in zip(group.trajectories, group.rewards):
            if reward == 0:
                failed.append(FailedInstance(question=view, trajectory=trajectory, pseudo_target=group.pseudo_target,
                                             score_s=group.score_s))
    return failed


@dataclass(frozen=True)
class SynthesisSource:
    """A question the Teacher may perturb without a diagnosed failure: its view, one trace and its group score"""
    question: QuestionView
    trajectory: Trajectory
    score_s: float


def untargeted_sources(groups, questions):
    """One synthesis source per rollout group (its first trace), ignoring whether anything failed"""
    return [SynthesisSource(question=_view_of(questions[group.question_id]), trajectory=group.trajectories[0],
                            score_s=group.score_s) for group in groups]


def _sample_indices(size, cap, rng):
    if cap < 1:
        raise ValueError('cap should be at least 1, you provided {0}'.format(cap))
    if size <= cap:
        return list(range(size))
    return sorted(int(i) for i in rng.choice(size, size=cap, replace=False))


def sample_failed(pool, cap, rng):
    """Uniform sample without replacement of min(cap, |pool|) failed instances, kept in pool order"""
    pool = list(pool)
    return [pool[i] for i in _sample_indices(len(pool), cap, rng)]


def sample_batch(training_set, batch_size, rng):
    """Uniform batch without replacement from D_t, kept in D_t order"""
    training_set = list(training_set)
    return [training_set[i] for i in _sample_indices(len(training_set), batch_size, rng)]


def build_reflection_prompt(failed):
    """
    Render the weakness-extraction prompt; each failed (question, trace) pair fills one input block

    :raises:
        - ValueError - on an empty failed set
    """
    failed = list(failed)
    if not failed:
        raise ValueError('the reflection prompt needs at least one failed instance')
    return _template_env.get_template('reflection.txt.j2').render({'instances': failed})


def _load_document(raw):
    try:
        document = json.loads(raw)
    except (TypeError, ValueError) as error:
        raise ParseFailure('malformed document: {0}'.format(error)) from error
    if not isinstance(document, dict):
        raise ParseFailure('malformed document: top level must be an object')
    return document


def _require(document, names, prefix=''):
    for name in names:
        if name not in document or document[name] is None:
            raise ParseFailure('missing {0}{1}'.format(prefix, name), prefix + name)


def parse_reflection(raw):
    """
    Strict parse of a reflection output. Unknown fields are ignored

    :raises:
        - ParseFailure - malformed document, or a missing, empty or mistyped field (named in ``.field``)
    """
    document = _load_document(raw)
    _require(document, _reflection_fields)
    return ReflectionRecord(**{name: document[name] for name in _reflection_fields})


def weakness_json(reflection):
    """The weakness slot of the synthesis prompt"""
    return json.dumps({
        'reasoning_weakness': reflection.reasoning_weakness,
        'trigger_conditions': list(reflection.trigger_conditions),
        'failure_signature': list(reflection.failure_signature),
    }, indent=2, ensure_ascii=False)


def build_synthesis_prompt(failed, reflection, tagged=False):
    """
    Render the synthesis prompt (instructions plus output schema)

    :param reflection: the weakness to target; None leaves the weakness slot out (untargeted synthesis)

    :param tagged: ask for a ``<question>``-wrapped free-text answer instead of the JSON schema
    """
    if reflection is not None and not isinstance(reflection, ReflectionRecord):
        raise TypeError('build_synthesis_prompt expects a ReflectionRecord, you provided {0}'.format(
            type(reflection).__name__))
    failed = list(failed)
    if not failed:
        raise ValueError('the synthesis prompt needs at least one failed instance')
    return _template_env.get_template('synthesis.txt.j2').render({
        'instances': failed,
        'weakness_json': None if reflection is None else weakness_json(reflection),
        'tagged': tagged,
    })


def parse_synthesis(raw):
    """
    Strict parse of a synthesis output against its schema; ``generated_question`` is the gated payload

    :raises:
        - ParseFailure - as :func:`parse_reflection`
    """
    document = _load_document(raw)
    _require(document, _synthesis_fields)
    strategy = document['error_hitting_strategy']
    self_test = document['self_test']
    if not isinstance(strategy, dict):
        raise ParseFailure('error_hitting_strategy must be an object', 'error_hitting_strategy')
    if not isinstance(self_test, dict):
        raise ParseFailure('self_test must be an object', 'self_test')
    _require(strategy, _strategy_fields, 'error_hitting_strategy.')
    _require(self_test, _self_test_fields, 'self_test.')
    return SynthesisRecord(
        anchor_structure=document['anchor_structure'],
        error_hitting_strategy=ErrorHittingStrategy(**{name: strategy[name] for name in _strategy_fields}),
        generated_question=document['generated_question'],
        hit_rationale=document['hit_rationale'],
        self_test=SelfTest(**{name: self_test[name] for name in _self_test_fields}),
    )


def build_student_prompt(question):
    """Student-role prompt for the remote backend"""
    if not isinstance(question, (Question, QuestionView)):
        raise TypeError('build_student_prompt expects a question, you provided {0}'.format(type(question).__name__))
    return _template_env.get_template('student.txt.j2').render({'question': question})


def build_training_set(test_questions, previous_variants):
    """
    D_t = X_test followed by the previous iteration's variants

    :raises:
        - ValueError - on duplicate question ids
    """
    training_set = list(test_questions) + list(previous_variants)
    seen = set()
    for question in training_set:
        if question.id in seen:
            raise ValueError('duplicate question id {0} in the training set'.format(question.id))
        seen.add(question.id)
    return training_set


def admit_variants(scored, capacity):
    """
    Keep the top ``capacity`` gated variants by teacher reward; ties go to the lower id

    :returns:
        the next variant pool, best first
    """
    scored = list(scored)
    for variant in scored:
        if not variant.gated:
            raise ValueError('variant {0} did not pass the format gate'.format(variant.question.id))
    ranked = sorted(scored, key=lambda v: (-v.r_teacher, v.question.id))
    admitted = ranked[:capacity]
    logger.debug('Admitted %d of %d variants', len(admitted), len(scored))
    return admitted
