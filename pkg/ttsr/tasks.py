#!/usr/bin/env python
"""This module implements the built-in toy task family: modular arithmetic chains """
import hashlib
import re

import numpy as np

from ttsr import Question, ToyQuestionSpec, ParseFailure
from ttsr.enums import Source, Operator
from ttsr.enums.toy import _verbs, _verbs_swaped


__all__ = [
    'N_ACTIONS',
    'DELTA_K_RANGE',
    'question_id_for',
    'render_toy_question',
    'parse_toy_question',
    'gen_toy_question',
    'gen_toy_set',
    'toy_question',
    'feature_indices',
    'digits_of',
    'worked_context',
    'difficulty_bucket',
    'decode_action',
    'encode_action',
    'perturb_chain',
]

DELTA_K_RANGE = (-2, -1, 0, 1, 2)

# one action per (delta_k, reseed) pair
N_ACTIONS = 2 * len(DELTA_K_RANGE)

_operators = tuple(Operator)

_question_pattern = re.compile(r'^Compute modulo (\d+): start at 0, (.+)\. What is the final value\?$')
_step_pattern = re.compile(r'^(add|subtract|multiply by) (\d+)$')


def question_id_for(body, prefix='q'):
    """Stable id of a question body"""
    return '{0}-{1}'.format(prefix, hashlib.md5(body.encode('utf-8')).hexdigest()[:12])


def render_toy_question(spec):
    """
    Render a chain as question text, e.g.
    ``Compute modulo 11: start at 0, add 5, multiply by 2. What is the final value?``
    """
    steps = ', '.join('{0} {1}'.format(_verbs[op], operand) for op, operand in spec.op_chain)
    return 'Compute modulo {0}: start at 0, {1}. What is the final value?'.format(spec.modulus, steps)


def parse_toy_question(text):
    """
    Inverse of :func:`render_toy_question`

    :raises:
        - ParseFailure - if the text isn't a rendered toy question
    """
    found = _question_pattern.match(' '.join(text.split()))
    if not found:
        raise ParseFailure('not a toy question: {0!r}'.format(text[:80]), 'generated_question')
    chain = []
    for step in found.group(2).split(', '):
        parsed = _step_pattern.match(step)
        if not parsed:
            raise ParseFailure('unknown toy step {0!r}'.format(step), 'generated_question')
        chain.append((_verbs_swaped[parsed.group(1)], int(parsed.group(2))))
    try:
        return ToyQuestionSpec(modulus=int(found.group(1)), op_chain=tuple(chain))
    except ValueError as error:
        raise ParseFailure(str(error), 'generated_question') from error


def toy_question(spec, source=Source.TEST, origin_id=None, question_id=None):
    """Wrap a spec into a :class:`ttsr.Question` with its ground truth"""
    body = render_toy_question(spec)
    prefix = 'q' if Source(source) is Source.TEST else 'v'
    return Question(id=question_id or question_id_for(body, prefix), body=body, source=source, origin_id=origin_id,
                    toy_payload=spec, ground_truth=str(spec.answer()))


def _random_chain(k, modulus, rng):
    ops = rng.integers(len(_operators), size=k)
    operands = rng.integers(modulus, size=k)
    return tuple((_operators[int(o)], int(v)) for o, v in zip(ops, operands))


def gen_toy_question(k, modulus, rng):
    """
    Draw a random chain of ``k`` steps modulo ``modulus``

    :param rng:
        a numpy Generator

    :raises:
        - ValueError - if k < 1 or modulus < 2
    """
    if k < 1:
        raise ValueError('difficulty should be at least 1, you provided {0}'.format(k))
    if modulus < 2:
        raise ValueError('modulus should be at least 2, you provided {0}'.format(modulus))
    return toy_question(ToyQuestionSpec(modulus=modulus, op_chain=_random_chain(k, modulus, rng)))


def gen_toy_set(size, toy, rng, exclude=()):
    """
    ``size`` distinct toy questions with difficulties drawn uniformly from ``toy.difficulties``

    :param exclude:
        ids that must not be produced (e.g. the test set when drawing a held-out set)
    """
    seen = set(exclude)
    questions = []
    attempts = 0
    while len(questions) < size:
        attempts += 1
        if attempts > 1000 * size:
            raise ValueError('cannot draw {0} distinct toy questions from this task family'.format(size))
        k = int(toy.difficulties[int(rng.integers(len(toy.difficulties)))])
        question = gen_toy_question(k, toy.modulus, rng)
        if question.id in seen:
            continue
        seen.add(question.id)
        questions.append(question)
    return questions


def feature_indices(spec, n_features):
    """Hashed indicator features of every (step position, operator, operand) triple"""
    indices = []
    for position, (op, operand) in enumerate(spec.op_chain):
        key = '{0}|{1}|{2}'.format(position, op.value, operand).encode('utf-8')
        indices.append(int.from_bytes(hashlib.md5(key).digest()[:4], 'big') % n_features)
    return tuple(indices)


def digits_of(value, n_digits):
    """Zero-padded base-10 digits of an answer"""
    return tuple(int(c) for c in str(value).zfill(n_digits))


def worked_context(spec, n_digits, n_features):
    """
    Conditioning indices of the toy student: the digits of the value reached by working the chain through step by
    step, followed by :func:`feature_indices`
    """
    return digits_of(spec.answer(), n_digits) + feature_indices(spec, n_features)


def difficulty_bucket(score_s, n_buckets):
    """Bucket of a pseudo-correctness score in [0, 1]"""
    return min(int(score_s * n_buckets), n_buckets - 1)


def encode_action(delta_k, reseed):
    return DELTA_K_RANGE.index(delta_k) * 2 + int(bool(reseed))


def decode_action(action):
    """Action index -> (delta_k, reseed)"""
    if not 0 <= action < N_ACTIONS:
        raise ValueError('action should be in [0, {0}), you provided {1}'.format(N_ACTIONS, action))
    return DELTA_K_RANGE[action // 2], bool(action % 2)


def perturb_chain(spec, delta_k, reseed, rng):
    """
    Regenerate a chain with difficulty max(1, k + delta_k), keeping the operator multiset (cycled when growing,
    truncated when shrinking). Without reseed the operands follow the operators, so the variant is fully determined
    by the source and delta_k; with reseed every operand is drawn afresh and at least one differs from the source
    """
    ops = [op for op, _ in spec.op_chain]
    operands = [operand for _, operand in spec.op_chain]
    new_k = max(1, spec.difficulty + delta_k)
    new_ops = [ops[i % len(ops)] for i in range(new_k)]
    fresh = [int(v) for v in rng.integers(spec.modulus, size=new_k)]
    if reseed:
        new_operands = fresh
        kept = min(new_k, len(operands))
        if new_operands[:kept] == operands[:kept]:
            new_operands[0] = (new_operands[0] + 1) % spec.modulus
    else:
        new_operands = [operands[i % len(operands)] for i in range(new_k)]
    return ToyQuestionSpec(modulus=spec.modulus, op_chain=tuple(zip(new_ops, new_operands)))
