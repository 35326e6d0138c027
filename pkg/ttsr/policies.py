#!/usr/bin/env python
"""This module implements the two policy backends: the learnable toy policy and the remote chat-completions
adapter """
# pylint: disable=too-many-lines
import json
import logging
import time
from collections import Counter
from dataclasses import dataclass

import numpy as np

from ttsr import Policy, PolicyHandle, Question, QuestionView, Trajectory, EndpointError
from ttsr import _backend
from ttsr.consensus import canonicalize_answer
from ttsr.curriculum import build_student_prompt
from ttsr.enums.toy import _verbs
from ttsr.rewards import OPEN_TAG, CLOSE_TAG
from ttsr.tasks import N_ACTIONS, worked_context, render_toy_question, difficulty_bucket, decode_action, perturb_chain


__all__ = [
    'StudentParameters',
    'TeacherParameters',
    'ToyCandidate',
    'ToyPolicy',
    'RemotePolicy',
    'toy_sample_group',
    'toy_logprob_gradient',
    'toy_synthesize_variants',
    'toy_reflect',
    'remote_sample_group',
    'remote_teacher_call',
]

logger = logging.getLogger(__name__)

N_DIGIT_VALUES = 10


def _log_softmax(logits):
    shifted = logits - np.max(logits)
    return shifted - np.log(np.sum(np.exp(shifted)))


def _view_of(question):
    if isinstance(question, Question):
        return question.view()
    if isinstance(question, QuestionView):
        return question
    raise TypeError('expected a question, you provided {0}'.format(type(question).__name__))


def _check_flat(flat, size, name):
    flat = np.asarray(flat, dtype=np.float64).ravel()
    if flat.size != size:
        raise ValueError('{0} expects {1} parameters, you provided {2}'.format(name, size, flat.size))
    if not np.all(np.isfinite(flat)):
        raise ValueError('{0} parameters must be finite'.format(name))
    return flat.copy()


def _check_weights(weights, length):
    weights = np.asarray(weights, dtype=np.float64)
    if weights.shape != (length,):
        raise ValueError('dimension mismatch: {0} weights for {1} tokens'.format(weights.size, length))
    return weights


def _kl_logit_gradient(new_dist, old_dist):
    """d KL(new || old) / d logits of a softmax ``new_dist``"""
    log_ratio = np.log(new_dist) - np.log(old_dist)
    kl_value = float(np.sum(new_dist * log_ratio))
    return new_dist * (log_ratio - kl_value)


class StudentParameters(PolicyHandle):
    """
    Digit emitter. Position ``d`` scores the 10 digit values with a softmax-linear map of [hashed question features,
    bias, previous-digit one-hot], plus one ``trust`` weight shared by every position on the digit the worked value
    has at ``d``. Logits are scaled by 1 / temperature.

    Trajectory contexts hold the worked digits followed by the hashed feature indices, see
    :func:`ttsr.tasks.worked_context`. The flat parameter vector is the weight tensor followed by ``trust``
    """
    name = 'student'

    def __init__(self, toy, rng):
        self.n_features = toy.n_features
        self.n_digits = toy.n_digits
        self.n_inputs = toy.n_features + 1 + N_DIGIT_VALUES
        self.temperature = toy.temperature
        self.weights = rng.normal(scale=toy.init_scale, size=(self.n_digits, N_DIGIT_VALUES, self.n_inputs))
        self.weights[:, :, :self.n_features] = rng.normal(scale=toy.feature_scale,
                                                          size=(self.n_digits, N_DIGIT_VALUES, self.n_features))
        self.trust = float(toy.work_prior)

    @property
    def size(self):
        return self.weights.size + 1

    def get_parameters(self):
        return np.append(self.weights.ravel(), self.trust)

    def set_parameters(self, flat):
        flat = _check_flat(flat, self.size, self.name)
        self.weights = flat[:-1].reshape(self.weights.shape)
        self.trust = float(flat[-1])

    def context(self, spec):
        return worked_context(spec, self.n_digits, self.n_features)

    def inputs(self, features, previous_digit):
        """Input vector of one digit position"""
        x = np.zeros(self.n_inputs)
        for index in features:
            x[index] += 1.0
        x[self.n_features] = 1.0
        if previous_digit is not None:
            x[self.n_features + 1 + previous_digit] = 1.0
        return x

    def _positions(self, trajectory):
        """(input vector, worked digit) of every answer position"""
        if len(trajectory.token_ids) != self.n_digits:
            raise ValueError('dimension mismatch: {0} tokens for {1} digit positions'.format(
                len(trajectory.token_ids), self.n_digits))
        if len(trajectory.context) < self.n_digits:
            raise ValueError('trajectory of {0} carries no worked digits'.format(trajectory.question_id))
        worked, features = trajectory.context[:self.n_digits], trajectory.context[self.n_digits:]
        previous = (None,) + trajectory.token_ids[:-1]
        return [(self.inputs(features, prev), digit) for prev, digit in zip(previous, worked)]

    def logits(self, position, x, worked_digit):
        """Unscaled digit logits of one position"""
        logits = self.weights[position] @ x
        logits[worked_digit] += self.trust
        return logits

    def position_log_probs(self, position, x, worked_digit):
        return _log_softmax(self.logits(position, x, worked_digit) / self.temperature)

    def score_logprobs(self, trajectory):
        return np.array([self.position_log_probs(d, x, worked)[y]
                         for d, ((x, worked), y) in enumerate(zip(self._positions(trajectory), trajectory.token_ids))])

    def token_distributions(self, trajectory):
        return np.array([np.exp(self.position_log_probs(d, x, worked))
                         for d, (x, worked) in enumerate(self._positions(trajectory))])

    def _chain_rule(self, logit_gradients, positions):
        """Map per-position logit gradients onto the flat parameter vector"""
        gradient = np.zeros_like(self.weights)
        trust = 0.0
        for d, (logit_grad, (x, worked)) in enumerate(zip(logit_gradients, positions)):
            if logit_grad is None:
                continue
            logit_grad = logit_grad / self.temperature
            gradient[d] += np.outer(logit_grad, x)
            trust += logit_grad[worked]
        return np.append(gradient.ravel(), trust)

    def logprob_gradient(self, trajectory, weights):
        weights = _check_weights(weights, len(trajectory.token_ids))
        positions = self._positions(trajectory)
        logit_gradients = []
        for d, ((x, worked), y) in enumerate(zip(positions, trajectory.token_ids)):
            if weights[d] == 0.0:
                logit_gradients.append(None)
                continue
            logit_grad = -np.exp(self.position_log_probs(d, x, worked))
            logit_grad[y] += 1.0
            logit_gradients.append(weights[d] * logit_grad)
        return self._chain_rule(logit_gradients, positions)

    def kl_gradient(self, trajectory, weights):
        weights = _check_weights(weights, len(trajectory.token_ids))
        if trajectory.old_distributions is None:
            raise ValueError('trajectory of {0} has no behaviour distributions'.format(trajectory.question_id))
        positions = self._positions(trajectory)
        logit_gradients = []
        for d, (x, worked) in enumerate(positions):
            new_dist = np.exp(self.position_log_probs(d, x, worked))
            old_dist = np.asarray(trajectory.old_distributions[d])
            logit_gradients.append(weights[d] * _kl_logit_gradient(new_dist, old_dist))
        return self._chain_rule(logit_gradients, positions)

    def sample(self, question, rng, temperature=None):
        """
        Autoregressively emit the answer digits of a toy question

        :param temperature: 0 decodes greedily. A greedy trace records the log-probabilities and distributions of
            the policy at its own temperature, so it scores like a sampled one
        """
        temperature = self.temperature if temperature is None else temperature
        context = self.context(question.toy_payload)
        worked, features = context[:self.n_digits], context[self.n_digits:]
        digits = []
        logprobs = []
        distributions = []
        previous = None
        for d in range(self.n_digits):
            logits = self.logits(d, self.inputs(features, previous), worked[d])
            if temperature == 0:
                digit = int(np.argmax(logits))
                log_probs = _log_softmax(logits / self.temperature)
                probs = np.exp(log_probs)
            else:
                log_probs = _log_softmax(logits / temperature)
                probs = np.exp(log_probs)
                digit = int(rng.choice(N_DIGIT_VALUES, p=probs / probs.sum()))
            logprobs.append(float(log_probs[digit]))
            distributions.append(tuple(float(p) for p in probs))
            digits.append(digit)
            previous = digit
        answer = ''.join(str(digit) for digit in digits)
        return Trajectory(question_id=question.id, token_ids=tuple(digits),
                          text='The final value is {0}.'.format(answer),
                          answer_raw=answer, answer_canonical=canonicalize_answer(answer),
                          old_logprobs=tuple(logprobs), old_distributions=tuple(distributions), context=context)


class TeacherParameters(PolicyHandle):
    """
    Perturbation chooser: a logit table over (delta_k, reseed) actions, one row per difficulty bucket of the source
    question's pseudo-correctness score
    """
    name = 'teacher'

    def __init__(self, toy):
        self.n_buckets = toy.n_buckets
        self.table = np.zeros((toy.n_buckets, N_ACTIONS))

    def get_parameters(self):
        return self.table.ravel().copy()

    def set_parameters(self, flat):
        self.table = _check_flat(flat, self.table.size, self.name).reshape(self.table.shape)

    def _bucket(self, trajectory):
        if len(trajectory.context) != 1 or len(trajectory.token_ids) != 1:
            raise ValueError('teacher trajectories carry one action and one bucket')
        return trajectory.context[0]

    def distribution(self, bucket):
        return np.exp(_log_softmax(self.table[bucket]))

    def score_logprobs(self, trajectory):
        return np.array([_log_softmax(self.table[self._bucket(trajectory)])[trajectory.token_ids[0]]])

    def token_distributions(self, trajectory):
        return np.array([self.distribution(self._bucket(trajectory))])

    def logprob_gradient(self, trajectory, weights):
        weights = _check_weights(weights, 1)
        bucket = self._bucket(trajectory)
        gradient = np.zeros_like(self.table)
        gradient[bucket] = -self.distribution(bucket)
        gradient[bucket, trajectory.token_ids[0]] += 1.0
        gradient[bucket] *= weights[0]
        return gradient.ravel()

    def kl_gradient(self, trajectory, weights):
        weights = _check_weights(weights, 1)
        if trajectory.old_distributions is None:
            raise ValueError('teacher trajectory has no behaviour distribution')
        bucket = self._bucket(trajectory)
        gradient = np.zeros_like(self.table)
        gradient[bucket] = weights[0] * _kl_logit_gradient(self.distribution(bucket),
                                                           np.asarray(trajectory.old_distributions[0]))
        return gradient.ravel()

    def sample_action(self, bucket, rng):
        """Draw an action; returns (action, log-probability, distribution)"""
        log_probs = _log_softmax(self.table[bucket])
        probs = np.exp(log_probs)
        action = int(rng.choice(N_ACTIONS, p=probs / probs.sum()))
        return action, float(log_probs[action]), tuple(float(p) for p in probs)


@dataclass(frozen=True)
class ToyCandidate:
    """One synthesised toy candidate: the tag-wrapped text and the Teacher action that produced it"""
    raw_text: str
    source: QuestionView
    trajectory: Trajectory
    delta_k: int
    reseed: bool


def toy_sample_group(student, question, group_size, rng, temperature=None):
    """
    ``group_size`` independent digit-emitter samples for one toy question (rewards not yet assigned)

    :returns: a list of :class:`ttsr.Trajectory`
    """
    question = _view_of(question)
    if question.toy_payload is None:
        raise ValueError('question {0} is not a toy question'.format(question.id))
    return [student.sample(question, rng, temperature) for _ in range(group_size)]


def toy_logprob_gradient(student, trajectory, weights):
    """Exact gradient of sum_t w_t log pi(y_t | ...) with respect to the student parameters"""
    return student.logprob_gradient(trajectory, weights)


def toy_synthesize_variants(teacher, failed, count, rng):
    """
    Draw ``count`` perturbations of failed toy questions. Each draw picks a source uniformly, samples an action
    conditioned on the source's score bucket and regenerates its chain

    :returns: a list of :class:`ToyCandidate`
    """
    failed = list(failed)
    if not failed:
        raise ValueError('toy synthesis needs at least one failed instance')
    for instance in failed:
        if instance.question.toy_payload is None:
            raise ValueError('question {0} is not a toy question'.format(instance.question.id))
    candidates = []
    for _ in range(count):
        instance = failed[int(rng.integers(len(failed)))]
        source = instance.question
        bucket = difficulty_bucket(instance.score_s, teacher.n_buckets)
        action, logprob, distribution = teacher.sample_action(bucket, rng)
        delta_k, reseed = decode_action(action)
        spec = perturb_chain(source.toy_payload, delta_k, reseed, rng)
        raw_text = '{0}{1}{2}'.format(OPEN_TAG, render_toy_question(spec), CLOSE_TAG)
        trajectory = Trajectory(question_id=source.id, token_ids=(action,), text=raw_text, answer_raw=str(action),
                                answer_canonical=str(action), old_logprobs=(logprob,),
                                old_distributions=(distribution,), context=(bucket,))
        candidates.append(ToyCandidate(raw_text=raw_text, source=source, trajectory=trajectory, delta_k=delta_k,
                                       reseed=reseed))
    return candidates


def toy_reflect(failed):
    """
    Toy weakness diagnosis of a failed set, written as the JSON document the reflection prompt asks for
    """
    failed = list(failed)
    if not failed:
        raise ValueError('reflection needs at least one failed instance')
    lengths = [f.question.toy_payload.difficulty for f in failed]
    operators = Counter(op for f in failed for op, _ in f.question.toy_payload.op_chain)
    dominant = sorted(operators.items(), key=lambda item: (-item[1], item[0].value))[0][0]
    agreement = sum(f.score_s for f in failed) / len(failed)
    document = {
        'reasoning_weakness': 'The running value is lost over long operation chains, so the final residue '
                              'drifts away from the consensus.',
        'trigger_conditions': [
            'Operation chains of {0} to {1} steps'.format(min(lengths), max(lengths)),
            'Frequent "{0}" steps'.format(_verbs[dominant]),
        ],
        'failure_signature': [
            'Answers disagree with the group consensus',
            'Mean group agreement {0:.2f}'.format(agreement),
        ],
        'localization_summary': 'The trace diverges at the first digit of the final value.',
    }
    return json.dumps(document)


class ToyPolicy(Policy):
    """
    Fully learnable desk-scale policy with two parameter blocks, ``student`` and ``teacher``
    """
    learnable = True

    def __init__(self, toy, seed=0):
        self.toy = toy
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0x7e57]))
        self.student = StudentParameters(toy, rng)
        self.teacher = TeacherParameters(toy)

    def sample_group(self, question, group_size, rng=None, temperature=None):
        return toy_sample_group(self.student, question, group_size, rng, temperature)

    def greedy_answer(self, question):
        view = _view_of(question)
        return self.student.sample(view, None, temperature=0).answer_canonical

    def reflect(self, failed):
        return toy_reflect(failed)

    def synthesize_variants(self, failed, count, rng):
        return toy_synthesize_variants(self.teacher, failed, count, rng)

    def save(self, path):
        """Write both parameter blocks to an ``.npz`` archive"""
        np.savez(path, student=self.student.get_parameters(), teacher=self.teacher.table)

    def load(self, path):
        with np.load(path) as archive:
            self.student.set_parameters(archive['student'])
            self.teacher.set_parameters(archive['teacher'])


def remote_sample_group(api, endpoint, question, group_size, max_tokens=None, temperature=None, sleep=time.sleep):
    """
    Ask the endpoint for ``group_size`` samples of one question. Endpoints returning fewer choices than requested
    are asked again for the remainder

    :returns: a list of text-only :class:`ttsr.Trajectory` (no log-probabilities)
    """
    # pylint: disable=too-many-arguments
    question = _view_of(question)
    messages = [{'role': 'user', 'content': build_student_prompt(question)}]
    contents = []
    while len(contents) < group_size:
        contents.extend(_backend.chat_completions(api, endpoint, messages, n=group_size - len(contents),
                                                  temperature=temperature, max_tokens=max_tokens,
                                                  question_id=question.id, sleep=sleep))
    return [Trajectory(question_id=question.id, token_ids=(), text=content, answer_raw=content,
                       answer_canonical=canonicalize_answer(content)) for content in contents[:group_size]]


def remote_teacher_call(api, endpoint, prompt, max_tokens=None, question_id=None, sleep=time.sleep):
    """
    One Teacher-role completion, returned verbatim

    :raises:
        - EndpointError - on an empty completion, or anything :func:`ttsr._backend.chat_completions` raises
    """
    contents = _backend.chat_completions(api, endpoint, [{'role': 'user', 'content': prompt}], n=1,
                                         max_tokens=max_tokens, question_id=question_id, sleep=sleep)
    text = contents[0]
    if not text.strip():
        raise EndpointError('Endpoint returned an empty completion', question_id=question_id)
    return text


class RemotePolicy(Policy):
    """
    One remote model serving both roles, selected by prompt. Sampling and scoring only; it has no parameters to
    update
    """
    learnable = False

    def __init__(self, endpoint, max_len=None, session=None, sleep=time.sleep):
        self.endpoint = endpoint
        self.max_len = max_len
        self.api = _backend.get_handler(endpoint, session)
        self._sleep = sleep

    def sample_group(self, question, group_size, rng=None, temperature=None):
        return remote_sample_group(self.api, self.endpoint, question, group_size, max_tokens=self.max_len,
                                   temperature=temperature, sleep=self._sleep)

    def greedy_answer(self, question):
        return self.sample_group(question, 1, temperature=0.0)[0].answer_canonical

    def teacher_call(self, prompt, question_id=None):
        return remote_teacher_call(self.api, self.endpoint, prompt, max_tokens=self.max_len, question_id=question_id,
                                   sleep=self._sleep)
