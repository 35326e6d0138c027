#!/usr/bin/env python
"""This module implements the Teacher rewards: difficulty, group similarity penalty and the format gate """
import math
from dataclasses import dataclass
from typing import Optional

from ttsr.enums import RejectReason
from ttsr.similarity import similarity_ratio


__all__ = [
    'GateResult',
    'difficulty_reward',
    'thresholded_penalty',
    'similarity_penalty',
    'batch_similarity_penalties',
    'teacher_reward',
    'format_gate',
    'OPEN_TAG',
    'CLOSE_TAG',
]

OPEN_TAG = '<question>'
CLOSE_TAG = '</question>'

_LOG2 = math.log(2.0)


@dataclass(frozen=True)
class GateResult:
    """Outcome of :func:`format_gate`; ``text`` is set only for accepted outputs"""
    accepted: bool
    text: Optional[str] = None
    reason: Optional[RejectReason] = None


def difficulty_reward(s):
    """
    Normalised binary entropy H(Bern(s)) / log 2 of a pseudo-correctness score. Peaks at s = 0.5

    :raises:
        - ValueError - if s is outside [0, 1]
    """
    if not 0.0 <= s <= 1.0:
        raise ValueError('pseudo-correctness score should be in [0, 1], you provided {0}'.format(s))
    entropy = 0.0
    for p in (s, 1.0 - s):
        if p > 0.0:
            entropy -= p * math.log(p)
    return entropy / _LOG2


def thresholded_penalty(similarities, tau):
    """Mean of max(0, sim - tau) over a non-empty list of similarities"""
    similarities = list(similarities)
    if not similarities:
        raise ValueError('the similarity penalty needs at least one other question')
    return math.fsum(max(0.0, sim - tau) for sim in similarities) / len(similarities)


def similarity_penalty(candidate, others, tau):
    """
    R_sim of one candidate: the thresholded excess similarity to every other member of the batch, averaged

    :param candidate:
        token sequence of the candidate (always the first argument of the similarity)

    :param others:
        token sequences of the remaining batch members, the reference question included
    """
    others = list(others)
    if not others:
        raise ValueError('the similarity penalty needs at least one other question')
    return thresholded_penalty((similarity_ratio(candidate, other) for other in others), tau)


def batch_similarity_penalties(candidates, references, tau):
    """
    R_sim for every candidate of one generation batch. Candidate ``i`` is compared with the other candidates and
    with ``references[i]``, the question it was derived from

    :returns:
        a list of penalties in candidate order
    """
    candidates = list(candidates)
    references = list(references)
    if len(candidates) != len(references):
        raise ValueError('one reference per candidate is required')
    penalties = []
    for index, candidate in enumerate(candidates):
        others = [other for position, other in enumerate(candidates) if position != index]
        others.append(references[index])
        penalties.append(similarity_penalty(candidate, others, tau))
    return penalties


def teacher_reward(r_diff, r_sim, lambda_):
    """max(0, R_diff - lambda R_sim)"""
    if not 0.0 <= r_diff <= 1.0:
        raise ValueError('r_diff should be in [0, 1], you provided {0}'.format(r_diff))
    if r_sim < 0.0 or lambda_ < 0.0:
        raise ValueError('r_sim and lambda must be non-negative')
    return max(0.0, r_diff - lambda_ * r_sim)


def format_gate(raw_output):
    """
    Accept only outputs with a well-formed ``<question>...</question>`` envelope

    :returns:
        a :class:`GateResult` carrying the trimmed body of the first pair, or the rejection reason
    """
    raw_output = raw_output or ''
    start = raw_output.find(OPEN_TAG)
    if start < 0:
        return GateResult(accepted=False, reason=RejectReason.MISSING_OPEN_TAG)
    body_start = start + len(OPEN_TAG)
    end = raw_output.find(CLOSE_TAG, body_start)
    if end < 0:
        return GateResult(accepted=False, reason=RejectReason.MISSING_CLOSE_TAG)
    body = raw_output[body_start:end]
    if OPEN_TAG in body:
        return GateResult(accepted=False, reason=RejectReason.NESTED_TAGS)
    body = body.strip()
    if not body:
        return GateResult(accepted=False, reason=RejectReason.EMPTY_BODY)
    return GateResult(accepted=True, text=body)
