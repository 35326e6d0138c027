#!/usr/bin/env python
"""This module implements majority-vote pseudo targets and the binary pseudo-correctness reward """
import logging
import re
from collections import Counter
from dataclasses import dataclass, field
from typing import Dict

from ttsr import EMPTY_ANSWER, TrajectoryGroup
from ttsr.grpo import compute_group_advantages


__all__ = [
    'ConsensusResult',
    'canonicalize_answer',
    'majority_vote',
    'pseudo_reward',
    'pseudo_correctness_score',
    'score_group',
]

logger = logging.getLogger(__name__)

_boxed_pattern = re.compile(r'\\boxed\{((?:[^{}]|\{[^{}]*\})*)\}')
_integer_pattern = re.compile(r'[+-]?\d+')


@dataclass(frozen=True)
class ConsensusResult:
    """Outcome of one majority vote"""
    pseudo_target: str
    counts: Dict[str, int] = field(default_factory=dict)
    tie_flag: bool = False
    score_s: float = 0.0


def canonicalize_answer(raw):
    """
    Canonical form of an extracted answer: the last ``\\boxed{...}`` content if any, otherwise the last non-empty
    line; whitespace collapsed, lower-cased, trailing period dropped; integers rendered without leading zeros or
    sign noise

    :returns:
        the canonical answer, or the sentinel ``∅`` for an empty extraction
    """
    if raw is None:
        return EMPTY_ANSWER
    text = str(raw)
    boxed = _boxed_pattern.findall(text)
    if boxed:
        candidate = boxed[-1]
    else:
        lines = [line for line in text.splitlines() if line.strip()]
        candidate = lines[-1] if lines else ''
    candidate = ' '.join(candidate.split()).lower()
    candidate = candidate.rstrip('.').strip()
    if len(candidate) > 1 and candidate[0] == candidate[-1] == '$':
        candidate = candidate[1:-1].strip()
    if _integer_pattern.fullmatch(candidate):
        candidate = str(int(candidate))
    return candidate or EMPTY_ANSWER


def majority_vote(answers):
    """
    Most frequent canonical answer; ties go to the lexicographically smallest one. ``∅`` only wins when every
    answer is ``∅``

    :raises:
        - ValueError - on an empty answer list
    """
    answers = list(answers)
    if not answers:
        raise ValueError('majority_vote needs at least one answer')
    counts = Counter(answers)
    candidates = [answer for answer in counts if answer != EMPTY_ANSWER] or [EMPTY_ANSWER]
    best = max(counts[answer] for answer in candidates)
    leaders = sorted(answer for answer in candidates if counts[answer] == best)
    target = leaders[0]
    return ConsensusResult(pseudo_target=target, counts=dict(counts), tie_flag=len(leaders) > 1,
                           score_s=counts[target] / len(answers))


def pseudo_reward(answer, target):
    """1 iff the canonical answer equals the pseudo target. An empty consensus rewards nobody"""
    if target == EMPTY_ANSWER:
        return 0
    return 1 if answer == target else 0


def pseudo_correctness_score(rewards):
    """Mean of a group's binary rewards"""
    rewards = list(rewards)
    if not rewards:
        raise ValueError('pseudo_correctness_score needs at least one reward')
    return sum(int(r) for r in rewards) / len(rewards)


def score_group(question_id, trajectories, delta):
    """
    Vote over a rollout group, assign binary rewards and compute advantages

    :returns:
        a :class:`ttsr.TrajectoryGroup`
    """
    trajectories = tuple(trajectories)
    vote = majority_vote(t.answer_canonical for t in trajectories)
    rewards = [pseudo_reward(t.answer_canonical, vote.pseudo_target) for t in trajectories]
    advantages = compute_group_advantages(rewards, delta)
    if vote.tie_flag:
        logger.debug('Tie in majority vote for %s, counts %s', question_id, vote.counts)
    return TrajectoryGroup(question_id=question_id, trajectories=trajectories, rewards=tuple(rewards),
                           advantages=tuple(advantages), pseudo_target=vote.pseudo_target, tie_flag=vote.tie_flag,
                           score_s=pseudo_correctness_score(rewards))
