#!/usr/bin/env python
"""This module implements group-relative advantages and the clipped-surrogate-plus-KL objective of GRPO """
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Tuple

import numpy as np

from ttsr import GroupTooSmall, ContinuityError, NonFiniteGradient


__all__ = [
    'compute_group_advantages',
    'token_ratio',
    'clipped_term',
    'kl_divergence',
    'grpo_objective',
    'grpo_step',
    'RolloutGroup',
    'SurrogateReport',
]

logger = logging.getLogger(__name__)

PROBABILITY_TOLERANCE = 1e-9


@dataclass(frozen=True)
class RolloutGroup:
    """
    Any set of trajectories with one advantage each. :class:`ttsr.TrajectoryGroup` fits this shape too; the
    Teacher's real-valued reward groups use this one
    """
    trajectories: Tuple
    advantages: Tuple[float, ...]


@dataclass(frozen=True)
class SurrogateReport:
    """
    Evaluation of the GRPO objective at the current parameters. ``per_token_terms`` holds one row of clipped
    terms per trajectory, in group order
    """
    objective: float
    surrogate: float
    per_token_terms: Tuple[np.ndarray, ...]
    clip_fraction: float
    kl_value: float
    gradient: np.ndarray
    n_tokens: int

    def metrics(self, prefix=''):
        """Scalars for the metrics stream"""
        return {
            prefix + 'objective': self.objective,
            prefix + 'clip_fraction': self.clip_fraction,
            prefix + 'kl': self.kl_value,
        }


def compute_group_advantages(rewards, delta):
    """
    Group-normalised advantages (R_i - mean(R)) / (std(R) + delta) with the population standard deviation

    :param rewards:
        G rewards of one rollout group

    :param delta:
        positive stabiliser added to the standard deviation

    :raises:
        - GroupTooSmall - if G < 2
        - ValueError - if delta isn't positive or a reward isn't finite

    :returns:
        a list of G advantages; all exactly 0.0 when every reward is equal
    """
    rewards = np.asarray(rewards, dtype=np.float64)
    if rewards.ndim != 1 or rewards.size < 2:
        raise GroupTooSmall('group too small')
    if not delta > 0:
        raise ValueError('delta should be positive, you provided {0}'.format(delta))
    if not np.all(np.isfinite(rewards)):
        raise ValueError('rewards must be finite')
    if np.all(rewards == rewards[0]):
        return [0.0] * rewards.size
    centered = rewards - rewards.mean()
    return [float(a) for a in centered / (rewards.std() + delta)]


def token_ratio(new_logprob, old_logprob):
    """Likelihood ratio exp(new - old) of one token"""
    if not (math.isfinite(new_logprob) and math.isfinite(old_logprob)):
        raise ValueError('log-probabilities must be finite, got {0} and {1}'.format(new_logprob, old_logprob))
    return math.exp(new_logprob - old_logprob)


def clipped_term(ratio, advantage, epsilon):
    """min(r * A, clip(r, 1 - eps, 1 + eps) * A)"""
    if not ratio > 0:
        raise ValueError('ratio should be positive, you provided {0}'.format(ratio))
    if not 0 < epsilon < 1:
        raise ValueError('epsilon should be in (0, 1), you provided {0}'.format(epsilon))
    clamped = min(max(ratio, 1.0 - epsilon), 1.0 + epsilon)
    return min(ratio * advantage, clamped * advantage)


def _check_distribution(dist, name):
    if np.any(dist < 0) or np.any(np.abs(dist.sum(axis=-1) - 1.0) > PROBABILITY_TOLERANCE):
        raise ValueError('{0} is not a categorical distribution'.format(name))


def _kl_rows(new_dist, old_dist):
    """Per-row KL(new || old) with 0 log 0 := 0"""
    if np.any((old_dist <= 0) & (new_dist > 0)):
        raise ContinuityError('absolute continuity violated')
    positive = new_dist > 0
    safe_new = np.where(positive, new_dist, 1.0)
    safe_old = np.where(positive, old_dist, 1.0)
    return np.sum(np.where(positive, new_dist * (np.log(safe_new) - np.log(safe_old)), 0.0), axis=-1)


def kl_divergence(new_dist, old_dist):
    """
    Exact categorical KL(new || old); averaged over positions when both arguments hold one distribution per row

    :raises:
        - ValueError - on mismatched shapes or arguments that are not distributions
        - ContinuityError - if old has zero mass where new has positive mass
    """
    new_dist = np.atleast_2d(np.asarray(new_dist, dtype=np.float64))
    old_dist = np.atleast_2d(np.asarray(old_dist, dtype=np.float64))
    if new_dist.shape != old_dist.shape:
        raise ValueError('support mismatch: {0} vs {1}'.format(new_dist.shape, old_dist.shape))
    _check_distribution(new_dist, 'new_dist')
    _check_distribution(old_dist, 'old_dist')
    return float(np.mean(_kl_rows(new_dist, old_dist)))


def _trajectory_terms(handle, trajectory, advantage, scale, epsilon, beta):
    """Surrogate, KL and gradient contributions of one trajectory, already scaled by 1 / (n_groups G |y|)"""
    # pylint: disable=too-many-arguments,too-many-locals
    if trajectory.old_logprobs is None:
        raise ValueError('trajectory of {0} has no behaviour log-probabilities'.format(trajectory.question_id))
    old = np.asarray(trajectory.old_logprobs, dtype=np.float64)
    new = np.asarray(handle.score_logprobs(trajectory), dtype=np.float64)
    if new.shape != old.shape:
        raise ValueError('token count mismatch: {0} new vs {1} old log-probabilities'.format(new.size, old.size))
    if not (np.all(np.isfinite(new)) and np.all(np.isfinite(old))):
        raise ValueError('non-finite log-probabilities for {0}'.format(trajectory.question_id))
    ratios = np.exp(new - old)
    clamped = np.clip(ratios, 1.0 - epsilon, 1.0 + epsilon)
    unclipped = ratios * advantage
    terms = np.minimum(unclipped, clamped * advantage)
    clipped = clamped * advantage < unclipped
    weights = np.where(clipped, 0.0, advantage * ratios) * scale
    gradient = handle.logprob_gradient(trajectory, weights)

    kl_sum = 0.0
    if trajectory.old_distributions is not None:
        new_dists = np.asarray(handle.token_distributions(trajectory), dtype=np.float64)
        old_dists = np.asarray(trajectory.old_distributions, dtype=np.float64)
        kl_sum = float(np.sum(_kl_rows(new_dists, old_dists))) * scale
        if beta > 0:
            gradient = gradient - beta * handle.kl_gradient(trajectory, np.full(old.size, scale))
    elif beta > 0:
        raise ValueError('a KL penalty needs the behaviour distributions of every trajectory')
    return float(np.sum(terms)) * scale, terms, int(np.sum(clipped)), kl_sum, gradient


def grpo_objective(handle, groups, epsilon, beta, workers=1):
    """
    Evaluate the GRPO objective and its exact gradient at the handle's current parameters

    objective = mean over groups of (1/G) sum_i (1/|y_i|) sum_t min(r A, clip(r) A) - beta * KL

    :param handle:
        a :class:`ttsr.PolicyHandle` the trajectories were sampled from

    :param groups:
        rollout groups (``.trajectories`` and ``.advantages``) carrying behaviour log-probabilities

    :param workers:
        trajectories are scored on this many threads; contributions are reduced in group order

    :returns:
        a :class:`SurrogateReport`
    """
    groups = [g for g in groups if len(g.trajectories) > 0]
    zero = np.zeros_like(np.asarray(handle.get_parameters(), dtype=np.float64))
    if not groups:
        return SurrogateReport(objective=0.0, surrogate=0.0, per_token_terms=(), clip_fraction=0.0, kl_value=0.0,
                               gradient=zero, n_tokens=0)
    jobs = []
    for group in groups:
        if len(group.advantages) != len(group.trajectories):
            raise ValueError('one advantage per trajectory is required')
        size = len(group.trajectories)
        for trajectory, advantage in zip(group.trajectories, group.advantages):
            scale = 1.0 / (len(groups) * size * len(trajectory.token_ids))
            jobs.append((trajectory, float(advantage), scale))

    def evaluate(job):
        return _trajectory_terms(handle, job[0], job[1], job[2], epsilon, beta)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(evaluate, jobs))
    else:
        results = [evaluate(job) for job in jobs]

    surrogate = 0.0
    kl_value = 0.0
    n_clipped = 0
    n_tokens = 0
    gradient = zero
    rows = []
    for contribution, terms, clipped, kl_sum, grad in results:
        surrogate += contribution
        kl_value += kl_sum
        n_clipped += clipped
        n_tokens += terms.size
        gradient = gradient + grad
        rows.append(terms)
    kl_value = max(kl_value, 0.0)
    return SurrogateReport(objective=surrogate - beta * kl_value, surrogate=surrogate, per_token_terms=tuple(rows),
                           clip_fraction=n_clipped / n_tokens if n_tokens else 0.0, kl_value=kl_value,
                           gradient=gradient, n_tokens=n_tokens)


def grpo_step(handle, groups, cfg, learning_rate=None):
    """
    One gradient-ascent step params <- params + learning_rate * gradient

    :param handle:
        the parameter block to update; the caller must hold exclusive access to it

    :param cfg:
        a validated :class:`ttsr.config.RunConfig` supplying epsilon, beta, workers and the default learning rate

    :raises:
        - NonFiniteGradient - if the gradient has NaN or infinite entries; parameters are left untouched

    :returns:
        a tuple (new parameters, report evaluated before the step)
    """
    if learning_rate is None:
        learning_rate = cfg.learning_rate
    report = grpo_objective(handle, groups, cfg.epsilon, cfg.beta, workers=cfg.workers)
    if not np.all(np.isfinite(report.gradient)):
        raise NonFiniteGradient(getattr(handle, 'name', 'policy'))
    params = np.asarray(handle.get_parameters(), dtype=np.float64)
    updated = params + learning_rate * report.gradient
    handle.set_parameters(updated)
    logger.debug('%s step: objective=%.6f clip_fraction=%.4f kl=%.3e |g|=%.3e', getattr(handle, 'name', 'policy'),
                 report.objective, report.clip_fraction, report.kl_value, float(np.linalg.norm(report.gradient)))
    return updated, report
