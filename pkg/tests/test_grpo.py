import math

import numpy as np
import pytest

from ttsr import ToyQuestionSpec, Trajectory, PolicyHandle, GroupTooSmall, ContinuityError, NonFiniteGradient
from ttsr.config import ToyConfig, config_from_dict
from ttsr.grpo import (compute_group_advantages, token_ratio, clipped_term, kl_divergence, grpo_objective,
                       grpo_step, RolloutGroup)
from ttsr.policies import StudentParameters, TeacherParameters
from ttsr.tasks import toy_question


class FixedHandle(PolicyHandle):
    """Scores every trajectory with fixed log-probabilities; the gradient is the weight vector itself"""
    name = 'fixed'

    def __init__(self, new_logprobs, gradient_scale=1.0):
        self.new_logprobs = np.asarray(new_logprobs, dtype=np.float64)
        self.params = np.zeros(self.new_logprobs.size)
        self.gradient_scale = gradient_scale
        self.set_calls = 0

    def get_parameters(self):
        return self.params.copy()

    def set_parameters(self, flat):
        self.set_calls += 1
        self.params = np.asarray(flat, dtype=np.float64)

    def score_logprobs(self, trajectory):
        return self.new_logprobs

    def token_distributions(self, trajectory):
        raise AssertionError('no distributions expected')

    def logprob_gradient(self, trajectory, weights):
        return np.asarray(weights) * self.gradient_scale

    def kl_gradient(self, trajectory, weights):
        return np.zeros(self.params.size)


def _fixed_trajectory():
    return Trajectory(question_id='q-1', token_ids=(1, 2), text='12', answer_raw='12', answer_canonical='12',
                      old_logprobs=(math.log(0.5), math.log(0.5)))


def _toy_student(seed=3):
    toy = ToyConfig(modulus=11, difficulties=(2,), n_features=8, init_scale=0.5)
    return StudentParameters(toy, np.random.default_rng(seed))


def _student_groups(student, rng):
    question = toy_question(ToyQuestionSpec(modulus=11, op_chain=(('+', 3), ('*', 4)))).view()
    groups = []
    for rewards in ((1, 0, 1, 0), (1, 1, 1, 0)):
        trajectories = tuple(student.sample(question, rng) for _ in range(len(rewards)))
        groups.append(RolloutGroup(trajectories=trajectories,
                                   advantages=tuple(compute_group_advantages(rewards, 1e-4))))
    return groups


def _random_student_group(seed):
    """A student and one rollout group on a random toy question, with mixed binary rewards, just off policy"""
    rng = np.random.default_rng(seed)
    student = _toy_student(seed)
    chain = tuple((str(rng.choice(['+', '-', '*'])), int(rng.integers(11))) for _ in range(int(rng.integers(1, 5))))
    question = toy_question(ToyQuestionSpec(modulus=11, op_chain=chain)).view()
    size = int(rng.integers(2, 7))
    trajectories = tuple(student.sample(question, rng) for _ in range(size))
    rewards = [1, 0] + [int(r) for r in rng.integers(2, size=size - 2)]
    group = RolloutGroup(trajectories=trajectories, advantages=tuple(compute_group_advantages(rewards, 1e-4)))
    student.set_parameters(student.get_parameters() + rng.normal(scale=0.01, size=student.size))
    return student, group


def _teacher_groups(teacher, rng):
    groups = []
    for rewards in ((0.9, 0.1, 0.4), (0.0, 0.7, 0.2)):
        trajectories = []
        for i in range(len(rewards)):
            bucket = i % teacher.n_buckets
            action, logprob, distribution = teacher.sample_action(bucket, rng)
            trajectories.append(Trajectory(question_id='q-1', token_ids=(action,), text='candidate',
                                           answer_raw=str(action), answer_canonical=str(action),
                                           old_logprobs=(logprob,), old_distributions=(distribution,),
                                           context=(bucket,)))
        groups.append(RolloutGroup(trajectories=tuple(trajectories),
                                   advantages=tuple(compute_group_advantages(rewards, 1e-4))))
    return groups


def _finite_difference(handle, objective, h=1e-5):
    base = handle.get_parameters()
    gradient = np.zeros_like(base)
    for i in range(base.size):
        step = np.zeros_like(base)
        step[i] = h
        handle.set_parameters(base + step)
        up = objective()
        handle.set_parameters(base - step)
        down = objective()
        gradient[i] = (up - down) / (2 * h)
    handle.set_parameters(base)
    return gradient


def _relative_error(analytic, numeric):
    return np.linalg.norm(analytic - numeric) / max(np.linalg.norm(analytic), np.linalg.norm(numeric))


@pytest.mark.parametrize("rewards, delta, expected", [
    ((1, 1, 0, 0), 1e-4, (0.99980004, 0.99980004, -0.99980004, -0.99980004)),
    ((1, 0), 0.01, (0.98039216, -0.98039216)),
    ((1, 1, 1, 1), 1e-4, (0.0, 0.0, 0.0, 0.0)),
    ((0, 0), 1e-4, (0.0, 0.0)),
])
def test_group_advantages(rewards, delta, expected):
    advantages = compute_group_advantages(rewards, delta)
    assert advantages == pytest.approx(list(expected), abs=1e-8)
    assert abs(sum(advantages)) < 1e-12


def test_equal_rewards_give_exact_zero():
    assert compute_group_advantages([0.3, 0.3, 0.3], 1e-4) == [0.0, 0.0, 0.0]


def test_advantages_real_valued():
    advantages = compute_group_advantages([0.9, 0.1, 0.4, 0.0], 1e-4)
    assert advantages[0] == max(advantages)
    assert advantages[3] == min(advantages)
    assert sum(advantages) == pytest.approx(0.0, abs=1e-12)


@pytest.mark.parametrize("rewards", [(), (1,)])
def test_group_too_small(rewards):
    with pytest.raises(GroupTooSmall, match='group too small'):
        compute_group_advantages(rewards, 1e-4)


def test_advantages_need_positive_delta():
    with pytest.raises(ValueError):
        compute_group_advantages((1, 0), 0.0)


def test_token_ratio():
    assert token_ratio(math.log(0.6), math.log(0.5)) == pytest.approx(1.2)
    assert token_ratio(-1.0, -1.0) == 1.0
    with pytest.raises(ValueError):
        token_ratio(float('-inf'), -1.0)


@pytest.mark.parametrize("ratio, advantage, expected", [
    (1.5, 1.0, 1.2),
    (0.5, 1.0, 0.5),
    (0.5, -1.0, -0.8),
    (1.5, -1.0, -1.5),
    (1.1, 2.0, 2.2),
    (1.0, 0.0, 0.0),
])
def test_clipped_term(ratio, advantage, expected):
    assert clipped_term(ratio, advantage, 0.2) == pytest.approx(expected)


@pytest.mark.parametrize("ratio, epsilon", [(0.0, 0.2), (-1.0, 0.2), (1.0, 0.0), (1.0, 1.0)])
def test_clipped_term_invalid(ratio, epsilon):
    with pytest.raises(ValueError):
        clipped_term(ratio, 1.0, epsilon)


def test_kl_divergence():
    assert kl_divergence([0.5, 0.5], [0.25, 0.75]) == pytest.approx(0.143841, abs=1e-6)
    assert kl_divergence([1.0, 0.0], [0.5, 0.5]) == pytest.approx(math.log(2))
    assert kl_divergence([0.2, 0.3, 0.5], [0.2, 0.3, 0.5]) == 0.0


def test_kl_divergence_rows_are_averaged():
    value = kl_divergence([[0.5, 0.5], [0.3, 0.7]], [[0.25, 0.75], [0.3, 0.7]])
    assert value == pytest.approx(0.143841 / 2, abs=1e-6)


def test_kl_continuity():
    with pytest.raises(ContinuityError):
        kl_divergence([0.5, 0.5], [1.0, 0.0])


@pytest.mark.parametrize("new, old", [
    ([0.5, 0.5], [0.2, 0.3, 0.5]),
    ([0.5, 0.6], [0.5, 0.5]),
    ([1.5, -0.5], [0.5, 0.5]),
])
def test_kl_invalid(new, old):
    with pytest.raises(ValueError):
        kl_divergence(new, old)


def test_objective_clipping():
    handle = FixedHandle([math.log(0.9), math.log(0.3)])
    group = RolloutGroup(trajectories=(_fixed_trajectory(),), advantages=(1.0,))
    report = grpo_objective(handle, [group], epsilon=0.2, beta=0.0)
    np.testing.assert_allclose(report.per_token_terms[0], [1.2, 0.6])
    assert report.surrogate == pytest.approx(0.9)
    assert report.objective == report.surrogate
    assert report.clip_fraction == 0.5
    assert report.n_tokens == 2
    np.testing.assert_allclose(report.gradient, [0.0, 0.3], atol=1e-12)


def test_objective_clipping_negative_advantage():
    handle = FixedHandle([math.log(0.9), math.log(0.3)])
    group = RolloutGroup(trajectories=(_fixed_trajectory(),), advantages=(-1.0,))
    report = grpo_objective(handle, [group], epsilon=0.2, beta=0.0)
    np.testing.assert_allclose(report.per_token_terms[0], [-1.8, -0.8])
    assert report.clip_fraction == 0.5
    np.testing.assert_allclose(report.gradient, [-0.9, 0.0], atol=1e-12)


def test_objective_of_no_groups():
    report = grpo_objective(FixedHandle([0.0, 0.0]), [], epsilon=0.2, beta=0.1)
    assert report.objective == 0.0
    assert report.n_tokens == 0
    assert not np.any(report.gradient)


def test_kl_penalty_needs_distributions():
    group = RolloutGroup(trajectories=(_fixed_trajectory(),), advantages=(1.0,))
    with pytest.raises(ValueError):
        grpo_objective(FixedHandle([math.log(0.5), math.log(0.5)]), [group], epsilon=0.2, beta=0.1)


@pytest.mark.parametrize("beta", [0.0, 0.05])
@pytest.mark.parametrize("seed", range(10))
def test_student_gradient_matches_finite_difference(seed, beta):
    student, group = _random_student_group(seed)
    report = grpo_objective(student, [group], epsilon=0.2, beta=beta)
    assert report.kl_value > 0
    numeric = _finite_difference(student, lambda: grpo_objective(student, [group], epsilon=0.2, beta=beta).objective)
    assert _relative_error(report.gradient, numeric) < 1e-5


def test_student_gradient_over_several_groups():
    rng = np.random.default_rng(11)
    student = _toy_student()
    groups = _student_groups(student, rng)
    student.set_parameters(student.get_parameters() + rng.normal(scale=0.01, size=student.size))
    report = grpo_objective(student, groups, epsilon=0.2, beta=0.05)
    numeric = _finite_difference(student, lambda: grpo_objective(student, groups, epsilon=0.2, beta=0.05).objective)
    assert _relative_error(report.gradient, numeric) < 1e-5


@pytest.mark.parametrize("beta", [0.0, 0.05])
def test_teacher_gradient_matches_finite_difference(beta):
    rng = np.random.default_rng(5)
    teacher = TeacherParameters(ToyConfig(n_buckets=3))
    teacher.set_parameters(rng.normal(scale=0.3, size=teacher.table.size))
    groups = _teacher_groups(teacher, rng)
    teacher.set_parameters(teacher.get_parameters() + rng.normal(scale=0.01, size=teacher.table.size))
    report = grpo_objective(teacher, groups, epsilon=0.2, beta=beta)
    numeric = _finite_difference(teacher, lambda: grpo_objective(teacher, groups, epsilon=0.2, beta=beta).objective)
    assert _relative_error(report.gradient, numeric) < 1e-5


def test_clipped_tokens_have_zero_gradient():
    rng = np.random.default_rng(17)
    trajectory = Trajectory(question_id='q-1', token_ids=(3,), text='3', answer_raw='3', answer_canonical='3',
                            old_logprobs=(math.log(0.5),))
    for _ in range(20):
        epsilon = float(rng.uniform(0.05, 0.5))
        if rng.integers(2):
            advantage = float(rng.uniform(0.1, 3.0))
            ratio = float(rng.uniform(1.0 + epsilon + 1e-3, 1.99))
        else:
            advantage = -float(rng.uniform(0.1, 3.0))
            ratio = float(rng.uniform(0.05, 1.0 - epsilon - 1e-3))
        handle = FixedHandle([math.log(0.5 * ratio)])
        group = RolloutGroup(trajectories=(trajectory,), advantages=(advantage,))
        report = grpo_objective(handle, [group], epsilon=epsilon, beta=0.0)
        assert report.clip_fraction == 1.0
        assert report.per_token_terms[0][0] == pytest.approx(min(max(ratio, 1.0 - epsilon), 1.0 + epsilon) * advantage)
        assert not np.any(report.gradient)


def test_gradient_at_behaviour_policy_is_vanilla_policy_gradient():
    rng = np.random.default_rng(2)
    student = _toy_student()
    groups = _student_groups(student, rng)
    report = grpo_objective(student, groups, epsilon=0.2, beta=0.05)
    assert report.clip_fraction == 0.0
    assert report.kl_value == pytest.approx(0.0, abs=1e-15)
    expected = np.zeros_like(report.gradient)
    for group in groups:
        for trajectory, advantage in zip(group.trajectories, group.advantages):
            scale = 1.0 / (len(groups) * len(group.trajectories) * len(trajectory.token_ids))
            expected += student.logprob_gradient(trajectory, np.full(len(trajectory.token_ids), advantage * scale))
    np.testing.assert_allclose(report.gradient, expected, atol=1e-12)


def test_workers_do_not_change_the_result():
    rng = np.random.default_rng(8)
    student = _toy_student()
    groups = _student_groups(student, rng)
    student.set_parameters(student.get_parameters() + rng.normal(scale=0.05, size=student.size))
    serial = grpo_objective(student, groups, epsilon=0.2, beta=0.01, workers=1)
    threaded = grpo_objective(student, groups, epsilon=0.2, beta=0.01, workers=3)
    assert serial.objective == threaded.objective
    assert np.array_equal(serial.gradient, threaded.gradient)


def test_step_with_zero_learning_rate():
    rng = np.random.default_rng(4)
    student = _toy_student()
    groups = _student_groups(student, rng)
    before = student.get_parameters()
    updated, _ = grpo_step(student, groups, config_from_dict({}), learning_rate=0.0)
    assert np.array_equal(updated, before)
    assert np.array_equal(student.get_parameters(), before)


def test_step_ascends():
    rng = np.random.default_rng(6)
    student = _toy_student()
    groups = _student_groups(student, rng)
    cfg = config_from_dict({'beta': 0.0})
    before = student.get_parameters()
    updated, report = grpo_step(student, groups, cfg, learning_rate=0.1)
    np.testing.assert_allclose(updated, before + 0.1 * report.gradient)
    assert grpo_objective(student, groups, epsilon=0.2, beta=0.0).objective > report.objective


def test_step_rejects_non_finite_gradient():
    handle = FixedHandle([math.log(0.5), math.log(0.5)], gradient_scale=float('nan'))
    group = RolloutGroup(trajectories=(_fixed_trajectory(),), advantages=(1.0,))
    with pytest.raises(NonFiniteGradient) as error:
        grpo_step(handle, [group], config_from_dict({'beta': 0.0}))
    assert error.value.block == 'fixed'
    assert handle.set_calls == 0


def test_step_leaves_behaviour_log_probabilities_reproducible():
    rng = np.random.default_rng(21)
    student = _toy_student()
    groups = _student_groups(student, rng)
    snapshot = student.get_parameters()
    updated, _ = grpo_step(student, groups, config_from_dict({}), learning_rate=1.0)
    assert not np.array_equal(updated, snapshot)
    trajectories = [t for group in groups for t in group.trajectories]
    assert any(not np.allclose(student.score_logprobs(t), t.old_logprobs) for t in trajectories)
    student.set_parameters(snapshot)
    for trajectory in trajectories:
        np.testing.assert_allclose(student.score_logprobs(trajectory), trajectory.old_logprobs, rtol=0, atol=1e-12)
        np.testing.assert_allclose(student.token_distributions(trajectory), trajectory.old_distributions, rtol=0,
                                   atol=1e-12)
