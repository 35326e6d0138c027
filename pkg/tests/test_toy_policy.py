import numpy as np
import pytest

from ttsr import Question, FailedInstance, Trajectory, ToyQuestionSpec
from ttsr.config import ToyConfig
from ttsr.consensus import canonicalize_answer, score_group
from ttsr.curriculum import parse_reflection
from ttsr.policies import ToyPolicy, StudentParameters
from ttsr.rewards import format_gate
from ttsr.tasks import toy_question, parse_toy_question, decode_action, digits_of, N_ACTIONS


TOY = ToyConfig(modulus=11, difficulties=(1, 2, 3), n_features=16, n_buckets=3)


def _question(*chain):
    return toy_question(ToyQuestionSpec(modulus=11, op_chain=chain))


def _failed(question, answer='3', target='7', score_s=0.25):
    trajectory = Trajectory(question_id=question.id, token_ids=(0, int(answer)), text='The final value is 0{0}.'.format(
        answer), answer_raw='0' + answer, answer_canonical=answer)
    return FailedInstance(question=question.view(), trajectory=trajectory, pseudo_target=target, score_s=score_s)


def test_initialisation_is_seeded():
    first = ToyPolicy(TOY, seed=4)
    assert np.array_equal(first.student.get_parameters(), ToyPolicy(TOY, seed=4).student.get_parameters())
    assert not np.array_equal(first.student.get_parameters(), ToyPolicy(TOY, seed=5).student.get_parameters())
    assert not np.any(first.teacher.get_parameters())
    assert first.learnable


def test_sample_group():
    policy = ToyPolicy(TOY, seed=1)
    question = _question(('+', 5), ('*', 2))
    group = policy.sample_group(question.view(), 6, np.random.default_rng(0))
    assert len(group) == 6
    for trajectory in group:
        assert trajectory.question_id == question.id
        assert len(trajectory.token_ids) == TOY.n_digits
        assert trajectory.text == 'The final value is {0}.'.format(trajectory.answer_raw)
        assert trajectory.answer_canonical == canonicalize_answer(trajectory.answer_raw)
        assert all(lp <= 0 for lp in trajectory.old_logprobs)
        for distribution in trajectory.old_distributions:
            assert sum(distribution) == pytest.approx(1.0)


def test_sample_group_is_reproducible():
    policy = ToyPolicy(TOY, seed=1)
    question = _question(('+', 5))
    first = policy.sample_group(question, 8, np.random.default_rng(9))
    second = policy.sample_group(question, 8, np.random.default_rng(9))
    assert first == second


def test_sampled_logprobs_match_scoring():
    policy = ToyPolicy(TOY, seed=2)
    for trajectory in policy.sample_group(_question(('-', 3), ('+', 4)), 4, np.random.default_rng(1)):
        np.testing.assert_allclose(policy.student.score_logprobs(trajectory), trajectory.old_logprobs)
        np.testing.assert_allclose(policy.student.token_distributions(trajectory), trajectory.old_distributions)


def test_greedy_answer():
    policy = ToyPolicy(TOY, seed=3)
    question = _question(('*', 3), ('+', 1))
    answer = policy.greedy_answer(question)
    assert answer == policy.greedy_answer(question.view())
    assert 0 <= int(answer) <= 99
    greedy = policy.student.sample(question.view(), None, temperature=0)
    assert greedy.answer_canonical == answer
    np.testing.assert_allclose(policy.student.score_logprobs(greedy), greedy.old_logprobs)
    np.testing.assert_allclose(policy.student.token_distributions(greedy), greedy.old_distributions)
    for logprob, distribution in zip(greedy.old_logprobs, greedy.old_distributions):
        assert logprob == pytest.approx(np.log(max(distribution)))


def test_low_temperature_collapses_the_group():
    policy = ToyPolicy(TOY, seed=3)
    question = _question(('*', 3), ('+', 1), ('-', 7))
    greedy = policy.greedy_answer(question)
    for temperature in (0, 1e-6):
        group = score_group(question.id, policy.sample_group(question, 8, np.random.default_rng(5), temperature),
                            delta=1e-4)
        assert {t.answer_canonical for t in group.trajectories} == {greedy}
        assert group.score_s == 1.0
        assert group.advantages == (0.0,) * 8


def test_uniform_logits_give_uniform_digits():
    toy = ToyConfig(modulus=10, difficulties=(1, 2), n_features=8)
    assert toy.n_digits == 1
    student = StudentParameters(toy, np.random.default_rng(0))
    student.set_parameters(np.zeros(student.size))
    question = toy_question(ToyQuestionSpec(modulus=10, op_chain=(('+', 3), ('*', 7)))).view()
    rng = np.random.default_rng(2024)
    draws = 5000
    counts = np.bincount([student.sample(question, rng).token_ids[0] for _ in range(draws)], minlength=10)
    expected = draws / 10
    chi_square = float(np.sum((counts - expected) ** 2 / expected))
    # 99.9th percentile of chi-square with 9 degrees of freedom
    assert chi_square < 27.877


def test_worked_value_prior():
    policy = ToyPolicy(TOY, seed=1)
    question = _question(('+', 5), ('*', 2))
    trajectory = policy.sample_group(question, 1, np.random.default_rng(0))[0]
    assert trajectory.context[:TOY.n_digits] == digits_of(10, TOY.n_digits)
    student = policy.student
    student.set_parameters(np.append(np.zeros(student.size - 1), 50.0))
    assert policy.greedy_answer(question) == '10'
    student.set_parameters(np.zeros(student.size))
    assert policy.greedy_answer(question) == '0'


def test_trust_gradient_follows_the_worked_value():
    policy = ToyPolicy(TOY, seed=2)
    question = _question(('-', 3), ('+', 4), ('*', 6))
    context = policy.student.context(question.toy_payload)
    worked = context[:TOY.n_digits]
    assert worked == (0, 6)

    def trust_gradient(digits):
        answer = ''.join(str(d) for d in digits)
        trajectory = Trajectory(question_id=question.id, token_ids=digits, text=answer, answer_raw=answer,
                                answer_canonical=canonicalize_answer(answer), context=context)
        return policy.student.logprob_gradient(trajectory, np.ones(TOY.n_digits))[-1]

    assert trust_gradient(worked) > 0
    assert trust_gradient((1, 7)) < 0


def test_sample_group_needs_toy_question():
    with pytest.raises(ValueError):
        ToyPolicy(TOY).sample_group(Question(id='q-1', body='What is 6 times 7?'), 2, np.random.default_rng(0))


def test_student_parameter_checks():
    student = StudentParameters(TOY, np.random.default_rng(0))
    with pytest.raises(ValueError):
        student.set_parameters(np.zeros(3))
    with pytest.raises(ValueError):
        student.set_parameters(np.full(student.size, np.nan))
    trajectory = ToyPolicy(TOY).sample_group(_question(('+', 1)), 1, np.random.default_rng(0))[0]
    with pytest.raises(ValueError):
        student.logprob_gradient(trajectory, np.ones(5))


def test_reflect():
    failed = [_failed(_question(('+', 5), ('*', 2))), _failed(_question(('*', 2), ('*', 3), ('+', 1)))]
    reflection = parse_reflection(ToyPolicy(TOY).reflect(failed))
    assert reflection.trigger_conditions[0] == 'Operation chains of 2 to 3 steps'
    assert reflection.trigger_conditions[1] == 'Frequent "multiply by" steps'
    with pytest.raises(ValueError):
        ToyPolicy(TOY).reflect([])


def test_synthesize_variants():
    policy = ToyPolicy(TOY, seed=0)
    source = _question(('+', 5), ('*', 2))
    candidates = policy.synthesize_variants([_failed(source)], 5, np.random.default_rng(2))
    assert len(candidates) == 5
    for candidate in candidates:
        gate = format_gate(candidate.raw_text)
        assert gate.accepted
        spec = parse_toy_question(gate.text)
        assert spec.difficulty == max(1, 2 + candidate.delta_k)
        assert candidate.source.id == source.id
        action = candidate.trajectory.token_ids[0]
        assert 0 <= action < N_ACTIONS
        assert decode_action(action) == (candidate.delta_k, candidate.reseed)
        assert candidate.trajectory.context == (0,)
        np.testing.assert_allclose(policy.teacher.score_logprobs(candidate.trajectory),
                                   candidate.trajectory.old_logprobs)


def test_synthesize_variants_needs_failures():
    with pytest.raises(ValueError):
        ToyPolicy(TOY).synthesize_variants([], 3, np.random.default_rng(0))


def test_save_and_load(tmp_path):
    policy = ToyPolicy(TOY, seed=6)
    policy.teacher.set_parameters(np.arange(policy.teacher.table.size, dtype=float) / 10)
    path = str(tmp_path / 'policy.npz')
    policy.save(path)
    restored = ToyPolicy(TOY, seed=7)
    restored.load(path)
    assert np.array_equal(restored.student.get_parameters(), policy.student.get_parameters())
    assert np.array_equal(restored.teacher.get_parameters(), policy.teacher.get_parameters())
