import dataclasses
import os

import numpy as np
import pytest

from conftest import StubSession, completion, data_path, read_data

from ttsr import Policy, Question, Trajectory, ConfigError, IterationAborted
from ttsr.config import RunConfig, config_from_dict
from ttsr.consensus import canonicalize_answer
from ttsr.enums import EvalMode
from ttsr.orchestrator import LoopState, Runner, evaluate, replay, toy_datasets
from ttsr.policies import ToyPolicy
from ttsr.rundir import (load_snapshots, load_report, load_evaluations, RUN, ITERATIONS, TRAJECTORIES, CURRICULUM,
                         METRICS, EVALUATIONS, REPORT, POLICY)


class AnswerPolicy(Policy):
    """Answers every toy question with its true value plus ``offset``"""

    def __init__(self, offset=0):
        self.offset = offset

    def _answer(self, question):
        spec = question.toy_payload
        return str((spec.answer() + self.offset) % spec.modulus)

    def sample_group(self, question, group_size, rng=None, temperature=None):
        answer = self._answer(question)
        return [Trajectory(question_id=question.id, token_ids=(), text=answer, answer_raw=answer,
                           answer_canonical=canonicalize_answer(answer)) for _ in range(group_size)]

    def greedy_answer(self, question):
        return self._answer(question)


class FailingPolicy(ToyPolicy):
    """Raises whenever a rollout group of ``fail_group_size`` is requested"""
    fail_group_size = 4

    def sample_group(self, question, group_size, rng=None, temperature=None):
        if group_size == self.fail_group_size:
            raise ValueError('sampler exploded')
        return super().sample_group(question, group_size, rng, temperature)


def _parameters(policy):
    return policy.student.get_parameters(), policy.teacher.get_parameters()


def _with(cfg, **changes):
    return dataclasses.replace(cfg, **changes)


def test_toy_datasets(small_toy_cfg):
    test, held_out = toy_datasets(small_toy_cfg)
    assert len(test) == 8
    assert len(held_out) == 8
    assert not {q.id for q in test} & {q.id for q in held_out}
    assert [q.id for q in toy_datasets(small_toy_cfg)[0]] == [q.id for q in test]
    assert [q.id for q in toy_datasets(_with(small_toy_cfg, seed=1))[0]] != [q.id for q in test]


def test_evaluate():
    questions = toy_datasets(config_from_dict({'toy': {'modulus': 11, 'test_size': 6, 'eval_size': 6}}))[1]
    assert evaluate(AnswerPolicy(), questions) == 1.0
    assert evaluate(AnswerPolicy(), questions, EvalMode.MEAN_AT_K, k=3) == 1.0
    assert evaluate(AnswerPolicy(offset=1), questions, 'greedy') == 0.0
    assert evaluate(AnswerPolicy(offset=1), questions, 'mean@k', k=2, workers=3) == 0.0


def test_evaluate_invalid():
    with pytest.raises(ValueError):
        evaluate(AnswerPolicy(), [])
    with pytest.raises(ValueError):
        evaluate(AnswerPolicy(), [Question(id='q-1', body='What is 6 times 7?')])
    questions = toy_datasets(config_from_dict({'toy': {'modulus': 11, 'test_size': 2, 'eval_size': 2}}))[1]
    with pytest.raises(ValueError):
        evaluate(AnswerPolicy(), questions, EvalMode.MEAN_AT_K, k=0)


def test_runner_validates_config():
    with pytest.raises(ConfigError):
        Runner(RunConfig(G=1))


def test_ttsr_run(small_toy_cfg, tmp_path):
    path = str(tmp_path / 'run')
    report = Runner(small_toy_cfg, run_dir=path).run()
    assert len(report.iterations) == 2
    assert report.error is None
    assert report.mode == 'ttsr'
    assert set(report.initial_evaluation) == {'greedy', 'mean@k', 'k'}
    for metrics in report.iterations:
        assert metrics['n_batch'] == 6
        assert {'objective', 'clip_fraction', 'kl', 'n_failed', 'n_variants', 'acceptance_rate'} <= set(metrics)
        assert metrics['n_variants'] <= small_toy_cfg.M
    for name in (RUN, ITERATIONS, TRAJECTORIES, CURRICULUM, METRICS, EVALUATIONS, REPORT, POLICY):
        assert os.path.exists(os.path.join(path, name))

    test_ids = tuple(q.id for q in toy_datasets(small_toy_cfg)[0])
    snapshots = load_snapshots(path)
    assert [s.t for s in snapshots] == [1, 2]
    assert snapshots[0].training_set == test_ids
    assert snapshots[1].training_set == test_ids + tuple(v.question.id for v in snapshots[0].variants)
    for snapshot in snapshots:
        assert len(snapshot.variants) <= small_toy_cfg.M
        assert len(snapshot.groups) == 6
        assert all(group.size == small_toy_cfg.G for group in snapshot.groups)
        for candidate in snapshot.candidates:
            assert candidate.r_teacher == max(0.0, candidate.r_diff - candidate.r_sim)
            assert candidate.question.toy_payload is not None
        ranked = sorted(snapshot.candidates, key=lambda v: (-v.r_teacher, v.question.id))
        assert list(snapshot.variants) == ranked[:small_toy_cfg.M]

    rebuilt, matches = replay(path)
    assert matches
    assert rebuilt == report.__class__.from_dict(load_report(path))


def test_frozen_run_keeps_parameters(small_toy_cfg):
    cfg = _with(small_toy_cfg, mode='frozen')
    policy = ToyPolicy(cfg.toy, seed=cfg.seed)
    student, teacher = _parameters(policy)
    report = Runner(cfg, policy=policy).run()
    assert np.array_equal(policy.student.get_parameters(), student)
    assert np.array_equal(policy.teacher.get_parameters(), teacher)
    assert report.final_evaluation == report.initial_evaluation
    for metrics in report.iterations:
        assert 'objective' not in metrics
        assert 'n_failed' not in metrics


def test_ttrl_never_synthesises(small_toy_cfg):
    cfg = _with(small_toy_cfg, mode='ttrl')
    policy = ToyPolicy(cfg.toy, seed=cfg.seed)
    student, teacher = _parameters(policy)
    runner = Runner(cfg, policy=policy)
    state = LoopState()
    for t in (1, 2, 3):
        state, snapshot = runner.run_iteration(state)
        assert state.t == t + 1
        assert snapshot.variants == ()
        assert snapshot.candidates == ()
        assert snapshot.training_set == tuple(q.id for q in runner.test_questions)
        assert not any('variant' in name or 'teacher' in name for name in snapshot.metrics)
    assert not np.array_equal(policy.student.get_parameters(), student)
    assert np.array_equal(policy.teacher.get_parameters(), teacher)


def test_no_teacher_update(small_toy_cfg):
    cfg = _with(small_toy_cfg, mode='no_teacher_update')
    policy = ToyPolicy(cfg.toy, seed=cfg.seed)
    _, teacher = _parameters(policy)
    Runner(cfg, policy=policy).run()
    assert np.array_equal(policy.teacher.get_parameters(), teacher)


def test_no_sim_penalty(small_toy_cfg):
    runner = Runner(_with(small_toy_cfg, mode='no_sim_penalty', T=3))
    state = LoopState()
    for _ in range(3):
        state, snapshot = runner.run_iteration(state)
        for candidate in snapshot.candidates:
            assert candidate.lambda_ == 0.0
            assert candidate.r_teacher == candidate.r_diff


def test_no_reflection(small_toy_cfg):
    runner = Runner(_with(small_toy_cfg, mode='no_reflection'))
    state = LoopState()
    for _ in range(2):
        state, snapshot = runner.run_iteration(state)
        assert snapshot.reflections == ()
        assert len(snapshot.variants) <= small_toy_cfg.M


def test_run_is_deterministic(small_toy_cfg):
    first_policy = ToyPolicy(small_toy_cfg.toy, seed=small_toy_cfg.seed)
    second_policy = ToyPolicy(small_toy_cfg.toy, seed=small_toy_cfg.seed)
    first = Runner(small_toy_cfg, policy=first_policy).run()
    second = Runner(small_toy_cfg, policy=second_policy).run()
    assert first.iterations == second.iterations
    assert first.initial_evaluation == second.initial_evaluation
    assert first.final_evaluation == second.final_evaluation
    assert first.config_hash == second.config_hash
    for a, b in zip(_parameters(first_policy), _parameters(second_policy)):
        assert np.array_equal(a, b)


def test_workers_do_not_change_the_run(small_toy_cfg):
    serial_policy = ToyPolicy(small_toy_cfg.toy, seed=small_toy_cfg.seed)
    threaded_policy = ToyPolicy(small_toy_cfg.toy, seed=small_toy_cfg.seed)
    serial = Runner(small_toy_cfg, policy=serial_policy).run()
    threaded = Runner(_with(small_toy_cfg, workers=4), policy=threaded_policy).run()
    assert serial.iterations == threaded.iterations
    assert serial.final_evaluation == threaded.final_evaluation
    assert serial.config_hash != threaded.config_hash
    for a, b in zip(_parameters(serial_policy), _parameters(threaded_policy)):
        assert np.array_equal(a, b)


def test_zero_iterations(small_toy_cfg, tmp_path):
    path = str(tmp_path / 'run')
    report = Runner(_with(small_toy_cfg, T=0), run_dir=path).run()
    assert report.iterations == ()
    assert report.final_evaluation == report.initial_evaluation
    assert load_snapshots(path) == []
    assert replay(path)[1]


def test_aborted_iteration(small_toy_cfg, tmp_path):
    cfg = _with(small_toy_cfg, eval_k=5)
    runner = Runner(cfg, policy=FailingPolicy(cfg.toy, seed=cfg.seed), run_dir=str(tmp_path / 'single'))
    with pytest.raises(IterationAborted) as error:
        runner.run_iteration(LoopState())
    snapshot = error.value.snapshot
    assert snapshot.error == 'ValueError: sampler exploded'
    assert isinstance(error.value.__cause__, ValueError)
    assert snapshot.training_set == tuple(q.id for q in runner.test_questions)
    assert snapshot.groups == ()
    assert load_snapshots(str(tmp_path / 'single')) == [snapshot]


def test_aborted_run_writes_partial_report(small_toy_cfg, tmp_path):
    cfg = _with(small_toy_cfg, eval_k=5)
    path = str(tmp_path / 'run')
    with pytest.raises(IterationAborted):
        Runner(cfg, policy=FailingPolicy(cfg.toy, seed=cfg.seed), run_dir=path).run()
    stored = load_report(path)
    assert stored['error'] == 'ValueError: sampler exploded'
    assert stored['iterations'] == []
    assert stored['final_evaluation'] is None
    assert load_evaluations(path)['final']['evaluation'] is None
    rebuilt, matches = replay(path)
    assert matches
    assert rebuilt.error == stored['error']


def test_remote_run(sleeps):
    cfg = config_from_dict({
        'backend': 'remote',
        'questions_path': data_path('questions.jsonl'),
        'G': 3,
        'M': 1,
        'T': 1,
        'batch_size': 3,
        'eval_k': 1,
        'synthesis_format': 'tagged',
        'endpoint': {'concurrency': 1},
    })
    initial = [completion('\\boxed{7}'), completion('\\boxed{55}'), completion('\\boxed{9}')]
    final = [completion('\\boxed{7}'), completion('\\boxed{55}'), completion('\\boxed{8}')]
    session = StubSession(initial + initial + [
        completion('\\boxed{7}', '\\boxed{7}', '\\boxed{7}'),
        completion('\\boxed{55}', '\\boxed{55}', '\\boxed{54}'),
        completion('\\boxed{8}', '\\boxed{8}', '\\boxed{8}'),
        completion(read_data('reflection_example.json')),
        completion('Here it is.\n<question>What is the sum of the first twenty positive integers?</question>'),
        completion('\\boxed{210}', '\\boxed{210}', '\\boxed{200}'),
    ] + final + final)
    with pytest.warns(UserWarning, match='no parameters to update'):
        runner = Runner(cfg, session=session, sleep=sleeps)
    report = runner.run()
    assert session.responses == []
    assert report.initial_evaluation == {'greedy': 2 / 3, 'mean@k': 2 / 3, 'k': 1}
    assert report.final_evaluation == {'greedy': 1.0, 'mean@k': 1.0, 'k': 1}
    metrics = report.iterations[0]
    assert metrics['n_failed'] == 1
    assert metrics['n_candidates'] == 1
    assert metrics['acceptance_rate'] == 1.0
    assert metrics['n_variants'] == 1
    # nine of ten tokens match the source: similarity 0.9, penalty 0.9 - 0.75
    assert metrics['mean_r_sim'] == pytest.approx(0.15)
    assert metrics['mean_r_diff'] == pytest.approx(0.9182958340544896)
    assert metrics['mean_r_teacher'] == pytest.approx(0.9182958340544896 - 0.15)
    assert 'objective' not in metrics
    reflection = session.posts[9]['json']['messages'][0]['content']
    assert '54' in reflection
    assert 'What is the sum of the first ten positive integers?' in reflection
    assert not sleeps.delays


def _erased(questions):
    copies = []
    for question in questions:
        copy = dataclasses.replace(question)
        object.__setattr__(copy, 'ground_truth', None)
        copies.append(copy)
    return copies


def test_rewards_never_read_ground_truth(small_toy_cfg):
    test, held_out = toy_datasets(small_toy_cfg)
    runs = []
    for questions in (test, _erased(test)):
        policy = ToyPolicy(small_toy_cfg.toy, seed=small_toy_cfg.seed)
        runner = Runner(small_toy_cfg, policy=policy, test_questions=questions, eval_questions=held_out)
        state = LoopState()
        snapshots = []
        for _ in range(2):
            state, snapshot = runner.run_iteration(state)
            snapshots.append(snapshot)
        runs.append((snapshots, _parameters(policy)))
    (labelled, labelled_parameters), (erased, erased_parameters) = runs
    assert all(q.ground_truth is None for q in _erased(test))
    for a, b in zip(labelled, erased):
        assert [g.rewards for g in a.groups] == [g.rewards for g in b.groups]
        assert [g.advantages for g in a.groups] == [g.advantages for g in b.groups]
        assert [c.r_teacher for c in a.candidates] == [c.r_teacher for c in b.candidates]
        assert [v.question.id for v in a.variants] == [v.question.id for v in b.variants]
        assert a.metrics == b.metrics
    for a, b in zip(labelled_parameters, erased_parameters):
        assert np.array_equal(a, b)
