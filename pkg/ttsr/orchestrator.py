#!/usr/bin/env python
"""This module implements the test-time control loop: Student and Teacher phases, evaluation and replay """
# pylint: disable=too-many-lines
import logging
import math
import time
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Dict, Optional, Tuple

import numpy as np

from ttsr import (Question, VariantQuestion, IterationSnapshot, IterationAborted, ParseFailure)
from ttsr.config import validate_config, config_hash, config_from_dict
from ttsr.consensus import canonicalize_answer, score_group
from ttsr.curriculum import (collect_failed_instances, untargeted_sources, sample_failed, sample_batch,
                             build_reflection_prompt, parse_reflection, build_synthesis_prompt, parse_synthesis,
                             build_training_set, admit_variants)
from ttsr.enums import Backend, EvalMode, Mode, Source, SynthesisFormat
from ttsr.grpo import RolloutGroup, compute_group_advantages, grpo_step
from ttsr.policies import ToyPolicy, RemotePolicy
from ttsr.rewards import format_gate, difficulty_reward, batch_similarity_penalties, teacher_reward
from ttsr.rundir import RunDirectory, POLICY, load_run, load_report, load_evaluations, load_snapshots, load_questions
from ttsr.similarity import tokenize_question, similarity_ratio, text_similarity
from ttsr.tasks import gen_toy_set, parse_toy_question, toy_question


__all__ = [
    'LoopState',
    'RunReport',
    'Runner',
    'evaluate',
    'replay',
    'summarize',
    'toy_datasets',
]

logger = logging.getLogger(__name__)

# stream roles of the seeded generators; one independent stream per (seed, t, role, index)
ROLE_BATCH = 1
ROLE_GROUP = 2
ROLE_FAILED = 3
ROLE_SYNTHESIS = 4
ROLE_SCORE = 5
ROLE_EVAL = 6
ROLE_DATA = 7

_iteration_errors = (ValueError, TypeError, OSError, ArithmeticError, KeyError)


def _seeded(seed, t, role, index=0):
    return np.random.default_rng(np.random.SeedSequence([seed, t, role, index]))


def _fan_out(function, items, workers):
    """``map`` over a bounded thread pool; results keep the input order"""
    items = list(items)
    if workers > 1 and len(items) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(function, items))
    return [function(item) for item in items]


def _mean(values):
    values = list(values)
    return math.fsum(values) / len(values) if values else 0.0


def toy_datasets(cfg):
    """
    The toy test set X_test and the held-out evaluation set of a run; both depend only on the seed and the toy
    block, and never share a question
    """
    test = gen_toy_set(cfg.toy.test_size, cfg.toy, _seeded(cfg.seed, 0, ROLE_DATA, 0))
    held_out = gen_toy_set(cfg.toy.eval_size, cfg.toy, _seeded(cfg.seed, 0, ROLE_DATA, 1),
                           exclude=[q.id for q in test])
    return test, held_out


def evaluate(policy, eval_set, mode=EvalMode.GREEDY, k=32, seed=0, workers=1):
    """
    Accuracy of a policy against ground truth

    :param mode:
        ``greedy`` - fraction of questions whose deterministic answer is correct;
        ``mean@k`` - mean over questions of the fraction of ``k`` sampled answers that are correct

    :raises:
        - ValueError - on an empty set or a question without ground truth

    :returns:
        accuracy in [0, 1]
    """
    # pylint: disable=too-many-arguments
    mode = EvalMode(mode)
    eval_set = list(eval_set)
    if not eval_set:
        raise ValueError('evaluation needs at least one question')
    targets = []
    for question in eval_set:
        if question.ground_truth is None:
            raise ValueError('question {0} has no ground truth to evaluate against'.format(question.id))
        targets.append(canonicalize_answer(question.ground_truth))
    indexed = list(enumerate(eval_set))
    if mode is EvalMode.GREEDY:
        answers = _fan_out(lambda item: policy.greedy_answer(item[1].view()), indexed, workers)
        return sum(int(a == target) for a, target in zip(answers, targets)) / len(eval_set)
    if k < 1:
        raise ValueError('k should be at least 1, you provided {0}'.format(k))

    def correct_fraction(item):
        index, question = item
        group = policy.sample_group(question.view(), k, _seeded(seed, 0, ROLE_EVAL, index))
        return sum(int(t.answer_canonical == targets[index]) for t in group) / k

    return _mean(_fan_out(correct_fraction, indexed, workers))


@dataclass(frozen=True)
class LoopState:
    """Loop state entering iteration ``t``: the variant pool admitted by the previous iteration"""
    t: int = 1
    variants: Tuple[VariantQuestion, ...] = ()


@dataclass(frozen=True)
class RunReport:
    """
    Summary of a run: the metrics of every finished iteration, the evaluations before and after the loop and
    the identity of the run (seed, mode, config hash)
    """
    # pylint: disable=too-many-instance-attributes
    iterations: Tuple[Dict[str, float], ...]
    initial_evaluation: Optional[Dict[str, float]]
    final_evaluation: Optional[Dict[str, float]]
    wall_clock: Optional[float]
    seed: int
    config_hash: str
    mode: str
    error: Optional[str] = None

    def to_dict(self):
        return {
            'iterations': [dict(metrics) for metrics in self.iterations],
            'initial_evaluation': self.initial_evaluation,
            'final_evaluation': self.final_evaluation,
            'wall_clock': self.wall_clock,
            'seed': self.seed,
            'config_hash': self.config_hash,
            'mode': self.mode,
            'error': self.error,
        }

    @classmethod
    def from_dict(cls, data):
        return cls(iterations=tuple(dict(m) for m in data['iterations']),
                   initial_evaluation=data.get('initial_evaluation'), final_evaluation=data.get('final_evaluation'),
                   wall_clock=data.get('wall_clock'), seed=data['seed'], config_hash=data['config_hash'],
                   mode=data['mode'], error=data.get('error'))


@dataclass(frozen=True)
class _Draft:
    """A raw Teacher output before gating, with the question it derives from"""
    raw_text: str
    origin: object
    trajectory: object = None
    tagged: bool = True


class Runner:
    """
    Drives T test-time iterations over one policy

    :param cfg:
        a :class:`ttsr.config.RunConfig`; it is validated here

    :param policy:
        defaults to a fresh :class:`ttsr.policies.ToyPolicy` or :class:`ttsr.policies.RemotePolicy` per backend

    :param test_questions:
        X_test; defaults to the seeded toy set, or the questions file of a remote config

    :param eval_questions:
        held-out questions with ground truth; defaults to the toy held-out set, or the labelled test questions

    :param run_dir:
        a :class:`ttsr.rundir.RunDirectory` or a path; None keeps everything in memory

    :param session:
        optional ``requests.Session``-like object for the remote backend

    :param sleep:
        used by the remote backend between retries
    """
    # pylint: disable=too-many-instance-attributes,too-many-arguments
    def __init__(self, cfg, policy=None, test_questions=None, eval_questions=None, run_dir=None, session=None,
                 sleep=time.sleep):
        self.cfg = validate_config(cfg)
        self.digest = config_hash(self.cfg)
        self.mode = Mode(self.cfg.mode)
        remote = self.cfg.backend is Backend.REMOTE
        if policy is None:
            if remote:
                policy = RemotePolicy(self.cfg.endpoint, max_len=self.cfg.max_len, session=session, sleep=sleep)
            else:
                policy = ToyPolicy(self.cfg.toy, seed=self.cfg.seed)
        self.policy = policy
        if remote:
            if test_questions is None:
                test_questions = load_questions(self.cfg.questions_path)
            if eval_questions is None and all(q.ground_truth is not None for q in test_questions):
                eval_questions = test_questions
        elif test_questions is None or eval_questions is None:
            default_test, default_eval = toy_datasets(self.cfg)
            test_questions = default_test if test_questions is None else test_questions
            eval_questions = default_eval if eval_questions is None else eval_questions
        self.test_questions = tuple(test_questions)
        self.eval_questions = None if eval_questions is None else tuple(eval_questions)
        if run_dir is not None and not isinstance(run_dir, RunDirectory):
            run_dir = RunDirectory(run_dir)
        self.run_dir = run_dir
        self.workers = self.cfg.endpoint.concurrency if remote else self.cfg.workers
        if not self.policy.learnable and (self.mode.updates_student or self.mode.updates_teacher):
            warnings.warn('The {0} backend has no parameters to update; mode {1} runs as measurement only'.format(
                self.cfg.backend.value, self.mode.value))

    def _rollouts(self, questions, t, role):
        """One scored group of G trajectories per question; stream ``index`` seeds question ``index``"""
        group_size = self.cfg.G

        def rollout(item):
            index, question = item
            view = question.view() if isinstance(question, Question) else question
            trajectories = self.policy.sample_group(view, group_size, _seeded(self.cfg.seed, t, role, index))
            return score_group(view.id, trajectories, self.cfg.delta)

        return _fan_out(rollout, list(enumerate(questions)), self.workers)

    def _write_prompts(self, t, kind, prompts):
        if self.run_dir is not None:
            self.run_dir.write_prompts(t, kind, prompts)

    def _student_update(self, groups):
        report = None
        for _ in range(self.cfg.student_epochs):
            _, report = grpo_step(self.policy.student, groups, self.cfg)
        return report.metrics()

    def run_iteration(self, state):
        """
        One Student phase followed by one Teacher phase

        :param state:
            a :class:`LoopState`

        :raises:
            - IterationAborted - any sub-step failed; the snapshot up to the failure is attached and persisted

        :returns:
            a tuple (next :class:`LoopState`, :class:`ttsr.IterationSnapshot`)
        """
        t = state.t
        partial = {}
        try:
            training_set = build_training_set(self.test_questions, [v.question for v in state.variants])
            partial['training_set'] = tuple(q.id for q in training_set)
            batch = sample_batch(training_set, self.cfg.batch_size, _seeded(self.cfg.seed, t, ROLE_BATCH))
            groups = self._rollouts(batch, t, ROLE_GROUP)
            partial['groups'] = tuple(groups)
            metrics = {
                'n_training': len(training_set),
                'n_batch': len(batch),
                'mean_reward': _mean(r for g in groups for r in g.rewards),
                'mean_score_s': _mean(g.score_s for g in groups),
                'tie_rate': _mean(float(g.tie_flag) for g in groups),
            }
            if self.mode.updates_student and self.policy.learnable:
                metrics.update(self._student_update(groups))
            reflections = ()
            candidates = ()
            admitted = ()
            if self.mode.runs_teacher:
                questions = {q.id: q for q in training_set}
                reflections, candidates, teacher_metrics = self._teacher_phase(t, groups, questions, partial)
                admitted = tuple(admit_variants(candidates, self.cfg.M))
                teacher_metrics['n_variants'] = len(admitted)
                metrics.update(teacher_metrics)
            snapshot = IterationSnapshot(t=t, training_set=partial['training_set'], groups=groups,
                                         reflections=reflections, variants=admitted, candidates=candidates,
                                         metrics=metrics)
        except _iteration_errors as error:
            snapshot = IterationSnapshot(t=t, training_set=partial.get('training_set', ()),
                                         groups=partial.get('groups', ()),
                                         reflections=partial.get('reflections', ()),
                                         candidates=partial.get('candidates', ()),
                                         error='{0}: {1}'.format(type(error).__name__, error))
            logger.error('Iteration %d aborted: %s', t, snapshot.error)
            if self.run_dir is not None:
                self.run_dir.persist_snapshot(snapshot)
            raise IterationAborted('iteration {0} aborted: {1}'.format(t, snapshot.error), snapshot) from error
        if self.run_dir is not None:
            self.run_dir.persist_snapshot(snapshot)
        logger.info('Iteration %d: |D_t|=%d mean reward %.3f, %d variants admitted', t, len(training_set),
                    metrics['mean_reward'], len(admitted))
        return LoopState(t=t + 1, variants=admitted), snapshot

    def _reflect(self, t, sources):
        """Run the reflection step; a schema violation leaves the iteration without a diagnosis"""
        prompt = build_reflection_prompt(sources)
        self._write_prompts(t, 'reflection', [prompt])
        if hasattr(self.policy, 'teacher_call'):
            raw = self.policy.teacher_call(prompt, question_id='reflection-{0:03d}'.format(t))
        else:
            raw = self.policy.reflect(sources)
        try:
            return parse_reflection(raw)
        except ParseFailure as error:
            warnings.warn('Iteration {0}: reflection output rejected ({1}); no variants this iteration'.format(
                t, error))
            return None

    def _draft_candidates(self, t, sources, reflection):
        tagged = self.cfg.synthesis_format is SynthesisFormat.TAGGED
        prompt = build_synthesis_prompt(sources, reflection, tagged=tagged)
        self._write_prompts(t, 'synthesis', [prompt])
        rng = _seeded(self.cfg.seed, t, ROLE_SYNTHESIS)
        if not hasattr(self.policy, 'teacher_call'):
            return [_Draft(raw_text=c.raw_text, origin=c.source, trajectory=c.trajectory)
                    for c in self.policy.synthesize_variants(sources, self.cfg.M, rng)]
        drafts = []
        for j in range(self.cfg.M):
            raw = self.policy.teacher_call(prompt, question_id='synthesis-{0:03d}-{1:02d}'.format(t, j))
            drafts.append(_Draft(raw_text=raw, origin=None, tagged=tagged))
        return drafts

    def _gate(self, draft, sources):
        """Gated question text and its origin view, or (None, None) for a rejected draft"""
        if draft.tagged:
            gate = format_gate(draft.raw_text)
            if not gate.accepted:
                logger.debug('Candidate rejected by the format gate: %s', gate.reason.value)
                return None, None
            text = gate.text
        else:
            try:
                text = parse_synthesis(draft.raw_text).generated_question.strip()
            except ParseFailure as error:
                logger.debug('Candidate rejected by the synthesis schema: %s', error)
                return None, None
        origin = draft.origin
        if origin is None:
            scores = [text_similarity(text, source.question.body) for source in sources]
            origin = sources[int(np.argmax(scores))].question
        return text, origin

    def _variant_question(self, t, j, text, origin):
        question_id = 'var-{0:03d}-{1:02d}'.format(t, j)
        if origin.toy_payload is None:
            return Question(id=question_id, body=text, source=Source.VARIANT, origin_id=origin.id)
        return toy_question(parse_toy_question(text), source=Source.VARIANT, origin_id=origin.id,
                            question_id=question_id)

    def _teacher_phase(self, t, groups, questions, partial):
        """
        Reflection, synthesis, gating, scoring and the Teacher update of one iteration

        :returns:
            a tuple (reflections, scored candidates, metrics)
        """
        # pylint: disable=too-many-locals
        failed = collect_failed_instances(groups, questions)
        pool = failed if self.mode.reflects else untargeted_sources(groups, questions)
        sources = sample_failed(pool, self.cfg.M_fail, _seeded(self.cfg.seed, t, ROLE_FAILED)) if pool else []
        metrics = {
            'n_failed': len(failed),
            'n_candidates': 0,
            'n_gated': 0,
            'acceptance_rate': 0.0,
            'mean_r_teacher': 0.0,
            'mean_r_diff': 0.0,
            'mean_r_sim': 0.0,
            'mean_variant_similarity': 0.0,
            'teacher_clip_fraction': 0.0,
        }
        if not sources:
            logger.info('Iteration %d: no failed traces, the Teacher phase is skipped', t)
            return (), (), metrics

        reflection = None
        if self.mode.reflects:
            reflection = self._reflect(t, sources)
            if reflection is None:
                return (), (), metrics
            partial['reflections'] = (reflection,)

        drafts = self._draft_candidates(t, sources, reflection)
        gated = []
        for j, draft in enumerate(drafts):
            text, origin = self._gate(draft, sources)
            if text is None:
                continue
            try:
                question = self._variant_question(t, j, text, origin)
            except ParseFailure as error:
                logger.debug('Candidate %d rejected: %s', j, error)
                continue
            gated.append((question, origin, draft.trajectory))
        metrics['n_candidates'] = len(drafts)
        metrics['n_gated'] = len(gated)
        metrics['acceptance_rate'] = len(gated) / len(drafts) if drafts else 0.0
        if not gated:
            return partial.get('reflections', ()), (), metrics

        scored_groups = self._rollouts([question for question, _, _ in gated], t, ROLE_SCORE)
        tokens = [tokenize_question(question.body) for question, _, _ in gated]
        penalties = batch_similarity_penalties(tokens, [tokenize_question(origin.body) for _, origin, _ in gated],
                                               self.cfg.tau)
        lambda_ = self.cfg.effective_lambda
        candidates = []
        for (question, _, _), group, r_sim in zip(gated, scored_groups, penalties):
            r_diff = difficulty_reward(group.score_s)
            candidates.append(VariantQuestion(question=question, s_score=group.score_s, r_diff=r_diff, r_sim=r_sim,
                                              r_teacher=teacher_reward(r_diff, r_sim, lambda_), lambda_=lambda_))
        candidates = tuple(candidates)
        partial['candidates'] = candidates
        pairwise = [similarity_ratio(tokens[i], tokens[j]) for i in range(len(tokens))
                    for j in range(i + 1, len(tokens))]
        metrics.update({
            'mean_r_teacher': _mean(c.r_teacher for c in candidates),
            'mean_r_diff': _mean(c.r_diff for c in candidates),
            'mean_r_sim': _mean(c.r_sim for c in candidates),
            'mean_variant_similarity': _mean(pairwise),
        })

        trajectories = [trajectory for _, _, trajectory in gated]
        if (self.mode.updates_teacher and self.policy.learnable and len(candidates) >= 2
                and all(trajectory is not None for trajectory in trajectories)):
            advantages = compute_group_advantages([c.r_teacher for c in candidates], self.cfg.delta)
            _, report = grpo_step(self.policy.teacher, [RolloutGroup(tuple(trajectories), tuple(advantages))],
                                  self.cfg, learning_rate=self.cfg.teacher_learning_rate)
            metrics['teacher_clip_fraction'] = report.clip_fraction
        return partial.get('reflections', ()), candidates, metrics

    def evaluation(self):
        """Greedy pass@1 and mean@k on the held-out questions, or None when they carry no ground truth"""
        if self.eval_questions is None:
            warnings.warn('No labelled questions to evaluate against; evaluation skipped')
            return None
        return {
            'greedy': evaluate(self.policy, self.eval_questions, EvalMode.GREEDY, workers=self.workers),
            'mean@k': evaluate(self.policy, self.eval_questions, EvalMode.MEAN_AT_K, k=self.cfg.eval_k,
                               seed=self.cfg.seed, workers=self.workers),
            'k': self.cfg.eval_k,
        }

    def run(self):
        """
        Evaluate, run T iterations, evaluate again and write the report

        :raises:
            - IterationAborted - propagated from :meth:`run_iteration` after a partial report is written

        :returns:
            a :class:`RunReport`
        """
        start = time.perf_counter()
        if self.run_dir is not None:
            self.run_dir.write_run(self.cfg, self.digest)
        initial = self.evaluation()
        if self.run_dir is not None:
            self.run_dir.write_evaluation('initial', initial)
        logger.info('Run %s (mode=%s, seed=%d): initial evaluation %s', self.digest[:12], self.mode.value,
                    self.cfg.seed, initial)
        state = LoopState()
        iterations = []
        for _ in range(self.cfg.T):
            try:
                state, snapshot = self.run_iteration(state)
            except IterationAborted as aborted:
                self._finish(iterations, initial, None, start, error=aborted.snapshot.error)
                raise
            iterations.append(snapshot.metrics)
        final = initial if self.cfg.T == 0 else self.evaluation()
        if self.run_dir is not None and self.policy.learnable:
            self.policy.save(self.run_dir.file(POLICY))
        report = self._finish(iterations, initial, final, start)
        logger.info('Run %s finished in %.2fs: final evaluation %s', self.digest[:12], report.wall_clock, final)
        return report

    def _finish(self, iterations, initial, final, start, error=None):
        # pylint: disable=too-many-arguments
        wall_clock = time.perf_counter() - start
        report = RunReport(iterations=tuple(iterations), initial_evaluation=initial, final_evaluation=final,
                           wall_clock=wall_clock, seed=self.cfg.seed, config_hash=self.digest,
                           mode=self.mode.value, error=error)
        if self.run_dir is not None:
            self.run_dir.write_evaluation('final', final, wall_clock)
            self.run_dir.write_report(report)
        return report


def _teacher_mean(report, name, min_gated):
    values = [m[name] for m in report.iterations if name in m and m.get('n_gated', 0) >= min_gated]
    return _mean(values) if values else float('nan')


def summarize(report):
    """
    Comparison row of one run: the final accuracies, the Teacher reward averaged over the iterations that scored
    candidates, and the pairwise variant similarity averaged over the iterations that scored at least two. Fields
    with nothing to average are NaN
    """
    final = report.final_evaluation or {}
    return {
        'final_greedy': final.get('greedy', float('nan')),
        'final_mean_at_k': final.get('mean@k', float('nan')),
        'mean_r_teacher': _teacher_mean(report, 'mean_r_teacher', 1),
        'mean_variant_similarity': _teacher_mean(report, 'mean_variant_similarity', 2),
    }


def replay(path):
    """
    Rebuild the :class:`RunReport` of a run directory from its per-iteration artifacts

    :returns:
        a tuple (rebuilt report, True if it equals the stored report and the stored config hash still matches)
    """
    run = load_run(path)
    snapshots = load_snapshots(path)
    evaluations = load_evaluations(path)
    final = evaluations.get('final', {})
    report = RunReport(
        iterations=tuple(s.metrics for s in snapshots if s.error is None),
        initial_evaluation=evaluations.get('initial', {}).get('evaluation'),
        final_evaluation=final.get('evaluation'),
        wall_clock=final.get('wall_clock'),
        seed=run['seed'],
        config_hash=run['config_hash'],
        mode=run['mode'],
        error=next((s.error for s in snapshots if s.error is not None), None),
    )
    stored = load_report(path)
    matches = (stored is not None and report.to_dict() == stored
               and config_hash(config_from_dict(run['config'])) == run['config_hash'])
    return report, matches

