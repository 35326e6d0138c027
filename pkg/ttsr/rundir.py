#!/usr/bin/env python
"""This module implements run-directory persistence: append-only artifact files, reloading and replay """
import csv
import json
import logging
import os

from ttsr import IterationSnapshot, Trajectory, Question
from ttsr.tasks import question_id_for
from ttsr.version import __version__


__all__ = [
    'RunDirectory',
    'persist_snapshot',
    'load_run',
    'load_snapshots',
    'load_evaluations',
    'load_report',
    'load_questions',
    'ITERATIONS',
    'TRAJECTORIES',
    'CURRICULUM',
    'METRICS',
    'PROMPTS',
    'EVALUATIONS',
    'RUN',
    'REPORT',
    'POLICY',
]

logger = logging.getLogger(__name__)

RUN = 'run.json'
ITERATIONS = 'iterations.jsonl'
TRAJECTORIES = 'trajectories.jsonl'
CURRICULUM = 'curriculum.jsonl'
METRICS = 'metrics.csv'
PROMPTS = 'prompts.jsonl'
EVALUATIONS = 'evaluations.jsonl'
REPORT = 'report.json'
POLICY = 'policy_final.npz'

_run_files = (RUN, ITERATIONS, TRAJECTORIES, CURRICULUM, METRICS, PROMPTS, EVALUATIONS, REPORT, POLICY)


def _dumps(document):
    return json.dumps(document, ensure_ascii=False, sort_keys=True)


class RunDirectory:
    """
    One directory per run. Every artifact file is append-only while the run lasts

    :param path: directory to create or reuse; it must not already hold a run

    :raises:
        - OSError - if the directory can't be created or already contains run artifacts
    """
    def __init__(self, path):
        self.path = os.path.abspath(path)
        try:
            os.makedirs(self.path, exist_ok=True)
        except OSError as error:
            raise OSError('Cannot create run directory {0}: {1}'.format(self.path, error.strerror)) from error
        existing = [name for name in _run_files if os.path.exists(os.path.join(self.path, name))]
        if existing:
            raise OSError('Run directory {0} already contains a run ({1})'.format(self.path, ', '.join(existing)))
        self._metric_fields = None

    def file(self, name):
        return os.path.join(self.path, name)

    def _append(self, name, lines):
        try:
            with open(self.file(name), 'a', encoding='utf-8') as stream:
                for line in lines:
                    stream.write(line + '\n')
        except OSError as error:
            raise OSError('Cannot write {0}: {1}'.format(self.file(name), error.strerror)) from error

    def _write(self, name, document):
        try:
            with open(self.file(name), 'w', encoding='utf-8') as stream:
                json.dump(document, stream, ensure_ascii=False, sort_keys=True, indent=2)
        except OSError as error:
            raise OSError('Cannot write {0}: {1}'.format(self.file(name), error.strerror)) from error

    def write_run(self, cfg, digest):
        self._write(RUN, {'config': cfg.to_dict(), 'config_hash': digest, 'seed': cfg.seed,
                          'mode': cfg.mode.value, 'version': __version__})

    def write_prompts(self, t, kind, prompts):
        self._append(PROMPTS, [_dumps({'t': t, 'kind': kind, 'prompt': prompt}) for prompt in prompts])

    def write_evaluation(self, label, evaluation, wall_clock=None):
        self._append(EVALUATIONS, [_dumps({'label': label, 'evaluation': evaluation, 'wall_clock': wall_clock})])

    def write_report(self, report):
        self._write(REPORT, report.to_dict())

    def write_metrics(self, t, metrics):
        """One CSV row per iteration; the header is fixed by the first row"""
        if self._metric_fields is None:
            self._metric_fields = ['t'] + sorted(metrics)
            header = True
        else:
            header = False
        row = dict(metrics, t=t)
        try:
            with open(self.file(METRICS), 'a', encoding='utf-8', newline='') as stream:
                writer = csv.DictWriter(stream, fieldnames=self._metric_fields, extrasaction='ignore')
                if header:
                    writer.writeheader()
                writer.writerow({name: repr(row[name]) if isinstance(row.get(name), float) else row.get(name, '')
                                 for name in self._metric_fields})
        except OSError as error:
            raise OSError('Cannot write {0}: {1}'.format(self.file(METRICS), error.strerror)) from error

    def persist_snapshot(self, snapshot):
        """
        Append one snapshot: one line in iterations.jsonl, its trajectories in trajectories.jsonl, its scored
        candidates in curriculum.jsonl and its metrics in metrics.csv
        """
        self._append(ITERATIONS, [_dumps(snapshot.to_dict(with_trajectories=False))])
        self._append(TRAJECTORIES, [
            _dumps({'t': snapshot.t, 'question_id': group.question_id,
                    'trajectories': [traj.to_dict() for traj in group.trajectories]})
            for group in snapshot.groups
        ])
        admitted = {variant.question.id for variant in snapshot.variants}
        self._append(CURRICULUM, [
            _dumps(dict(variant.to_dict(), t=snapshot.t, admitted=variant.question.id in admitted))
            for variant in snapshot.candidates
        ])
        self.write_metrics(snapshot.t, snapshot.metrics)
        logger.debug('Persisted snapshot %d to %s', snapshot.t, self.path)


def persist_snapshot(run_dir, snapshot):
    """Append ``snapshot`` to an open :class:`RunDirectory`"""
    run_dir.persist_snapshot(snapshot)


def _read_jsonl(path):
    documents = []
    if not os.path.exists(path):
        return documents
    with open(path, 'r', encoding='utf-8') as stream:
        for number, line in enumerate(stream, start=1):
            if not line.strip():
                continue
            try:
                documents.append(json.loads(line))
            except ValueError as error:
                raise ValueError('{0}:{1}: malformed record'.format(path, number)) from error
    return documents


def _read_json(path):
    with open(path, 'r', encoding='utf-8') as stream:
        return json.load(stream)


def load_run(path):
    """The run.json document of a run directory"""
    return _read_json(os.path.join(path, RUN))


def load_report(path):
    """The report.json document, or None for an unfinished run"""
    report = os.path.join(path, REPORT)
    return _read_json(report) if os.path.exists(report) else None


def load_evaluations(path):
    """Evaluation records (``evaluation`` and ``wall_clock``) keyed by label"""
    return {record.pop('label'): record for record in _read_jsonl(os.path.join(path, EVALUATIONS))}


def load_snapshots(path):
    """
    Rebuild every persisted :class:`ttsr.IterationSnapshot`, joining trajectories back into their groups
    """
    trajectories = {}
    for record in _read_jsonl(os.path.join(path, TRAJECTORIES)):
        trajectories.setdefault(record['t'], {})[record['question_id']] = [
            Trajectory.from_dict(t) for t in record['trajectories']]
    return [IterationSnapshot.from_dict(record, trajectories=trajectories.get(record['t'], {}))
            for record in _read_jsonl(os.path.join(path, ITERATIONS))]


def load_questions(path):
    """
    Read test questions from JSON lines with ``body`` and optional ``id`` / ``ground_truth`` fields
    """
    questions = []
    for record in _read_jsonl(path):
        if 'body' not in record or not str(record['body']).strip():
            raise ValueError('{0}: every question needs a non-empty body'.format(path))
        body = str(record['body'])
        ground_truth = record.get('ground_truth')
        questions.append(Question(id=str(record.get('id') or question_id_for(body)), body=body,
                                  ground_truth=None if ground_truth is None else str(ground_truth)))
    if not questions:
        raise ValueError('{0} holds no questions'.format(path))
    return questions
