#!/usr/bin/env python
"""This script implements the Command Line Interface of the ttsr module """

import csv
import functools
import logging
import os
import sys

import click

from ttsr import ConfigError, EndpointError, IterationAborted
from ttsr import version as ttsr_version
from ttsr.config import load_config, config_from_dict, config_hash
from ttsr.enums import Backend, EvalMode, Mode
from ttsr.orchestrator import Runner, evaluate, replay, summarize, toy_datasets
from ttsr.policies import ToyPolicy, RemotePolicy
from ttsr.rundir import POLICY, load_run, load_snapshots, load_questions


EXIT_CONFIG = 1
EXIT_RUNTIME = 2
EXIT_ENDPOINT = 3

LOG_FORMAT = '%(asctime)s [%(levelname)8s] %(message)s (%(filename)s:%(lineno)s)'
LOG_DATE_FORMAT = '%Y-%m-%d %H:%M:%S'

_runtime_errors = (IterationAborted, ValueError, TypeError, KeyError, OSError, ArithmeticError, RuntimeError)


def exit_code_for(error):
    """
    Map an exception to the process exit code

    :returns:
        1 for configuration errors, 3 for endpoint failures (also when they aborted an iteration), 2 otherwise
    """
    if isinstance(error, ConfigError):
        return EXIT_CONFIG
    if isinstance(error, EndpointError) or isinstance(error.__cause__, EndpointError):
        return EXIT_ENDPOINT
    return EXIT_RUNTIME


def handle_errors(command):
    """Report library errors on stderr and exit with the matching code"""
    @functools.wraps(command)
    def wrapper(*args, **kwargs):
        try:
            return command(*args, **kwargs)
        except ConfigError as error:
            click.secho('Configuration error:', fg='red', err=True)
            for name, message in error.problems:
                click.secho('  {0}: {1}'.format(name, message), fg='red', err=True)
            sys.exit(EXIT_CONFIG)
        except _runtime_errors as error:
            click.secho('[{0}]: {1}'.format(type(error).__name__, error), fg='red', err=True)
            sys.exit(exit_code_for(error))
    return wrapper


def _config_of_run(run_dir):
    try:
        run = load_run(run_dir)
    except OSError as error:
        raise ConfigError([('run-dir', '{0} holds no run.json'.format(run_dir))]) from error
    return config_from_dict(run['config'])


def _format_evaluation(evaluation):
    if evaluation is None:
        return 'n/a'
    return 'greedy {0:.4f}, mean@{1} {2:.4f}'.format(evaluation['greedy'], evaluation['k'], evaluation['mean@k'])


# pylint: disable=missing-function-docstring
@click.group()
@click.version_option(ttsr_version.__version__)
@click.option('--verbose', '-v', is_flag=True, default=False, help='Log per-group details.')
def main(verbose):
    logging.basicConfig(level=logging.DEBUG if verbose else logging.INFO, format=LOG_FORMAT,
                        datefmt=LOG_DATE_FORMAT)


# ttsr run --config run.yaml
# ttsr run --config run.yaml --mode ttrl --seed 3 --out runs/ttrl-3
@main.command('run', help='Run test-time self-evolution as described by a config file')
@click.option('--config', 'config_path', type=click.Path(dir_okay=False), required=True,
              help='YAML (or JSON) run configuration.')
@click.option('--mode', type=click.Choice([m.value for m in Mode]), default=None,
              help='Override the mode of the config file.')
@click.option('--seed', type=int, default=None, help='Override the seed of the config file.')
@click.option('--iterations', '-T', 'iterations', type=int, default=None,
              help='Override the number of test-time iterations.')
@click.option('--out', type=click.Path(file_okay=False), default=None,
              help='Run directory; defaults to runs/<mode>-seed<seed>-<config hash>.')
@handle_errors
def run_parser(config_path, mode, seed, iterations, out):
    cfg = load_config(config_path, mode=mode, seed=seed, T=iterations)
    if out is None:
        out = os.path.join('runs', '{0}-seed{1}-{2}'.format(cfg.mode.value, cfg.seed, config_hash(cfg)[:12]))
    report = Runner(cfg, run_dir=out).run()
    click.echo('Run directory: {0}'.format(os.path.abspath(out)))
    click.echo('Iterations:    {0}'.format(len(report.iterations)))
    click.echo('Initial:       {0}'.format(_format_evaluation(report.initial_evaluation)))
    click.echo('Final:         {0}'.format(_format_evaluation(report.final_evaluation)))
    click.echo('Wall clock:    {0:.2f}s'.format(report.wall_clock))


# ttsr eval --run-dir runs/ttsr-seed0 --mode mean@k --k 32
@main.command('eval', help='Evaluate the final policy of a run on its held-out questions')
@click.option('--run-dir', type=click.Path(exists=True, file_okay=False), required=True)
@click.option('--mode', 'eval_mode', type=click.Choice([m.value for m in EvalMode]), default=EvalMode.GREEDY.value,
              show_default=True)
@click.option('--k', type=int, default=None, help='Samples per question for mean@k; defaults to eval_k.')
@handle_errors
def eval_parser(run_dir, eval_mode, k):
    cfg = _config_of_run(run_dir)
    if cfg.backend is Backend.TOY:
        policy = ToyPolicy(cfg.toy, seed=cfg.seed)
        policy.load(os.path.join(run_dir, POLICY))
        eval_set = toy_datasets(cfg)[1]
    else:
        policy = RemotePolicy(cfg.endpoint, max_len=cfg.max_len)
        eval_set = [q for q in load_questions(cfg.questions_path) if q.ground_truth is not None]
    accuracy = evaluate(policy, eval_set, eval_mode, k=cfg.eval_k if k is None else k, seed=cfg.seed,
                        workers=cfg.workers)
    click.echo('{0} accuracy: {1:.4f} ({2} questions)'.format(eval_mode, accuracy, len(eval_set)))


# ttsr replay --run-dir runs/ttsr-seed0
@main.command('replay', help='Rebuild the report of a run from its artifacts and compare it with the stored one')
@click.option('--run-dir', type=click.Path(exists=True, file_okay=False), required=True)
@handle_errors
def replay_parser(run_dir):
    report, matches = replay(run_dir)
    click.echo('Iterations: {0}'.format(len(report.iterations)))
    click.echo('Initial:    {0}'.format(_format_evaluation(report.initial_evaluation)))
    click.echo('Final:      {0}'.format(_format_evaluation(report.final_evaluation)))
    if report.error is not None:
        click.secho('Aborted:    {0}'.format(report.error), fg='yellow')
    if not matches:
        click.secho('Replayed report differs from report.json', fg='red', err=True)
        sys.exit(EXIT_RUNTIME)
    click.secho('Replayed report matches report.json', fg='green')


# ttsr inspect --run-dir runs/ttsr-seed0 --iteration 3
@main.command('inspect', help='Print the summary of one iteration snapshot')
@click.option('--run-dir', type=click.Path(exists=True, file_okay=False), required=True)
@click.option('--iteration', '-t', type=int, required=True)
@handle_errors
def inspect_parser(run_dir, iteration):
    snapshots = {snapshot.t: snapshot for snapshot in load_snapshots(run_dir)}
    if iteration not in snapshots:
        raise click.BadParameter('no snapshot for iteration {0}; available: {1}'.format(
            iteration, ', '.join(str(t) for t in sorted(snapshots)) or 'none'), param_hint='--iteration')
    snapshot = snapshots[iteration]
    click.echo('Iteration {0}'.format(snapshot.t))
    click.echo('  |D_t|: {0}'.format(len(snapshot.training_set)))
    click.echo('  groups: {0}'.format(len(snapshot.groups)))
    for group in snapshot.groups:
        click.echo('    {0}  target={1!r} s={2:.3f}{3}'.format(group.question_id, group.pseudo_target, group.score_s,
                                                             ' (tie)' if group.tie_flag else ''))
    for reflection in snapshot.reflections:
        click.echo('  weakness: {0}'.format(reflection.reasoning_weakness))
    click.echo('  candidates: {0}, admitted: {1}'.format(len(snapshot.candidates), len(snapshot.variants)))
    for variant in snapshot.variants:
        click.echo('    {0} <- {1}  R_T={2:.4f} s={3:.3f} R_sim={4:.4f}'.format(
            variant.question.id, variant.question.origin_id, variant.r_teacher, variant.s_score, variant.r_sim))
    for name in sorted(snapshot.metrics):
        click.echo('  {0}: {1}'.format(name, snapshot.metrics[name]))
    if snapshot.error is not None:
        click.secho('  error: {0}'.format(snapshot.error), fg='red')


def _sweep_row(mode, seed, report):
    row = {'mode': mode, 'seed': seed}
    row.update(summarize(report))
    return row


# ttsr sweep --config run.yaml --modes ttsr,ttrl,frozen --seeds 5 --out runs/sweep
@main.command('sweep', help='Run several modes over several seeds and compare them')
@click.option('--config', 'config_path', type=click.Path(dir_okay=False), required=True)
@click.option('--modes', default='ttsr,ttrl,frozen', show_default=True,
              help='Comma separated list of modes.')
@click.option('--seeds', type=int, default=5, show_default=True, help='Seeds config.seed .. config.seed + N - 1.')
@click.option('--out', type=click.Path(file_okay=False), required=True)
@handle_errors
def sweep_parser(config_path, modes, seeds, out):
    if seeds < 1:
        raise click.BadParameter('at least one seed is required', param_hint='--seeds')
    names = [name.strip() for name in modes.split(',') if name.strip()]
    for name in names:
        if name not in [m.value for m in Mode]:
            raise click.BadParameter('unknown mode {0!r}'.format(name), param_hint='--modes')
    base = load_config(config_path)
    rows = []
    for name in names:
        for offset in range(seeds):
            seed = base.seed + offset
            cfg = load_config(config_path, mode=name, seed=seed)
            report = Runner(cfg, run_dir=os.path.join(out, name, 'seed-{0}'.format(seed))).run()
            rows.append(_sweep_row(name, seed, report))
    os.makedirs(out, exist_ok=True)
    fields = list(rows[0]) if rows else ['mode', 'seed']
    with open(os.path.join(out, 'sweep.csv'), 'w', encoding='utf-8', newline='') as stream:
        writer = csv.DictWriter(stream, fieldnames=fields)
        writer.writeheader()
        writer.writerows(rows)
    click.echo('{0:<18} {1:>5} {2:>12} {3:>12} {4:>10} {5:>10}'.format('mode', 'seed', 'greedy', 'mean@k', 'R_T',
                                                                     'sim'))
    for row in rows:
        click.echo('{mode:<18} {seed:>5} {final_greedy:>12.4f} {final_mean_at_k:>12.4f} {mean_r_teacher:>10.4f} '
                   '{mean_variant_similarity:>10.4f}'.format(**row))
