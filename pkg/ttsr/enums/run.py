#!/usr/bin/env python
"""This module defines run-level modes and switches of the ttsr package """
# pylint: disable=missing-class-docstring

from enum import Enum


class Mode(str, Enum):
    TTSR = 'ttsr'
    TTRL = 'ttrl'
    FROZEN = 'frozen'
    NO_TEACHER_UPDATE = 'no_teacher_update'
    NO_SIM_PENALTY = 'no_sim_penalty'
    NO_REFLECTION = 'no_reflection'

    @property
    def updates_student(self):
        return self is not Mode.FROZEN

    @property
    def runs_teacher(self):
        return self not in (Mode.TTRL, Mode.FROZEN)

    @property
    def updates_teacher(self):
        return self.runs_teacher and self is not Mode.NO_TEACHER_UPDATE

    @property
    def reflects(self):
        return self.runs_teacher and self is not Mode.NO_REFLECTION


class Backend(str, Enum):
    TOY = 'toy'
    REMOTE = 'remote'


class Source(str, Enum):
    TEST = 'test'
    VARIANT = 'variant'


class EvalMode(str, Enum):
    GREEDY = 'greedy'
    MEAN_AT_K = 'mean@k'


class SynthesisFormat(str, Enum):
    JSON = 'json'
    TAGGED = 'tagged'
