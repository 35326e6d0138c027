#!/usr/bin/env python
"""This module defines the enumerations shared across the ttsr package """

from ttsr.enums.run import Mode, Backend, Source, EvalMode, SynthesisFormat
from ttsr.enums.gate import RejectReason
from ttsr.enums.toy import Operator


__all__ = [
    'run',
    'gate',
    'toy',
    'Mode',
    'Backend',
    'Source',
    'EvalMode',
    'SynthesisFormat',
    'RejectReason',
    'Operator',
]
