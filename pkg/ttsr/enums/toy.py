#!/usr/bin/env python
"""This module defines the operators of the toy modular-arithmetic task family """

from enum import Enum


class Operator(str, Enum):
    """Operators of a toy op_chain, valued by their canonical symbol"""
    ADD = '+'
    SUB = '-'
    MUL = '*'

    def apply(self, acc, operand, modulus):
        """Apply this operator to an accumulator and reduce modulo ``modulus``"""
        if self is Operator.ADD:
            return (acc + operand) % modulus
        if self is Operator.SUB:
            return (acc - operand) % modulus
        return (acc * operand) % modulus

    @classmethod
    def _missing_(cls, value):
        return _aliases.get(value)


_verbs = {
    Operator.ADD: 'add',
    Operator.SUB: 'subtract',
    Operator.MUL: 'multiply by',
}

_verbs_swaped = {y: x for x, y in _verbs.items()}

# typographic symbols accepted on input
_aliases = {
    '−': Operator.SUB,
    '×': Operator.MUL,
    'x': Operator.MUL,
}
