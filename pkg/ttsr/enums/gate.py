#!/usr/bin/env python
"""This module defines the rejection reasons of the question format gate """

from enum import Enum


class RejectReason(str, Enum):
    """Why a Teacher output was discarded before reward computation"""
    MISSING_OPEN_TAG = 'missing open tag'
    MISSING_CLOSE_TAG = 'missing close tag'
    EMPTY_BODY = 'empty body'
    NESTED_TAGS = 'nested tags'
