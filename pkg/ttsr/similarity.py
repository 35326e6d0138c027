#!/usr/bin/env python
"""This module implements matching-block sequence similarity over word tokens """
import string
from difflib import SequenceMatcher
from typing import NamedTuple


__all__ = [
    'MatchBlock',
    'tokenize_question',
    'matching_blocks',
    'similarity_ratio',
    'text_similarity',
]


class MatchBlock(NamedTuple):
    """``s1[i:i + n] == s2[j:j + n]``"""
    i: int
    j: int
    n: int


def tokenize_question(text):
    """Lower-case word tokens with surrounding punctuation stripped; empty tokens are dropped"""
    if not text:
        return ()
    tokens = (word.strip(string.punctuation) for word in text.lower().split())
    return tuple(token for token in tokens if token)


def matching_blocks(s1, s2):
    """
    Non-overlapping matching blocks: the longest common block first (smallest ``i``, then ``j``, on ties), then the
    same search on the left flanks and on the right flanks. Junk heuristics are off, so every token counts

    :returns:
        a list of :class:`MatchBlock`, sorted by ``i``
    """
    matcher = SequenceMatcher(None, tuple(s1), tuple(s2), autojunk=False)
    return [MatchBlock(block.a, block.b, block.size) for block in matcher.get_matching_blocks() if block.size]


def similarity_ratio(s1, s2):
    """
    2 M / T where M is the number of matched tokens and T = |s1| + |s2|. Two empty sequences have similarity 1.0
    """
    total = len(s1) + len(s2)
    if total == 0:
        return 1.0
    matched = sum(block.n for block in matching_blocks(s1, s2))
    return 2.0 * matched / total


def text_similarity(text1, text2):
    """:func:`similarity_ratio` over the word tokens of two question bodies"""
    return similarity_ratio(tokenize_question(text1), tokenize_question(text2))
