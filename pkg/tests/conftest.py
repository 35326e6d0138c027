import json
import os

import pytest
import requests

from ttsr.config import config_from_dict


DATA_DIR = os.path.join(os.path.dirname(os.path.abspath(__file__)), 'data')


def data_path(name):
    return os.path.join(DATA_DIR, name)


def read_data(name):
    with open(data_path(name), 'r', encoding='utf-8') as f:
        return f.read()


class StubResponse:
    """Recorded endpoint response; ``body=None`` stands for a non-JSON payload"""

    def __init__(self, status_code=200, body=None):
        self.status_code = status_code
        self._body = body

    def json(self):
        if self._body is None:
            raise ValueError('Expecting value: line 1 column 1 (char 0)')
        return self._body


class StubSession:
    """
    Replays recorded responses in order and records every request. An exception instance in the queue is raised
    instead of being returned
    """

    def __init__(self, responses=()):
        self.responses = list(responses)
        self.posts = []
        self.headers = {}

    def post(self, url, json=None, timeout=None):
        # pylint: disable=redefined-outer-name
        self.posts.append({'url': url, 'json': json, 'timeout': timeout})
        if not self.responses:
            raise AssertionError('unexpected request to {0}'.format(url))
        response = self.responses.pop(0)
        if isinstance(response, Exception):
            raise response
        return response


def completion(*contents, status_code=200):
    return StubResponse(status_code, {'choices': [{'index': i, 'message': {'role': 'assistant', 'content': c}}
                                                  for i, c in enumerate(contents)]})


def timeout():
    return requests.Timeout('read timed out')


@pytest.fixture
def recorded_completion():
    return StubResponse(200, json.loads(read_data('chat_completion.json')))


@pytest.fixture
def sleeps():
    """A fake ``sleep`` which records the requested delays"""
    delays = []

    def sleep(delay):
        delays.append(delay)

    sleep.delays = delays
    return sleep


@pytest.fixture
def small_toy_cfg():
    return config_from_dict({
        'G': 4,
        'M': 3,
        'T': 2,
        'batch_size': 6,
        'eval_k': 4,
        'toy': {'modulus': 11, 'difficulties': [1, 2, 3], 'n_features': 16, 'test_size': 8, 'eval_size': 8},
    })
