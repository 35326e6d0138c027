#!/usr/bin/env python
"""This module works as a gateway between the library and OpenAI-compatible chat-completions endpoints """
import logging
import time

import requests

from ttsr import EndpointError, EndpointTimeout


__all__ = [
    'get_handler',
    'chat_completions',
    'completions_url',
]

logger = logging.getLogger(__name__)


def completions_url(endpoint):
    return '{0}/v1/chat/completions'.format(endpoint.url.rstrip('/'))


def get_handler(endpoint, session=None):
    """
    A function which returns an HTTP session prepared for the given endpoint

    :param endpoint: an :class:`ttsr.config.EndpointConfig`

    :param session: an existing ``requests.Session``-like object to reuse (tests pass a recorded stub here)
    """
    if session is None:
        session = requests.Session()
    session.headers.update({'Content-Type': 'application/json'})
    api_key = endpoint.api_key()
    if api_key:
        session.headers.update({'Authorization': 'Bearer {0}'.format(api_key)})
    return session


def _parse_choices(response, question_id):
    try:
        body = response.json()
    except ValueError as error:
        raise EndpointError('Malformed response body: not JSON', question_id=question_id,
                            status=response.status_code) from error
    choices = body.get('choices') if isinstance(body, dict) else None
    if not isinstance(choices, list) or not choices:
        raise EndpointError('Malformed response body: no choices', question_id=question_id,
                            status=response.status_code)
    contents = []
    for choice in choices:
        message = choice.get('message') if isinstance(choice, dict) else None
        content = message.get('content') if isinstance(message, dict) else None
        if content is not None and not isinstance(content, str):
            raise EndpointError('Malformed response body: content is not text', question_id=question_id,
                                status=response.status_code)
        contents.append(content or '')
    return contents


def chat_completions(api, endpoint, messages, n=1, temperature=None, max_tokens=None, question_id=None,
                     sleep=time.sleep):
    """
    A function which posts one chat-completions request and returns the choices' message contents

    :param api: session handler from :func:`get_handler`

    :param endpoint: an :class:`ttsr.config.EndpointConfig`

    :param messages: a list of ``{'role': ..., 'content': ...}`` dicts

    :param question_id: id attached to raised errors

    :param sleep: used for the exponential backoff between attempts

    :raises
        - EndpointTimeout - every attempt timed out
        - EndpointError - transport failure after all retries, a non-2xx status or a malformed body
    """
    # pylint: disable=too-many-arguments
    payload = {
        'model': endpoint.model,
        'messages': messages,
        'n': n,
        'temperature': endpoint.temperature if temperature is None else temperature,
    }
    if max_tokens is not None:
        payload['max_tokens'] = max_tokens
    url = completions_url(endpoint)
    attempts = endpoint.max_retries + 1
    failure = None
    for attempt in range(attempts):
        if attempt:
            delay = endpoint.backoff * 2 ** (attempt - 1)
            logger.info('Retry %d/%d for %s after %s; sleeping %.2fs', attempt, endpoint.max_retries,
                        question_id or url, failure, delay)
            sleep(delay)
        try:
            response = api.post(url, json=payload, timeout=endpoint.timeout)
        except requests.Timeout as error:
            failure = EndpointTimeout('Request timed out after {0}s'.format(endpoint.timeout),
                                      question_id=question_id)
            failure.__cause__ = error
            continue
        except requests.RequestException as error:
            failure = EndpointError('Transport failure: {0}'.format(error), question_id=question_id)
            failure.__cause__ = error
            continue
        if response.status_code >= 500:
            failure = EndpointError('Endpoint returned {0}'.format(response.status_code), question_id=question_id,
                                    status=response.status_code)
            continue
        if not 200 <= response.status_code < 300:
            raise EndpointError('Endpoint returned {0}'.format(response.status_code), question_id=question_id,
                                status=response.status_code)
        if attempt:
            logger.info('Request for %s succeeded after %d retries', question_id or url, attempt)
        return _parse_choices(response, question_id)
    raise failure
