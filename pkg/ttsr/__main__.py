#!/usr/bin/env python
"""This module redirects a main call """

from ttsr import clidriver


if __name__ == '__main__':
    clidriver.main()
