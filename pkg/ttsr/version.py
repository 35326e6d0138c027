#!/usr/bin/env python
"""Library version"""

__version_info__ = (0, 4, 0)

__version__ = ".".join([str(x) for x in __version_info__])
