"""Splittable random streams.

A single integer seed feeds every module; each consumer derives its own
named substream so that adding draws in one place never shifts another.
"""

import zlib

import numpy as np


def _key(name):
    return zlib.crc32(name.encode("utf-8"))


def substream(seed, *names):
    """Return a Generator deterministically derived from ``seed`` and ``names``.

    ``names`` may mix strings and integers, e.g. ``substream(7, "hpo", 12)``.
    """
    keys = [_key(n) if isinstance(n, str) else int(n) for n in names]
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=keys))
