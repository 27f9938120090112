"""Lempel-Ziv entropy-rate estimate of a location sequence."""

from __future__ import annotations

import math
from typing import Hashable, Sequence


def match_lengths(seq: Sequence[Hashable]) -> list[int]:
    """For each position i, the length of the shortest substring starting at i
    that does not occur anywhere inside ``seq[:i]``.

    When every substring starting at i already occurs, the value is
    ``len(seq) - i + 1``.
    """
    s = list(seq)
    n = len(s)
    # substrings of the growing prefix, keyed by length
    seen: set[tuple] = set()
    out = []
    for i in range(n):
        k = 1
        while i + k <= n and tuple(s[i:i + k]) in seen:
            k += 1
        out.append(k)
        # prefix grows by s[i]: add every substring ending at i
        for a in range(i + 1):
            seen.add(tuple(s[a:i + 1]))
    return out


def lz_entropy_rate(seq: Sequence[Hashable]) -> float:
    """Entropy rate in bits per symbol: ``n log2(n) / sum(match_lengths)``."""
    n = len(seq)
    if n < 2:
        raise ValueError("entropy rate needs a sequence of length >= 2")
    return n / sum(match_lengths(seq)) * math.log2(n)
