"""Invocation counters used to check that inference never touches training-only paths."""

from collections import Counter

# keys: "contrast", "pool_contrast", "ema_forward"
COUNTERS: Counter = Counter()


def reset() -> None:
    COUNTERS.clear()
