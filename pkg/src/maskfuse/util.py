"""Shared plumbing: seeded RNG substreams, thread limits, numeric constants."""

import hashlib
import os

import numpy as np

# Sentinel standing in for -inf on logits; large enough that exp() underflows
# to exactly 0.0 in float32 and float64 softmaxes.
NEG_INF = -1.0e9

THREADS_ENV = "MASKFUSE_THREADS"


def _entropy_word(part) -> int:
    if isinstance(part, (int, np.integer)):
        return int(part) & 0xFFFFFFFFFFFFFFFF
    digest = hashlib.sha256(str(part).encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def substream(seed: int, *path) -> np.random.Generator:
    """Named counter-based RNG stream derived from one root seed.

    Streams for distinct (seed, path) are independent; the same path always
    yields the same stream, so every consumer of randomness is reproducible
    from the run seed alone.
    """
    entropy = [_entropy_word(seed)] + [_entropy_word(p) for p in path]
    return np.random.Generator(np.random.Philox(seed=np.random.SeedSequence(entropy)))


def thread_limit(default: int = 1) -> int:
    """Worker/thread bound from the MASKFUSE_THREADS env var."""
    raw = os.environ.get(THREADS_ENV, "")
    try:
        n = int(raw)
    except ValueError:
        return default
    return max(1, n)


def configure_torch_threads() -> int:
    import torch

    n = thread_limit()
    torch.set_num_threads(n)
    return n
