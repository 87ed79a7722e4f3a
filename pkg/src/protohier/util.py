"""Shared helpers: seeded RNG streams, atomic file writes, normalization."""

import os
import tempfile

import numpy as np

# Fixed tags so independent randomness consumers never share a stream.
STREAM_INIT = 11
STREAM_SHUFFLE = 12
STREAM_NEGATIVES = 13
STREAM_VIEWS = 14
STREAM_REFRESH = 15
STREAM_LEVEL = 16
STREAM_RESTART = 17


def rng_stream(seed, *tags):
    """Generator for (seed, *tags), independent of every other tag tuple.

    Built on a seed sequence so derived streams are stable across platforms
    and insensitive to creation order.
    """
    entropy = [int(seed)] + [int(t) for t in tags]
    return np.random.default_rng(np.random.SeedSequence(entropy))


def l2_normalize(x, axis=-1):
    """Scale vectors along ``axis`` to unit L2 norm. Zero vectors pass through."""
    x = np.asarray(x)
    norms = np.sqrt((x.astype(np.float64) ** 2).sum(axis=axis, keepdims=True))
    norms[norms == 0.0] = 1.0
    return (x / norms).astype(x.dtype)


def atomic_write_bytes(path, data):
    """Write bytes to a temp file in the target directory, then rename over."""
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(prefix=".tmp-", dir=directory)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except OSError:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text):
    atomic_write_bytes(path, text.encode("utf-8"))
