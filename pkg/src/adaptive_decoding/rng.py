"""Named random substreams derived from one root seed.

Every consumer asks for ``substream(seed, "component", instance_id, ...)``
instead of sharing a generator, so results do not depend on evaluation
order or on how work is split across workers.
"""

import zlib

import numpy as np


def _key(part) -> int:
    if isinstance(part, (bool, np.bool_)):
        return int(part)
    if isinstance(part, (int, np.integer)):
        if part < 0:
            raise ValueError(f"substream keys must be non-negative, got {part}")
        return int(part)
    if isinstance(part, str):
        return zlib.crc32(part.encode("utf-8"))
    raise TypeError(f"unsupported substream key {part!r}")


def substream(seed: int, *keys) -> np.random.Generator:
    """Return an independent generator keyed by ``(seed, *keys)``."""
    entropy = [_key(seed)] + [_key(k) for k in keys]
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))
