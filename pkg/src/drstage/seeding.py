"""Named random substreams derived from one master seed."""
import zlib

import numpy as np

STREAMS = ("split", "init", "shuffle", "augment", "bootstrap")


def substream_seed(master_seed: int, name: str) -> int:
    """Deterministic 32-bit seed for the stream ``name``.

    Streams are independent of each other, so re-seeding one component
    does not perturb the rest.
    """
    ss = np.random.SeedSequence([int(master_seed) & 0xFFFFFFFF, zlib.crc32(name.encode())])
    return int(ss.generate_state(1, dtype=np.uint32)[0])


def derive(seed: int, *keys) -> int:
    """Mix ``seed`` with string or integer keys into a new 32-bit seed."""
    words = [int(seed) & 0xFFFFFFFF]
    for key in keys:
        if isinstance(key, str):
            words.append(zlib.crc32(key.encode()))
        else:
            words.append(int(key) & 0xFFFFFFFF)
    return int(np.random.SeedSequence(words).generate_state(1, dtype=np.uint32)[0])
