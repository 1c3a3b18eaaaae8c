"""Named random substreams derived from a single master seed.

Every source of randomness in the package (data generation, parameter
init, feature-map sampling) pulls from its own named substream so that
components can be varied independently without perturbing each other.
"""

import zlib

import numpy as np


def derive_seed(master_seed: int, label: str) -> int:
    """Return a stable 64-bit seed for the substream named ``label``."""
    tag = zlib.crc32(label.encode("utf-8"))
    ss = np.random.SeedSequence(entropy=int(master_seed), spawn_key=(tag,))
    return int(ss.generate_state(1, np.uint64)[0])


def substream(master_seed: int, label: str) -> np.random.Generator:
    """Generator for the substream named ``label`` of ``master_seed``."""
    return np.random.Generator(np.random.PCG64(derive_seed(master_seed, label)))
