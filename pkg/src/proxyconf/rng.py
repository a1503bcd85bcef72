"""Counter-based random streams.

Every random draw in the package comes from ``stream(seed, *key)``: a PCG64
generator seeded by ``SeedSequence(seed, spawn_key=key)``.  Keys name the
purpose and the replicate, so a job's draws do not depend on which worker
runs it or in what order.
"""

import numpy as np

SIMEX = 1
BOOT_ANALYSIS = 2
BOOT_VALIDATION = 3
BOOT_BOTH_COHORT = 4
BOOT_BOTH_COUNTS = 5
SIM_VALIDATION = 6


def stream(seed: int, *key: int) -> np.random.Generator:
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in key))
    return np.random.Generator(np.random.PCG64(ss))
