"""Named random streams.

Every consumer of randomness asks for a stream by purpose, so turning on a
feature that draws numbers (augmentation, say) never shifts the numbers
another feature sees. Streams are Philox generators (counter-based) keyed by
the run seed, the purpose and any extra integers such as the epoch.
"""

import numpy as np

STREAMS = {
    "init": 0,
    "reinit": 1,
    "shuffle": 2,
    "augment": 3,
    "data": 4,
    "split": 5,
    "null": 6,
    "cell": 7,
}

# XORed into the primary seed to draw the reinitialization θ₀′
REINIT_SEED_XOR = 0x5EED_0F_A11CE

_U64 = (1 << 64) - 1


def stream(seed: int, purpose: str, *extra: int) -> np.random.Generator:
    """Return the generator for `purpose` under `seed`.

    Args:
        seed (int): Run seed; reduced to 64 bits.
        purpose (str): One of `STREAMS`.
        *extra (int): Additional non-negative keys (epoch, round, ...).
    """
    if purpose not in STREAMS:
        raise KeyError(f"Unknown random stream: {purpose}.")
    seq = np.random.SeedSequence(
        entropy=int(seed) & _U64,
        spawn_key=(STREAMS[purpose], *[int(x) for x in extra]),
    )
    return np.random.Generator(np.random.Philox(seq))


def reinit_seed(seed: int) -> int:
    return (int(seed) ^ REINIT_SEED_XOR) & _U64


def derive_seed(seed: int, *keys: int) -> int:
    """Derive an independent 64-bit seed from `seed` and integer keys."""
    seq = np.random.SeedSequence(entropy=int(seed) & _U64, spawn_key=(STREAMS["cell"], *[int(k) for k in keys]))
    return int(seq.generate_state(1, dtype=np.uint64)[0])
