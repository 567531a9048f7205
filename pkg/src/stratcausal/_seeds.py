import numpy as np


def derive_seed(seed: int, *tags) -> int:
    """Deterministic 63-bit child seed for a named sub-task."""
    words = [int(seed) & 0xFFFFFFFF, (int(seed) >> 32) & 0xFFFFFFFF]
    for tag in tags:
        if isinstance(tag, str):
            words.extend(tag.encode("utf-8"))
        else:
            words.append(int(tag) & 0xFFFFFFFF)
    state = np.random.SeedSequence(words).generate_state(2, dtype=np.uint32)
    return int((int(state[0]) << 31) ^ int(state[1]))
