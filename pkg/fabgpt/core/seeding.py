import hashlib
import random

import numpy as np
import torch

from fabgpt.core.config import settings


def derive_seed(global_seed: int, index: int, salt: str = "") -> int:
    """Stable 32-bit child seed for item `index` under `global_seed`."""
    h = hashlib.blake2b(f"{global_seed}:{index}:{salt}".encode(), digest_size=4)
    return int.from_bytes(h.digest(), "little")


def seed_everything(seed: int) -> None:
    random.seed(seed)
    np.random.seed(seed % (2**32))
    torch.manual_seed(seed)
    torch.set_num_threads(max(1, settings.NUM_THREADS))
    torch.use_deterministic_algorithms(True)
