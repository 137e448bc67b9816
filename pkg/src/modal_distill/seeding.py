"""Named random substreams derived from a single root seed.

Every consumer asks for its own stream (``"data"``, ``"init"``, ``"batch"``,
...) so ablations can share one stream while varying another, and the
mapping from seed to draws never depends on call order elsewhere.
"""

from __future__ import annotations

import os
import zlib

import numpy as np
import torch

SEED_ENV = "MODAL_DISTILL_SEED"


def _key(name: str, extra: tuple[int, ...]) -> list[int]:
    return [zlib.crc32(name.encode("utf-8")), *(int(e) for e in extra)]


def substream(seed: int, name: str, *extra: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), *_key(name, extra)]))


def torch_generator(seed: int, name: str, *extra: int) -> torch.Generator:
    state = np.random.SeedSequence([int(seed), *_key(name, extra)]).generate_state(2, np.uint32)
    gen = torch.Generator()
    gen.manual_seed(int(state[0]) << 32 | int(state[1]))
    return gen


def resolve_seed(config_seed: int | None, cli_seed: int | None = None) -> int | None:
    """CLI flag beats the environment, which beats the config file."""
    if cli_seed is not None:
        return int(cli_seed)
    env = os.environ.get(SEED_ENV)
    if env not in (None, ""):
        try:
            return int(env)
        except ValueError:
            raise ValueError(f"{SEED_ENV} must be an integer, got {env!r}") from None
    return config_seed
