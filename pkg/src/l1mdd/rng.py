"""Deterministic, name-splittable random streams.

Every source of randomness in the package flows from a single integer seed.
Independent streams are derived by name (e.g. ``"init/enc.conv0.w"``,
``"batches/epoch3"``) so adding a consumer never perturbs the others. Name
hashing uses SHA-256, not the builtin ``hash``, so streams are stable across
processes and machines.
"""

import hashlib
import math

import numpy as np

_U64 = (1 << 64) - 1


def _name_key(name: str) -> int:
    return int.from_bytes(hashlib.sha256(name.encode("utf-8")).digest()[:16], "big")


def stream(seed: int, name: str) -> np.random.Generator:
    """Return the generator for `name` under `seed`."""
    ss = np.random.SeedSequence([seed & _U64, _name_key(name)])
    return np.random.Generator(np.random.PCG64(ss))


def init_uniform(gen: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    """Default parameter initializer: uniform(-1/sqrt(fan_in), +1/sqrt(fan_in))."""
    bound = 1.0 / math.sqrt(fan_in)
    return gen.uniform(-bound, bound, size=shape)
