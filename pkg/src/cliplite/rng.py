"""Named, counter-based random substreams derived from one root seed.

Each consumer asks for ``substream(root_seed, "data/shapes")`` and gets a
Philox generator keyed by SHA-256 of (root seed, name). New consumers never
shift the draws of existing ones.
"""

from __future__ import annotations

import hashlib

import numpy as np


def substream_key(root_seed: int, name: str) -> int:
    digest = hashlib.sha256(f"{int(root_seed)}/{name}".encode()).digest()
    return int.from_bytes(digest[:16], "little")


def substream(root_seed: int, name: str) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=substream_key(root_seed, name)))


def describe(root_seed: int, names) -> list[str]:
    """Human-readable derivation lines, printed at the start of every run."""
    lines = [f"root seed: {int(root_seed)}"]
    for name in names:
        lines.append(f"  substream {name!r}: philox key = sha256('{int(root_seed)}/{name}')[:16] = {substream_key(root_seed, name):#034x}")
    return lines
