"""Counter-based, keyed random streams.

Every random draw in the package comes from an :class:`RngState`, which is an
immutable ``(seed, key path)`` pair.  A stream is materialised as a numpy
``Generator`` over the Philox counter-based bit generator, keyed through
``SeedSequence`` so that the same state gives the same numbers on every
platform.  Child streams are derived by appending tags to the key path, so
adding a new consumer never shifts the numbers seen by existing ones.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass

import numpy as np

MASK64 = (1 << 64) - 1


def _tag_to_int(tag: int | str) -> int:
    if isinstance(tag, (bool, np.bool_)):
        raise TypeError("boolean tags are ambiguous")
    if isinstance(tag, (int, np.integer)):
        if tag < 0:
            raise ValueError(f"negative stream tag {tag}")
        return int(tag) & MASK64
    if isinstance(tag, str):
        # offset keeps string tags disjoint from small integer tags
        return (1 << 40) + zlib.crc32(tag.encode("utf-8"))
    raise TypeError(f"unsupported stream tag {tag!r}")


@dataclass(frozen=True)
class RngState:
    seed: int
    path: tuple[int, ...] = ()

    def __post_init__(self):
        if not 0 <= int(self.seed) <= MASK64:
            raise ValueError("seed must fit in 64 unsigned bits")

    def child(self, *tags: int | str) -> "RngState":
        return RngState(self.seed, self.path + tuple(_tag_to_int(t) for t in tags))

    def generator(self) -> np.random.Generator:
        ss = np.random.SeedSequence(entropy=int(self.seed), spawn_key=self.path)
        return np.random.Generator(np.random.Philox(ss))

    # convenience draws; each call restarts the stream, so repeated calls on
    # the same state give identical results
    def uniform(self, shape) -> np.ndarray:
        return self.generator().random(shape)

    def normal(self, shape, std: float = 1.0) -> np.ndarray:
        return self.generator().normal(0.0, std, shape)

    def integers(self, low: int, high: int, size=None):
        return self.generator().integers(low, high, size=size)


def as_rng(rng: RngState | int | None, default: int = 0) -> RngState:
    if rng is None:
        return RngState(default)
    if isinstance(rng, RngState):
        return rng
    return RngState(int(rng))
