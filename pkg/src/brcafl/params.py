"""Flat parameter vectors with a named block layout."""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Iterable, Sequence

import numpy as np


class DimensionError(ValueError):
    """Raised when arrays, layouts or model specs disagree on shape."""


@dataclass(frozen=True)
class Block:
    name: str
    offset: int
    shape: tuple[int, ...]

    @property
    def length(self) -> int:
        return math.prod(self.shape)


def make_layout(blocks: Iterable[tuple[str, tuple[int, ...]]]) -> tuple[Block, ...]:
    """Lay out named blocks contiguously, in the given order."""
    layout = []
    offset = 0
    for name, shape in blocks:
        block = Block(name, offset, tuple(int(s) for s in shape))
        layout.append(block)
        offset += block.length
    return tuple(layout)


@lru_cache(maxsize=256)
def _layout_size(layout: tuple[Block, ...]) -> int:
    """Validate a layout once and return the number of entries it covers."""
    offset = 0
    names = set()
    for block in layout:
        if block.offset != offset:
            raise DimensionError(f"block {block.name!r} is not contiguous")
        if block.name in names:
            raise DimensionError(f"duplicate block name {block.name!r}")
        names.add(block.name)
        offset += block.length
    return offset


@lru_cache(maxsize=256)
def _index(layout: tuple[Block, ...]) -> dict[str, Block]:
    return {b.name: b for b in layout}


@dataclass(frozen=True, eq=False)
class ParamVector:
    """A float64 vector split into contiguous, named blocks.

    Blocks are views into ``values``; reshaping a block never copies.
    """

    values: np.ndarray
    layout: tuple[Block, ...]

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 1:
            raise DimensionError(f"values must be 1-d, got shape {values.shape}")
        object.__setattr__(self, "values", values)
        size = _layout_size(self.layout)
        if size != values.size:
            raise DimensionError(
                f"layout covers {size} entries but values has {values.size}"
            )

    @classmethod
    def from_array(cls, values: Sequence[float] | np.ndarray, name: str = "values") -> "ParamVector":
        values = np.asarray(values, dtype=np.float64).ravel()
        return cls(values, make_layout([(name, (values.size,))]))

    def __len__(self) -> int:
        return self.values.size

    @property
    def block_names(self) -> tuple[str, ...]:
        return tuple(b.name for b in self.layout)

    def _find(self, name: str) -> Block:
        try:
            return _index(self.layout)[name]
        except KeyError:
            raise KeyError(f"no block named {name!r}; have {self.block_names}") from None

    def block(self, name: str) -> np.ndarray:
        """View of one block, reshaped to its declared shape."""
        b = self._find(name)
        return self.values[b.offset : b.offset + b.length].reshape(b.shape)

    def flat_block(self, name: str) -> np.ndarray:
        b = self._find(name)
        return self.values[b.offset : b.offset + b.length]

    def with_values(self, values: np.ndarray) -> "ParamVector":
        values = np.asarray(values, dtype=np.float64)
        if values.shape != self.values.shape:
            raise DimensionError(
                f"expected {self.values.shape} values, got {values.shape}"
            )
        return ParamVector(values, self.layout)

    def copy(self) -> "ParamVector":
        return ParamVector(self.values.copy(), self.layout)

    def same_layout(self, other: "ParamVector") -> bool:
        return self.layout == other.layout

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.values)))

    def __eq__(self, other) -> bool:
        if not isinstance(other, ParamVector):
            return NotImplemented
        return self.layout == other.layout and np.array_equal(self.values, other.values)

    def __repr__(self) -> str:
        blocks = ", ".join(f"{b.name}:{b.length}" for b in self.layout)
        return f"ParamVector(len={len(self)}, blocks=[{blocks}])"


def stack(vectors: Sequence[ParamVector]) -> np.ndarray:
    """Stack vectors into a (k, d) matrix, checking they share one layout."""
    if not vectors:
        raise ValueError("need at least one vector")
    layout = vectors[0].layout
    for v in vectors[1:]:
        if v.layout != layout:
            raise DimensionError("vectors have different layouts")
    return np.stack([v.values for v in vectors])
