"""Hashed probability pyramid.

A multiscale piecewise-constant density over [0, 1)^D stored as logits. Level 0
is a single softmax over N0^D bins; every finer level holds 2^D-entry blocks
that split one parent bin, each block normalised on its own. Fine levels share
blocks through a spatial hash once the parent grid outgrows the block budget.

Storage is uniform across levels: ``logits[level]`` has shape
``(block_count(level), entries(level))`` where level 0 is one block of N0^D
entries. Entries inside a block, and bins inside a grid, are linearised in
C order (first axis most significant).
"""
from __future__ import annotations

import logging
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

logger = logging.getLogger(__name__)

HASH_PRIMES = (1, 2654435761, 805459861)
SNAPSHOT_MAGIC = b"HPPY"
SNAPSHOT_VERSION = 1
_HEADER = struct.Struct("<BBIIQ")
_INDEX_LIMIT = 2 ** 62
_UINT32 = np.uint64(0xFFFFFFFF)
# Smallest block mass kept when converting masses to logits; zero-mass bins are raised to it.
MASS_FLOOR = 1e-300


class PyramidError(ValueError):
    """Rejected pyramid input."""


class DomainError(PyramidError):
    """A point or bin index outside the pyramid's domain."""


@dataclass(frozen=True)
class PyramidConfig:
    dims: int = 3
    levels: int = 6
    base_resolution: int = 2
    budget: Optional[int] = 4096  # max distinct child blocks per level; None = unlimited

    def __post_init__(self):
        if self.dims not in (1, 2, 3):
            raise PyramidError(f"dims must be 1, 2 or 3, not {self.dims}")
        if self.levels < 1:
            raise PyramidError(f"levels must be >= 1, not {self.levels}")
        if self.base_resolution < 2:
            raise PyramidError(f"base_resolution must be >= 2, not {self.base_resolution}")
        if self.budget is not None and self.budget < 1:
            raise PyramidError(f"budget must be >= 1, not {self.budget}")
        if self.finest_resolution ** self.dims >= _INDEX_LIMIT:
            raise PyramidError("finest grid does not fit the 64-bit bin index")

    def resolution(self, level: int) -> int:
        return self.base_resolution * 2 ** level

    @property
    def finest_resolution(self) -> int:
        return self.resolution(self.levels - 1)

    @property
    def finest_bin_count(self) -> int:
        return self.finest_resolution ** self.dims

    def radix(self, level: int) -> int:
        """Bins per axis inside one block of ``level``."""
        return self.base_resolution if level == 0 else 2

    def entries(self, level: int) -> int:
        return self.radix(level) ** self.dims

    def is_dense(self, level: int) -> bool:
        if level == 0:
            return True
        parents = self.resolution(level - 1) ** self.dims
        return self.budget is None or parents <= self.budget

    def block_count(self, level: int) -> int:
        if level == 0:
            return 1
        parents = self.resolution(level - 1) ** self.dims
        return parents if self.is_dense(level) else self.budget

    def to_dict(self) -> dict:
        return {
            "dims": self.dims,
            "levels": self.levels,
            "base_resolution": self.base_resolution,
            "budget": self.budget,
        }


@dataclass(frozen=True)
class BinIndex:
    level: int
    coords: tuple

    def __post_init__(self):
        object.__setattr__(self, "coords", tuple(int(c) for c in self.coords))

    def validate(self, config: PyramidConfig):
        if not 0 <= self.level < config.levels:
            raise DomainError(f"level {self.level} outside 0..{config.levels - 1}")
        if len(self.coords) != config.dims:
            raise DomainError(f"bin has {len(self.coords)} coordinates, pyramid has {config.dims}")
        n = config.resolution(self.level)
        if any(c < 0 or c >= n for c in self.coords):
            raise DomainError(f"bin {self.coords} outside level {self.level} grid of {n}")
        return self


def normalize_block(logits):
    """Exp-normalise logits along the last axis into masses that sum to one."""
    logits = np.asarray(logits, dtype=np.float64)
    if not np.all(np.isfinite(logits)):
        raise PyramidError("non-finite logit")
    shifted = np.exp(logits - logits.max(axis=-1, keepdims=True))
    return shifted / shifted.sum(axis=-1, keepdims=True)


def linearize(coords, resolution: int):
    """C-order linear index of integer grid coordinates, shape (..., D) -> (...)."""
    coords = np.asarray(coords, dtype=np.int64)
    index = np.zeros(coords.shape[:-1], dtype=np.int64)
    for d in range(coords.shape[-1]):
        index = index * resolution + coords[..., d]
    return index


def delinearize(index, resolution: int, dims: int):
    index = np.asarray(index, dtype=np.int64)
    coords = np.empty(index.shape + (dims,), dtype=np.int64)
    rest = index.copy()
    for d in range(dims - 1, -1, -1):
        coords[..., d] = rest % resolution
        rest //= resolution
    return coords


def spatial_hash(coords, modulus: int):
    """XOR of per-axis products with the fixed primes, 32-bit wrapped, mod ``modulus``."""
    coords = np.asarray(coords, dtype=np.int64).astype(np.uint64)
    h = np.zeros(coords.shape[:-1], dtype=np.uint64)
    for d in range(coords.shape[-1]):
        h ^= (coords[..., d] * np.uint64(HASH_PRIMES[d])) & _UINT32
    return (h % np.uint64(modulus)).astype(np.int64)


def hash_block(config: PyramidConfig, level: int, parent):
    """Block id of the level-``level`` block refining ``parent`` (a level-1 bin).

    ``parent`` is a BinIndex or an integer array of shape (..., D).
    """
    if not 1 <= level < config.levels:
        raise PyramidError(f"level {level} has no blocks to hash (levels 1..{config.levels - 1})")
    scalar = isinstance(parent, BinIndex)
    if scalar:
        if parent.level != level - 1:
            raise DomainError(f"parent is at level {parent.level}, expected {level - 1}")
        parent.validate(config)
        coords = np.asarray(parent.coords, dtype=np.int64)
    else:
        coords = np.asarray(parent, dtype=np.int64)
        n = config.resolution(level - 1)
        if np.any(coords < 0) or np.any(coords >= n):
            raise DomainError(f"parent coordinates outside level {level - 1} grid of {n}")
    if config.is_dense(level):
        ids = linearize(coords, config.resolution(level - 1))
    else:
        ids = spatial_hash(coords, config.budget)
    return int(ids) if scalar else ids


def dof_count(config: PyramidConfig) -> int:
    """Free parameters: one softmax constraint removed per normalised block."""
    total = config.entries(0) - 1
    for level in range(1, config.levels):
        total += config.block_count(level) * (config.entries(level) - 1)
    return total


def parameter_count(config: PyramidConfig) -> int:
    """Stored logits, normalisation constraints included."""
    return sum(config.block_count(level) * config.entries(level) for level in range(config.levels))


@dataclass
class PyramidGradient:
    """Gradient with the same per-level layout as ``HashedProbabilityPyramid.logits``."""

    arrays: list

    @classmethod
    def zeros_like(cls, pyramid: "HashedProbabilityPyramid") -> "PyramidGradient":
        return cls([np.zeros_like(a) for a in pyramid.logits])

    def __add__(self, other: "PyramidGradient") -> "PyramidGradient":
        return PyramidGradient([a + b for a, b in zip(self.arrays, other.arrays)])

    def __iadd__(self, other: "PyramidGradient") -> "PyramidGradient":
        for a, b in zip(self.arrays, other.arrays):
            a += b
        return self

    def scaled(self, factor: float) -> "PyramidGradient":
        return PyramidGradient([a * factor for a in self.arrays])

    def flatten(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays])

    def support(self) -> list:
        """Per level, the ids of blocks with any nonzero entry."""
        return [np.flatnonzero(np.any(a != 0.0, axis=1)) for a in self.arrays]


class HashedProbabilityPyramid:
    def __init__(self, config: PyramidConfig, logits=None):
        self.config = config
        if logits is None:
            self.logits = [
                np.zeros((config.block_count(level), config.entries(level)))
                for level in range(config.levels)
            ]
        else:
            if len(logits) != config.levels:
                raise PyramidError(f"expected {config.levels} logit arrays, got {len(logits)}")
            self.logits = []
            for level, array in enumerate(logits):
                array = np.array(array, dtype=np.float64)
                shape = (config.block_count(level), config.entries(level))
                if array.shape != shape:
                    array = array.reshape(shape)
                if not np.all(np.isfinite(array)):
                    raise PyramidError(f"non-finite logit at level {level}")
                self.logits.append(array)

    @classmethod
    def from_finest_masses(cls, config: PyramidConfig, masses) -> "HashedProbabilityPyramid":
        """Exact logits reproducing a finest-grid distribution (dense configs only)."""
        if any(not config.is_dense(level) for level in range(config.levels)):
            raise PyramidError("exact assignment needs every level dense")
        n = config.finest_resolution
        grid = np.asarray(masses, dtype=np.float64).reshape((n,) * config.dims)
        if np.any(grid < 0) or not math.isclose(grid.sum(), 1.0, rel_tol=1e-9):
            raise PyramidError("target masses must be non-negative and sum to 1")
        grids = [grid]
        for _ in range(config.levels - 1):
            g = grids[0]
            for axis in range(config.dims):
                shape = list(g.shape)
                shape[axis:axis + 1] = [shape[axis] // 2, 2]
                g = g.reshape(shape).sum(axis=axis + 1)
            grids.insert(0, g)
        logits = [np.log(np.maximum(grids[0].ravel(), MASS_FLOOR))[None, :]]
        for level in range(1, config.levels):
            res = config.resolution(level)
            child = grids[level]
            parent_n = res // 2
            # (parent..., 2, 2, 2) -> (parents, 2^D)
            shape = []
            for _ in range(config.dims):
                shape += [parent_n, 2]
            blocks = child.reshape(shape)
            order = list(range(0, 2 * config.dims, 2)) + list(range(1, 2 * config.dims, 2))
            blocks = blocks.transpose(order).reshape(parent_n ** config.dims, 2 ** config.dims)
            logits.append(np.log(np.maximum(blocks, MASS_FLOOR)))
        return cls(config, logits)

    def copy(self) -> "HashedProbabilityPyramid":
        return HashedProbabilityPyramid(self.config, [a.copy() for a in self.logits])

    @property
    def level0_logits(self) -> np.ndarray:
        return self.logits[0][0]

    @property
    def block_logits(self) -> list:
        return self.logits[1:]

    def masses(self) -> list:
        return [normalize_block(a) for a in self.logits]

    def apply_update(self, delta: PyramidGradient):
        for array, step in zip(self.logits, delta.arrays):
            array += step
        if not all(np.all(np.isfinite(a)) for a in self.logits):
            raise PyramidError("logit update produced non-finite values")

    # Path bookkeeping ----------------------------------------------------

    def level_coords(self, finest_bins, level: int):
        shift = self.config.levels - 1 - level
        return np.asarray(finest_bins, dtype=np.int64) >> shift

    def block_ids(self, level: int, parent_coords):
        parent_coords = np.asarray(parent_coords, dtype=np.int64)
        if level == 0:
            return np.zeros(parent_coords.shape[:-1], dtype=np.int64)
        return hash_block(self.config, level, parent_coords)

    def path_indices(self, finest_bins) -> list:
        """Per level, (block ids, entry ids) visited on the way to each finest bin."""
        cfg = self.config
        finest_bins = np.atleast_2d(np.asarray(finest_bins, dtype=np.int64))
        out = []
        for level in range(cfg.levels):
            coords = self.level_coords(finest_bins, level)
            if level == 0:
                blocks = np.zeros(len(coords), dtype=np.int64)
                entries = linearize(coords, cfg.base_resolution)
            else:
                blocks = self.block_ids(level, coords >> 1)
                entries = linearize(coords & 1, 2)
            out.append((blocks, entries))
        return out

    # Evaluation ----------------------------------------------------------

    def finest_bins_of(self, points):
        points = np.atleast_2d(np.asarray(points, dtype=np.float64))
        if points.shape[-1] != self.config.dims:
            raise DomainError(f"points have {points.shape[-1]} coordinates, pyramid has {self.config.dims}")
        if np.any(points < 0.0) or np.any(points >= 1.0) or not np.all(np.isfinite(points)):
            raise DomainError("point outside [0, 1)^D")
        n = self.config.finest_resolution
        return np.minimum(np.floor(points * n).astype(np.int64), n - 1)

    def bin_masses(self, finest_bins, masses=None):
        """Probability of each finest bin (product of block masses along its path)."""
        masses = self.masses() if masses is None else masses
        prob = None
        for level, (blocks, entries) in enumerate(self.path_indices(finest_bins)):
            m = masses[level][blocks, entries]
            prob = m if prob is None else prob * m
        return prob

    def bin_log_prob(self, finest_bins, masses=None):
        masses = self.masses() if masses is None else masses
        total = 0.0
        for level, (blocks, entries) in enumerate(self.path_indices(finest_bins)):
            total = total + np.log(masses[level][blocks, entries])
        return total

    def density(self, points, masses=None):
        """Product density at points in [0, 1)^D; a scalar for a single point."""
        single = np.ndim(points) == 1
        bins = self.finest_bins_of(points)
        value = self.bin_masses(bins, masses) * self.config.finest_bin_count
        return float(value[0]) if single else value

    def finest_masses(self, masses=None) -> np.ndarray:
        """Masses of every finest bin, C-ordered, summing to one."""
        n = self.config.finest_resolution
        bins = delinearize(np.arange(self.config.finest_bin_count), n, self.config.dims)
        return self.bin_masses(bins, masses)

    def accumulate_scores(self, finest_bins, weights, out: Optional[PyramidGradient] = None,
                          masses=None) -> PyramidGradient:
        """Sum over bins of ``weight * d log p(bin) / d logits``.

        Within each visited block the score is onehot(selected) - masses.
        """
        masses = self.masses() if masses is None else masses
        out = PyramidGradient.zeros_like(self) if out is None else out
        weights = np.asarray(weights, dtype=np.float64).ravel()
        if weights.size == 0:
            return out
        for level, (blocks, entries) in enumerate(self.path_indices(finest_bins)):
            grad = out.arrays[level]
            np.add.at(grad, (blocks, entries), weights)
            per_block = np.bincount(blocks, weights=weights, minlength=grad.shape[0])
            touched = np.flatnonzero(per_block)
            grad[touched] -= per_block[touched, None] * masses[level][touched]
        return out

    def log_prob_path(self, path):
        """Log-probability of a path's finest bin and its sparse score."""
        bins = np.asarray(path.finest_bin.coords, dtype=np.int64)[None, :]
        masses = self.masses()
        log_prob = float(self.bin_log_prob(bins, masses)[0])
        score = self.accumulate_scores(bins, [1.0], masses=masses)
        return log_prob, score

    # Persistence ---------------------------------------------------------

    def to_bytes(self) -> bytes:
        cfg = self.config
        header = SNAPSHOT_MAGIC + bytes([SNAPSHOT_VERSION]) + _HEADER.pack(
            cfg.dims, 0, cfg.levels, cfg.base_resolution, cfg.budget or 0
        )
        body = b"".join(a.astype("<f8").tobytes() for a in self.logits)
        return header + body

    @classmethod
    def from_bytes(cls, data: bytes) -> "HashedProbabilityPyramid":
        if data[:4] != SNAPSHOT_MAGIC:
            raise PyramidError("not a pyramid snapshot")
        if data[4] != SNAPSHOT_VERSION:
            raise PyramidError(f"unsupported pyramid snapshot version {data[4]}")
        dims, _, levels, base, budget = _HEADER.unpack_from(data, 5)
        config = PyramidConfig(dims=dims, levels=levels, base_resolution=base, budget=budget or None)
        offset = 5 + _HEADER.size
        logits = []
        for level in range(levels):
            count = config.block_count(level) * config.entries(level)
            array = np.frombuffer(data, dtype="<f8", count=count, offset=offset)
            logits.append(array.astype(np.float64).reshape(config.block_count(level), config.entries(level)))
            offset += count * 8
        if offset != len(data):
            raise PyramidError("trailing bytes in pyramid snapshot")
        return cls(config, logits)

    def save(self, path):
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "HashedProbabilityPyramid":
        return cls.from_bytes(Path(path).read_bytes())

    def dump_text(self) -> str:
        """Per-level normalised masses, one block per line."""
        cfg = self.config
        lines = [
            f"# dims={cfg.dims} levels={cfg.levels} base_resolution={cfg.base_resolution} "
            f"budget={cfg.budget or 'unlimited'} dof={dof_count(cfg)} parameters={parameter_count(cfg)}"
        ]
        for level, masses in enumerate(self.masses()):
            kind = "dense" if cfg.is_dense(level) else "hashed"
            lines.append(f"level {level} resolution={cfg.resolution(level)} blocks={len(masses)} {kind}")
            for block, row in enumerate(masses):
                lines.append(f"  {block}: " + " ".join(f"{m:.6g}" for m in row))
        return "\n".join(lines) + "\n"
