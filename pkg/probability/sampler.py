"""Hierarchical sampling from a HashedProbabilityPyramid.

Each level picks a child of the current bin with per-axis inverse CDFs over
the block (first axis from the block marginal, later axes conditioned on the
earlier choices). The within-bin remainder of the uniform becomes the uniform
for the next level, so a single root uniform drives the whole path and the
final position is a differentiable function of the logits.
"""
from __future__ import annotations

import csv
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from django.conf import settings

from .pyramid import (
    BinIndex,
    DomainError,
    HashedProbabilityPyramid,
    PyramidGradient,
    delinearize,
    linearize,
)

logger = logging.getLogger(__name__)

CHUNK_SIZE = 8192
VJP_CHUNK = 256
NOISE_CLIP = 1.0 - 1e-9
_BELOW_ONE = np.nextafter(1.0, 0.0)


def worker_count(threads: Optional[int] = None) -> int:
    """Thread cap: explicit value, then HPP_THREADS, then the CPU count."""
    if threads:
        return max(1, int(threads))
    configured = getattr(settings, "HPP_THREADS", None) if settings.configured else None
    return max(1, int(configured or os.cpu_count() or 1))


@dataclass
class SamplePath:
    u0: np.ndarray
    choices: tuple
    mu_continuous: np.ndarray
    mu_rounded: np.ndarray
    finest_bin: BinIndex
    log_prob: float


@dataclass
class SampleBatch:
    """Vectorised sample paths; index or iterate to get SamplePath objects."""

    u0: np.ndarray  # (n, D)
    choices: np.ndarray  # (n, L, D) child offset per level (level 0: coordinate)
    block_ids: np.ndarray  # (n, L)
    u: np.ndarray  # (n, L, D) uniform consumed at each level
    t: np.ndarray  # (n, L, D) within-bin fraction after each level
    probs: np.ndarray  # (n, L, D) selected conditional probability per axis
    mu_continuous: np.ndarray
    mu_rounded: np.ndarray
    finest_bins: np.ndarray
    log_prob: np.ndarray
    resolution: int
    independent_levels: bool = False

    def __len__(self):
        return len(self.u0)

    def __getitem__(self, i) -> SamplePath:
        return SamplePath(
            u0=self.u0[i].copy(),
            choices=tuple(tuple(int(c) for c in level) for level in self.choices[i]),
            mu_continuous=self.mu_continuous[i].copy(),
            mu_rounded=self.mu_rounded[i].copy(),
            finest_bin=BinIndex(self.choices.shape[1] - 1, self.finest_bins[i]),
            log_prob=float(self.log_prob[i]),
        )

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    def take(self, index) -> "SampleBatch":
        return SampleBatch(
            **{name: getattr(self, name)[index] for name in _ARRAY_FIELDS},
            resolution=self.resolution,
            independent_levels=self.independent_levels,
        )

    @classmethod
    def concatenate(cls, batches: Sequence["SampleBatch"]) -> "SampleBatch":
        first = batches[0]
        return cls(
            **{name: np.concatenate([getattr(b, name) for b in batches]) for name in _ARRAY_FIELDS},
            resolution=first.resolution,
            independent_levels=first.independent_levels,
        )

    @classmethod
    def empty(cls, pyramid: HashedProbabilityPyramid, independent_levels=False) -> "SampleBatch":
        cfg = pyramid.config
        d, l = cfg.dims, cfg.levels
        return cls(
            u0=np.zeros((0, d)),
            choices=np.zeros((0, l, d), dtype=np.int64),
            block_ids=np.zeros((0, l), dtype=np.int64),
            u=np.zeros((0, l, d)),
            t=np.zeros((0, l, d)),
            probs=np.zeros((0, l, d)),
            mu_continuous=np.zeros((0, d)),
            mu_rounded=np.zeros((0, d)),
            finest_bins=np.zeros((0, d), dtype=np.int64),
            log_prob=np.zeros(0),
            resolution=cfg.finest_resolution,
            independent_levels=independent_levels,
        )


_ARRAY_FIELDS = (
    "u0", "choices", "block_ids", "u", "t", "probs",
    "mu_continuous", "mu_rounded", "finest_bins", "log_prob",
)


def round_position(mu, resolution: int):
    """Centre of the finest bin containing ``mu``."""
    bins = np.minimum(np.floor(np.asarray(mu) * resolution), resolution - 1)
    return (bins + 0.5) / resolution


def _block_masses(masses, level, block_ids):
    if level == 0:
        return np.broadcast_to(masses[0][0], (len(block_ids), masses[0].shape[1]))
    return masses[level][block_ids]


def _select_axis(marginal, u):
    """Inverse CDF over the last axis of ``marginal`` (n, R) for uniforms u (n,)."""
    total = marginal.sum(axis=1, keepdims=True)
    q = marginal / total
    upper = np.cumsum(q, axis=1)
    k = np.sum(u[:, None] >= upper, axis=1)
    last_positive = q.shape[1] - 1 - np.argmax(q[:, ::-1] > 0, axis=1)
    k = np.minimum(k, last_positive)
    rows = np.arange(len(u))
    p = q[rows, k]
    lo = upper[rows, k] - p
    t = np.clip((u - lo) / p, 0.0, _BELOW_ONE)
    return k, p, t


def _descend(pyramid: HashedProbabilityPyramid, uniforms, masses, independent_levels):
    """Walk every level for a chunk; ``uniforms`` is (n, L, D)."""
    cfg = pyramid.config
    n, d, levels = len(uniforms), cfg.dims, cfg.levels
    choices = np.zeros((n, levels, d), dtype=np.int64)
    block_ids = np.zeros((n, levels), dtype=np.int64)
    used = np.zeros((n, levels, d))
    ts = np.zeros((n, levels, d))
    probs = np.zeros((n, levels, d))
    coords = np.zeros((n, d), dtype=np.int64)
    u = uniforms[:, 0].copy()
    for level in range(levels):
        if level > 0 and independent_levels:
            u = uniforms[:, level].copy()
        radix = cfg.radix(level)
        blocks = pyramid.block_ids(level, coords)
        current = _block_masses(masses, level, blocks).reshape((n,) + (radix,) * d)
        used[:, level] = u
        for axis in range(d):
            marginal = current.reshape(n, radix, -1).sum(axis=2)
            k, p, t = _select_axis(marginal, u[:, axis])
            choices[:, level, axis] = k
            probs[:, level, axis] = p
            ts[:, level, axis] = t
            current = current[np.arange(n), k]
        block_ids[:, level] = blocks
        coords = choices[:, 0] if level == 0 else coords * 2 + choices[:, level]
        u = ts[:, level]
    return choices, block_ids, used, ts, probs, coords


def _finish(pyramid, uniforms, masses, independent_levels) -> SampleBatch:
    cfg = pyramid.config
    n_res = cfg.finest_resolution
    choices, block_ids, used, ts, probs, coords = _descend(pyramid, uniforms, masses, independent_levels)
    mu = (coords + ts[:, -1]) / n_res
    drifted = np.floor(mu * n_res) != coords
    if np.any(drifted):
        mu = np.where(drifted, np.nextafter((coords + 1) / n_res, 0.0), mu)
    return SampleBatch(
        u0=uniforms[:, 0].copy(),
        choices=choices,
        block_ids=block_ids,
        u=used,
        t=ts,
        probs=probs,
        mu_continuous=mu,
        mu_rounded=(coords + 0.5) / n_res,
        finest_bins=coords,
        log_prob=np.log(probs).sum(axis=(1, 2)),
        resolution=n_res,
        independent_levels=independent_levels,
    )


def sample_from_uniforms(pyramid: HashedProbabilityPyramid, uniforms, independent_levels=False,
                         masses=None) -> SampleBatch:
    """Deterministic map from uniforms to paths.

    ``uniforms`` is (n, D) for the single-uniform recursion or (n, L, D) when
    every level draws its own uniform.
    """
    cfg = pyramid.config
    uniforms = np.asarray(uniforms, dtype=np.float64)
    if uniforms.ndim == 2:
        uniforms = np.repeat(uniforms[:, None, :], cfg.levels, axis=1)
    if uniforms.shape[1:] != (cfg.levels, cfg.dims):
        raise DomainError(f"uniforms shape {uniforms.shape} does not match the pyramid")
    if np.any(uniforms < 0.0) or np.any(uniforms >= 1.0):
        raise DomainError("uniforms outside [0, 1)")
    if len(uniforms) == 0:
        return SampleBatch.empty(pyramid, independent_levels)
    masses = pyramid.masses() if masses is None else masses
    return _finish(pyramid, uniforms, masses, independent_levels)


def sample_one(pyramid: HashedProbabilityPyramid, u0) -> SamplePath:
    u0 = np.asarray(u0, dtype=np.float64).reshape(1, pyramid.config.dims)
    return sample_from_uniforms(pyramid, u0)[0]


def sample_batch(pyramid: HashedProbabilityPyramid, n: int, rng_seed: int,
                 independent_levels: bool = False, threads: Optional[int] = None,
                 masses=None) -> SampleBatch:
    """``n`` paths; chunk ``c`` draws from ``default_rng([seed, c])`` so results ignore scheduling."""
    if n < 0:
        raise ValueError(f"sample count must be >= 0, not {n}")
    if n == 0:
        return SampleBatch.empty(pyramid, independent_levels)
    cfg = pyramid.config
    masses = pyramid.masses() if masses is None else masses
    starts = list(range(0, n, CHUNK_SIZE))

    def run(chunk):
        size = min(CHUNK_SIZE, n - starts[chunk])
        rng = np.random.default_rng([int(rng_seed), chunk])
        uniforms = rng.random((size, cfg.levels, cfg.dims))
        if not independent_levels:
            uniforms[:, 1:] = uniforms[:, :1]
        return _finish(pyramid, uniforms, masses, independent_levels)

    workers = min(worker_count(threads), len(starts))
    if workers == 1:
        parts = [run(c) for c in range(len(starts))]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(run, range(len(starts))))
    return parts[0] if len(parts) == 1 else SampleBatch.concatenate(parts)


# Pathwise derivatives ------------------------------------------------------

def _level_t_jacobian(pyramid, batch: SampleBatch, level: int, masses):
    """d t^(level)_axis / d logits of the visited block: (n, D, E)."""
    cfg = pyramid.config
    n, d = len(batch), cfg.dims
    radix = cfg.radix(level)
    entries = radix ** d
    m = np.array(_block_masses(masses, level, batch.block_ids[:, level]))
    offsets = delinearize(np.arange(entries), radix, d)  # (E, D)
    k = batch.choices[:, level]  # (n, D)
    t = batch.t[:, level]
    p = batch.probs[:, level]
    jac = np.zeros((n, d, entries))
    inside = np.ones((n, entries), dtype=bool)
    for axis in range(d):
        s = (m * inside).sum(axis=1)
        # lower CDF edge of the selected bin under the conditional
        below = inside & (offsets[None, :, axis] < k[:, axis, None])
        lo = (m * below).sum(axis=1) / s
        at = (offsets[None, :, axis] == k[:, axis, None]).astype(np.float64)
        jac[:, axis] = -(m / s[:, None]) * inside * (
            below - lo[:, None] + t[:, axis, None] * (at - p[:, axis, None])
        ) / p[:, axis, None]
        inside = inside & (at > 0)
    return jac


def pathwise_jacobian(pyramid: HashedProbabilityPyramid, batch: SampleBatch, masses=None):
    """Sparse d mu_continuous / d logits.

    Returns ``(levels, boundary)`` where ``levels[l] = (block_ids, jac)`` with
    ``jac`` of shape (n, D, entries) holding derivatives with respect to the
    visited block's logits, and ``boundary`` flags samples sitting exactly on
    a CDF breakpoint, where the derivative is undefined.
    """
    cfg = pyramid.config
    masses = pyramid.masses() if masses is None else masses
    n_res = cfg.finest_resolution
    # d mu / d t^(l) per axis: product of 1/p over every later level.
    chain = np.ones((len(batch), cfg.levels, cfg.dims)) / n_res
    if batch.independent_levels:
        chain[:, :-1] = 0.0
    else:
        for level in range(cfg.levels - 2, -1, -1):
            chain[:, level] = chain[:, level + 1] / batch.probs[:, level + 1]
    levels = []
    for level in range(cfg.levels):
        jac = _level_t_jacobian(pyramid, batch, level, masses) * chain[:, level, :, None]
        levels.append((batch.block_ids[:, level].copy(), jac))
    boundary = np.any(batch.t == 0.0, axis=(1, 2))
    return levels, boundary


def pathwise_vjp(pyramid: HashedProbabilityPyramid, batch: SampleBatch, position_adjoints,
                 masses=None) -> PyramidGradient:
    """Sum over samples of (dL/dmu) . (dmu/dlogits), chunked to bound memory."""
    masses = pyramid.masses() if masses is None else masses
    adjoints = np.asarray(position_adjoints, dtype=np.float64).reshape(len(batch), pyramid.config.dims)
    grad = PyramidGradient.zeros_like(pyramid)
    for start in range(0, len(batch), VJP_CHUNK):
        part = batch.take(slice(start, start + VJP_CHUNK))
        levels, _ = pathwise_jacobian(pyramid, part, masses)
        adj = adjoints[start:start + VJP_CHUNK]
        for level, (blocks, jac) in enumerate(levels):
            np.add.at(grad.arrays[level], blocks, np.einsum("nd,nde->ne", adj, jac))
    return grad


# Rounding and de-duplication ----------------------------------------------

@dataclass
class UniqueSamples:
    bins: np.ndarray  # (U, D) finest-bin coordinates, sorted by linear index
    positions: np.ndarray  # (U, D) bin centres
    multiplicity: np.ndarray  # (U,)
    inverse: np.ndarray  # (n,) sample -> unique row
    resolution: int = 0

    def __len__(self):
        return len(self.bins)


def round_and_dedupe(paths, resolution: Optional[int] = None) -> UniqueSamples:
    """Collapse samples sharing a finest bin; accepts a SampleBatch or SamplePaths."""
    if isinstance(paths, SampleBatch):
        bins, resolution = paths.finest_bins, paths.resolution
    else:
        paths = list(paths)
        if not paths:
            empty = np.zeros(0, dtype=np.int64)
            return UniqueSamples(np.zeros((0, 0), dtype=np.int64), np.zeros((0, 0)), empty, empty,
                                 resolution or 0)
        bins = np.array([p.finest_bin.coords for p in paths], dtype=np.int64)
        if resolution is None:
            resolution = _resolution_from_paths(paths)
    keys = linearize(bins, resolution)
    unique_keys, first, inverse, counts = np.unique(keys, return_index=True, return_inverse=True,
                                                    return_counts=True)
    unique_bins = bins[first]
    return UniqueSamples(
        bins=unique_bins,
        positions=(unique_bins + 0.5) / resolution,
        multiplicity=counts,
        inverse=inverse.ravel(),
        resolution=resolution,
    )


def ungrouped(batch: SampleBatch) -> UniqueSamples:
    """One group per sample at its continuous position, for unrounded batches."""
    count = len(batch)
    return UniqueSamples(
        bins=batch.finest_bins,
        positions=batch.mu_continuous,
        multiplicity=np.ones(count, dtype=np.int64),
        inverse=np.arange(count),
        resolution=batch.resolution,
    )


def _resolution_from_paths(paths) -> int:
    p = paths[0]
    centre = float(p.mu_rounded[0])
    coord = p.finest_bin.coords[0]
    return int(round((coord + 0.5) / centre))


# Defensive sampling --------------------------------------------------------

@dataclass(frozen=True)
class DefensiveSchedule:
    sigma0: float = 2e-3
    fraction: float = 0.2
    anneal_iters: int = 20000

    def __post_init__(self):
        if self.sigma0 < 0:
            raise ValueError("sigma0 must be >= 0")
        if not 0.0 <= self.fraction <= 1.0:
            raise ValueError("fraction must lie in [0, 1]")
        if self.anneal_iters < 1:
            raise ValueError("anneal_iters must be >= 1")

    def sigma(self, iteration: int) -> float:
        return self.sigma0 * max(0.0, 1.0 - iteration / self.anneal_iters)


def defensive_noise(positions, iteration: int, schedule: DefensiveSchedule, rng: np.random.Generator):
    """Perturb the first floor(fraction * n) entries of a seeded permutation."""
    if iteration < 0:
        raise ValueError(f"iteration must be >= 0, not {iteration}")
    positions = np.array(positions, dtype=np.float64)
    sigma = schedule.sigma(iteration)
    if sigma == 0.0 or len(positions) == 0:
        return positions
    count = int(np.floor(schedule.fraction * len(positions)))
    chosen = rng.permutation(len(positions))[:count]
    positions[chosen] += rng.normal(0.0, sigma, size=(count,) + positions.shape[1:])
    positions[chosen] = np.clip(positions[chosen], 0.0, NOISE_CLIP)
    return positions


# Contraction ---------------------------------------------------------------

CONTRACTION_CLAMP = 1.0 - 1e-6


@dataclass(frozen=True)
class ContractionConfig:
    a: float = 0.75

    def __post_init__(self):
        if not 0.0 < self.a < 1.0:
            raise ValueError(f"contraction factor must lie in (0, 1), not {self.a}")


def _clamp(x):
    return np.clip(np.asarray(x, dtype=np.float64), -CONTRACTION_CLAMP, CONTRACTION_CLAMP)


def _inf_norm(x):
    return np.max(np.abs(x), axis=-1)


def contract(x, config: ContractionConfig = ContractionConfig()):
    """L-infinity contraction of cube-centred points x in [-1, 1]^D to R^D."""
    x = _clamp(x)
    a = config.a
    n = _inf_norm(x)[..., None]
    safe = np.maximum(n, a)
    outer = (1.0 - a) / ((1.0 - n) * safe) * x
    return np.where(n <= a, x / a, outer)


def to_world(mu, config: ContractionConfig = ContractionConfig()):
    """Map unit-cube samples to world space."""
    return contract(2.0 * np.asarray(mu, dtype=np.float64) - 1.0, config)


def uncontract(y, config: ContractionConfig = ContractionConfig()):
    """Inverse of ``contract``: world points back to cube-centred x in (-1, 1)^D."""
    y = np.asarray(y, dtype=np.float64)
    a = config.a
    m = _inf_norm(y)[..., None]
    safe = np.maximum(m, 1.0)
    n = 1.0 - (1.0 - a) / safe
    outer = y * (1.0 - n) * n / (1.0 - a)
    return np.where(m <= 1.0, a * y, outer)


def from_world(points, config: ContractionConfig = ContractionConfig()):
    """Unit-cube coordinates of world points."""
    return np.clip((uncontract(points, config) + 1.0) / 2.0, 0.0, NOISE_CLIP)


def contract_jacobian(x, config: ContractionConfig = ContractionConfig()):
    """d contract / d x, shape (..., D, D)."""
    x = _clamp(x)
    a = config.a
    d = x.shape[-1]
    n = _inf_norm(x)
    eye = np.eye(d)
    inner = np.broadcast_to(eye / a, x.shape[:-1] + (d, d))
    safe = np.maximum(n, a)
    g = (1.0 - a) / ((1.0 - safe) * safe)
    dg = (1.0 - a) * (2.0 * safe - 1.0) / ((1.0 - safe) ** 2 * safe ** 2)
    axis = np.argmax(np.abs(x), axis=-1)
    grad_n = np.sign(np.take_along_axis(x, axis[..., None], axis=-1)) * (np.arange(d) == axis[..., None])
    outer = g[..., None, None] * eye + dg[..., None, None] * x[..., :, None] * grad_n[..., None, :]
    return np.where((n <= a)[..., None, None], inner, outer)


def jacobian_scale(x, config: ContractionConfig = ContractionConfig()):
    """sqrt(det J) of the contraction at cube-centred x."""
    x = _clamp(x)
    a = config.a
    d = x.shape[-1]
    n = _inf_norm(x)
    safe = np.maximum(n, a)
    log_outer = (d - 1) * np.log((1.0 - a) / ((1.0 - safe) * safe)) + np.log((1.0 - a) / (1.0 - safe) ** 2)
    log_det = np.where(n <= a, -d * np.log(a), log_outer)
    return np.exp(0.5 * log_det)


def jacobian_scale_grad(x, config: ContractionConfig = ContractionConfig()):
    """Gradient of ``jacobian_scale`` with respect to x (zero in the inner region)."""
    x = _clamp(x)
    a = config.a
    d = x.shape[-1]
    n = _inf_norm(x)
    safe = np.maximum(n, a)
    dlog = (d + 1) / (1.0 - safe) - (d - 1) / safe
    axis = np.argmax(np.abs(x), axis=-1)
    grad_n = np.sign(np.take_along_axis(x, axis[..., None], axis=-1)) * (np.arange(d) == axis[..., None])
    grad = (0.5 * jacobian_scale(x, config) * dlog)[..., None] * grad_n
    return np.where((n <= a)[..., None], 0.0, grad)


def write_batch_csv(batch: SampleBatch, path):
    """Debug dump: finest bin, continuous and rounded position, log-probability."""
    d = batch.finest_bins.shape[1]
    with open(path, "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(
            [f"bin_{i}" for i in range(d)]
            + [f"mu_{i}" for i in range(d)]
            + [f"rounded_{i}" for i in range(d)]
            + ["log_prob"]
        )
        for i in range(len(batch)):
            writer.writerow(
                list(batch.finest_bins[i])
                + [f"{v:.17g}" for v in batch.mu_continuous[i]]
                + [f"{v:.17g}" for v in batch.mu_rounded[i]]
                + [f"{batch.log_prob[i]:.17g}"]
            )
