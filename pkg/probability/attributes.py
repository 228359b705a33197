"""Hashed per-bin attribute table and the activations that turn raw values into
opacity, scale and degree-1 spherical-harmonic colour."""
from __future__ import annotations

import logging
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .pyramid import BinIndex, DomainError, linearize, spatial_hash
from .sampler import ContractionConfig, jacobian_scale

logger = logging.getLogger(__name__)

SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199
SH_BASIS = 4
COLOR_OFFSET = 0.5
ENTRY_WIDTH = 2 + 3 * SH_BASIS
OPACITY_COL = 0
SCALE_COL = 1
SNAPSHOT_MAGIC = b"HPAT"
SNAPSHOT_VERSION = 1
_HEADER = struct.Struct("<BIIIddd")


@dataclass(frozen=True)
class ActivationConfig:
    o0: float = 0.05
    s0: float = 0.0006
    sh_alpha: float = 0.2

    def __post_init__(self):
        if not 0.0 < self.o0 < 1.0:
            raise ValueError(f"o0 must lie in (0, 1), not {self.o0}")
        if self.s0 <= 0.0:
            raise ValueError(f"s0 must be positive, not {self.s0}")
        if self.sh_alpha < 0.0:
            raise ValueError(f"sh_alpha must be >= 0, not {self.sh_alpha}")

    @property
    def opacity_bias(self) -> float:
        return float(np.log(self.o0 / (1.0 - self.o0)))

    @property
    def scale_bias(self) -> float:
        return float(softplus_inverse(self.s0))

    @property
    def sh_weights(self) -> np.ndarray:
        return np.array([1.0] + [self.sh_alpha] * (SH_BASIS - 1))

    def to_dict(self) -> dict:
        return {"o0": self.o0, "s0": self.s0, "sh_alpha": self.sh_alpha}


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    return np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))


def softplus(x):
    x = np.asarray(x, dtype=np.float64)
    return np.logaddexp(0.0, x)


def softplus_inverse(y):
    y = np.asarray(y, dtype=np.float64)
    return y + np.log(-np.expm1(-y))


def activate_opacity(raw, config: ActivationConfig):
    return sigmoid(np.asarray(raw) + config.opacity_bias)


def activate_scale(raw, config: ActivationConfig):
    return softplus(np.asarray(raw) + config.scale_bias)


def opacity_grad(raw, config: ActivationConfig):
    o = activate_opacity(raw, config)
    return o * (1.0 - o)


def scale_grad(raw, config: ActivationConfig):
    return sigmoid(np.asarray(raw) + config.scale_bias)


def sh_basis(view_dirs):
    """Real SH basis up to degree 1 for unit directions, shape (..., 4)."""
    view_dirs = np.asarray(view_dirs, dtype=np.float64)
    x, y, z = view_dirs[..., 0], view_dirs[..., 1], view_dirs[..., 2]
    return np.stack([np.full_like(x, SH_C0), -SH_C1 * y, SH_C1 * z, -SH_C1 * x], axis=-1)


def sh_color(coeffs, view_dirs, config: ActivationConfig):
    """Colour from (n, 4, 3) coefficients; ``view_dirs`` None keeps the DC term only."""
    coeffs = np.asarray(coeffs, dtype=np.float64)
    if view_dirs is None:
        view_dirs = np.zeros(coeffs.shape[:-2] + (3,))
    weights = sh_basis(view_dirs) * config.sh_weights
    return COLOR_OFFSET + np.einsum("...b,...bc->...c", weights, coeffs)


@dataclass
class GaussianAttributes:
    opacity: float
    scale: float
    color: np.ndarray


@dataclass
class AttributeBatch:
    slots: np.ndarray
    raw: np.ndarray  # (n, ENTRY_WIDTH)
    opacity: np.ndarray
    scale: np.ndarray
    color: np.ndarray  # (n, 3)
    sh_weights: np.ndarray  # (n, 4) basis times degree weight

    @property
    def sh_coeffs(self) -> np.ndarray:
        return self.raw[:, 2:].reshape(-1, SH_BASIS, 3)

    def __len__(self):
        return len(self.slots)


def default_capacity(samples: int, finest_bin_count: int) -> int:
    return int(min(finest_bin_count, max(1, 4 * samples)))


class AttributeTable:
    def __init__(self, dims: int, resolution: int, capacity: int,
                 activation: ActivationConfig = ActivationConfig(), entries=None):
        if capacity < 1:
            raise ValueError(f"capacity must be >= 1, not {capacity}")
        self.dims = dims
        self.resolution = resolution
        self.capacity = int(capacity)
        self.activation = activation
        if entries is None:
            entries = np.zeros((self.capacity, ENTRY_WIDTH))
        self.entries = np.array(entries, dtype=np.float64).reshape(self.capacity, ENTRY_WIDTH)

    @property
    def dense(self) -> bool:
        return self.capacity >= self.resolution ** self.dims

    def copy(self) -> "AttributeTable":
        return AttributeTable(self.dims, self.resolution, self.capacity, self.activation, self.entries.copy())

    def slots(self, bins):
        bins = np.atleast_2d(np.asarray(bins, dtype=np.int64))
        if bins.shape[-1] != self.dims:
            raise DomainError(f"bins have {bins.shape[-1]} coordinates, table has {self.dims}")
        if np.any(bins < 0) or np.any(bins >= self.resolution):
            raise DomainError("bin outside the finest grid")
        if self.dense:
            return linearize(bins, self.resolution)
        return spatial_hash(bins, self.capacity)

    def query_many(self, bins, view_dirs=None) -> AttributeBatch:
        slots = self.slots(bins)
        raw = self.entries[slots]
        coeffs = raw[:, 2:].reshape(-1, SH_BASIS, 3)
        if view_dirs is None:
            view_dirs = np.zeros((len(slots), 3))
        weights = sh_basis(view_dirs) * self.activation.sh_weights
        return AttributeBatch(
            slots=slots,
            raw=raw,
            opacity=activate_opacity(raw[:, OPACITY_COL], self.activation),
            scale=activate_scale(raw[:, SCALE_COL], self.activation),
            color=sh_color(coeffs, view_dirs, self.activation),
            sh_weights=weights,
        )

    def query(self, bin: BinIndex, view_dir=None) -> GaussianAttributes:
        batch = self.query_many([bin.coords], None if view_dir is None else [view_dir])
        return GaussianAttributes(float(batch.opacity[0]), float(batch.scale[0]), batch.color[0])

    def backward(self, batch: AttributeBatch, d_opacity=None, d_scale=None, d_color=None, d_raw=None):
        """Scatter activation adjoints back onto the table entries."""
        grad = np.zeros((len(batch), ENTRY_WIDTH))
        if d_opacity is not None:
            grad[:, OPACITY_COL] = np.asarray(d_opacity) * batch.opacity * (1.0 - batch.opacity)
        if d_scale is not None:
            grad[:, SCALE_COL] = np.asarray(d_scale) * scale_grad(batch.raw[:, SCALE_COL], self.activation)
        if d_color is not None:
            grad[:, 2:] = np.einsum("nb,nc->nbc", batch.sh_weights, np.asarray(d_color)).reshape(len(batch), -1)
        if d_raw is not None:
            grad += d_raw
        table_grad = np.zeros_like(self.entries)
        np.add.at(table_grad, batch.slots, grad)
        return table_grad

    # Persistence ---------------------------------------------------------

    def to_bytes(self) -> bytes:
        a = self.activation
        header = SNAPSHOT_MAGIC + bytes([SNAPSHOT_VERSION]) + _HEADER.pack(
            self.dims, self.resolution, self.capacity, ENTRY_WIDTH, a.o0, a.s0, a.sh_alpha
        )
        return header + self.entries.astype("<f8").tobytes()

    @classmethod
    def from_bytes(cls, data: bytes) -> "AttributeTable":
        if data[:4] != SNAPSHOT_MAGIC:
            raise ValueError("not an attribute snapshot")
        if data[4] != SNAPSHOT_VERSION:
            raise ValueError(f"unsupported attribute snapshot version {data[4]}")
        dims, resolution, capacity, width, o0, s0, sh_alpha = _HEADER.unpack_from(data, 5)
        if width != ENTRY_WIDTH:
            raise ValueError(f"attribute snapshot has entry width {width}, expected {ENTRY_WIDTH}")
        offset = 5 + _HEADER.size
        if len(data) - offset != capacity * width * 8:
            raise ValueError("attribute snapshot is truncated")
        entries = np.frombuffer(data, dtype="<f8", offset=offset).astype(np.float64)
        return cls(dims, resolution, capacity, ActivationConfig(o0, s0, sh_alpha), entries)

    def save(self, path):
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "AttributeTable":
        return cls.from_bytes(Path(path).read_bytes())


def scale_to_world(scale, mu_centered, contraction: ContractionConfig = ContractionConfig()):
    """Activated scale times the contraction's sqrt-determinant at the cube-centred point."""
    return np.asarray(scale, dtype=np.float64) * jacobian_scale(mu_centered, contraction)

