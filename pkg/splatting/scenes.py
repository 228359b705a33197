"""Synthetic ground-truth scenes, scene normalisation and the dataset directory format."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional

import numpy as np

from .images import read_image, write_image
from .renderer import Camera, RenderOptions, Splats, render

logger = logging.getLogger(__name__)

TRAIN = "train"
HELDOUT = "test"


@dataclass(frozen=True)
class SceneSpec:
    primitives: int = 200
    cameras: int = 20
    heldout_every: int = 5
    ring_radius: float = 2.0
    ring_height: float = 0.6
    object_radius: float = 0.8
    scale_min: float = 0.04
    scale_max: float = 0.1
    opacity_min: float = 0.6
    opacity_max: float = 0.95
    width: int = 64
    height: int = 64
    focal: Optional[float] = None  # defaults to the image width
    seed: int = 0

    def __post_init__(self):
        if self.primitives < 0:
            raise ValueError("primitives must be >= 0")
        if self.cameras < 1:
            raise ValueError("cameras must be >= 1")
        if self.object_radius >= self.ring_radius:
            raise ValueError("cameras must stay outside the object")

    def to_dict(self) -> dict:
        return {name: getattr(self, name) for name in self.__dataclass_fields__}


@dataclass
class SimilarityTransform:
    """x' = scale * axes @ (x - origin)."""

    axes: np.ndarray
    origin: np.ndarray
    scale: float

    def apply_points(self, points):
        return self.scale * (np.asarray(points, dtype=np.float64) - self.origin) @ self.axes.T

    def apply_camera(self, camera: Camera) -> Camera:
        rotation = camera.rotation @ self.axes.T
        translation = self.scale * (camera.rotation @ self.origin + camera.translation)
        return Camera(rotation, translation, camera.focal, camera.width, camera.height, camera.z_near)

    def apply_splats(self, splats: Splats) -> Splats:
        return Splats(self.apply_points(splats.positions), splats.opacities, splats.scales * self.scale,
                      splats.colors)


def normalize_scene(centers) -> SimilarityTransform:
    """Align principal components with the axes and fit the centres into [-1, 1]^3."""
    centers = np.asarray(centers, dtype=np.float64).reshape(-1, 3)
    mean = centers.mean(axis=0)
    spread = centers - mean
    if len(centers) == 0 or np.max(np.abs(spread)) == 0.0:
        logger.warning("degenerate camera layout, normalising by translation only")
        return SimilarityTransform(np.eye(3), mean if len(centers) else np.zeros(3), 1.0)
    eigenvalues, vectors = np.linalg.eigh(spread.T @ spread)
    eigenvalues, vectors = eigenvalues[::-1], vectors[:, ::-1]
    if len(centers) < 3 or eigenvalues[1] <= 1e-12 * eigenvalues[0]:
        logger.info("collinear camera centres, using the bounding box")
        axes = np.eye(3)
        origin = (centers.min(axis=0) + centers.max(axis=0)) / 2.0
    else:
        axes = vectors.T.copy()
        # keep each axis pointing the same way as the world axis it replaces
        for i in range(3):
            if axes[i, i] < 0:
                axes[i] *= -1
        if np.linalg.det(axes) < 0:
            axes[2] *= -1
        origin = mean
    extent = np.max(np.abs((centers - origin) @ axes.T))
    return SimilarityTransform(axes, origin, 1.0 / extent)


@dataclass
class Dataset:
    cameras: List[Camera]
    images: np.ndarray  # (V, H, W, 3), premultiplied over black
    masks: np.ndarray  # (V, H, W) coverage
    splits: List[str]
    ground_truth: Optional[Splats] = None
    spec: Optional[dict] = field(default=None)

    def __len__(self):
        return len(self.cameras)

    @property
    def train_views(self) -> List[int]:
        return [i for i, s in enumerate(self.splits) if s == TRAIN]

    @property
    def heldout_views(self) -> List[int]:
        return [i for i, s in enumerate(self.splits) if s == HELDOUT]

    def composite(self, view: int, background) -> np.ndarray:
        """Ground truth of ``view`` over a solid background colour."""
        background = np.asarray(background, dtype=np.float64)
        return self.images[view] + background * (1.0 - self.masks[view])[..., None]


def camera_ring(spec: SceneSpec) -> List[Camera]:
    focal = spec.focal or float(spec.width)
    cameras = []
    for k in range(spec.cameras):
        angle = 2.0 * np.pi * k / spec.cameras
        height = spec.ring_height * (1.0 if k % 2 == 0 else 0.5)
        eye = np.array([spec.ring_radius * np.cos(angle), spec.ring_radius * np.sin(angle), height])
        cameras.append(Camera.look_at(eye, np.zeros(3), (0.0, 0.0, 1.0), focal, spec.width, spec.height))
    return cameras


def synth_scene(spec: SceneSpec, options: RenderOptions = RenderOptions()):
    """Random ground-truth primitives and their renders from a ring of cameras."""
    rng = np.random.default_rng(spec.seed)
    n = spec.primitives
    direction = rng.normal(size=(n, 3))
    direction /= np.maximum(np.linalg.norm(direction, axis=1, keepdims=True), 1e-12)
    radius = spec.object_radius * rng.random(n) ** (1.0 / 3.0)
    splats = Splats(
        positions=direction * radius[:, None],
        opacities=rng.uniform(spec.opacity_min, spec.opacity_max, n),
        scales=rng.uniform(spec.scale_min, spec.scale_max, n),
        colors=rng.uniform(0.05, 0.95, (n, 3)),
    )
    cameras = camera_ring(spec)
    transform = normalize_scene([c.center for c in cameras])
    cameras = [transform.apply_camera(c) for c in cameras]
    splats = transform.apply_splats(splats)

    images, masks = [], []
    for camera in cameras:
        image, graph = render(splats, camera, np.zeros(3), options)
        images.append(image)
        masks.append((1.0 - graph.final_transmittance).reshape(camera.height, camera.width))
    splits = [HELDOUT if (k + 1) % spec.heldout_every == 0 else TRAIN for k in range(spec.cameras)]
    logger.info(
        "synthesised scene",
        extra={"primitives": n, "cameras": spec.cameras, "heldout": splits.count(HELDOUT)},
    )
    return splats, Dataset(cameras, np.stack(images), np.stack(masks), splits, splats, spec.to_dict())


# Dataset directory ------------------------------------------------------------

def _format(values):
    return " ".join(f"{v:.17g}" for v in values)


def write_primitives(path, splats: Splats):
    """One primitive per line: position, opacity, scale, colour."""
    with open(path, "w") as handle:
        for i in range(len(splats)):
            handle.write(_format(list(splats.positions[i]) + [splats.opacities[i], splats.scales[i]]
                                 + list(splats.colors[i])) + "\n")


def read_primitives(path) -> Splats:
    rows = [list(map(float, line.split())) for line in Path(path).read_text().splitlines() if line.strip()]
    if not rows:
        return Splats.empty()
    data = np.array(rows)
    if data.shape[1] < 8:
        raise ValueError(f"{path}: expected at least 8 numbers per primitive")
    return Splats(data[:, 0:3], data[:, 3], data[:, 4], data[:, 5:8])


def save_dataset(dataset: Dataset, directory) -> Path:
    directory = Path(directory)
    (directory / "images").mkdir(parents=True, exist_ok=True)
    (directory / "masks").mkdir(exist_ok=True)
    lines = []
    for k, camera in enumerate(dataset.cameras):
        lines.append(
            _format(list(camera.rotation.ravel()) + list(camera.translation) + [camera.focal])
            + f" {camera.width} {camera.height} {dataset.splits[k]}"
        )
        write_image(directory / "images" / f"{k:03d}.ppm", dataset.images[k])
        write_image(directory / "masks" / f"{k:03d}.pgm", dataset.masks[k])
    (directory / "cameras.txt").write_text("\n".join(lines) + "\n")
    if dataset.ground_truth is not None:
        write_primitives(directory / "ground_truth.txt", dataset.ground_truth)
    return directory


def load_dataset(directory) -> Dataset:
    directory = Path(directory)
    camera_file = directory / "cameras.txt"
    if not camera_file.exists():
        raise FileNotFoundError(f"{camera_file} not found")
    cameras, splits, images, masks = [], [], [], []
    for k, line in enumerate(l for l in camera_file.read_text().splitlines() if l.strip()):
        parts = line.split()
        if len(parts) != 16:
            raise ValueError(f"{camera_file}:{k + 1}: expected 16 fields, found {len(parts)}")
        values = list(map(float, parts[:13]))
        camera = Camera(np.reshape(values[:9], (3, 3)), values[9:12], values[12], int(parts[13]), int(parts[14]))
        cameras.append(camera)
        splits.append(parts[15])
        images.append(read_image(directory / "images" / f"{k:03d}.ppm"))
        mask_path = directory / "masks" / f"{k:03d}.pgm"
        masks.append(read_image(mask_path) if mask_path.exists() else np.ones((camera.height, camera.width)))
    gt_path = directory / "ground_truth.txt"
    ground_truth = read_primitives(gt_path) if gt_path.exists() else None
    return Dataset(cameras, np.stack(images), np.stack(masks), splits, ground_truth)
