"""CPU splat renderer for isotropic Gaussians with a hand-written backward pass.

Per pixel, splats are composited front to back by camera depth:
``I = sum_k c_k a_k T_k + background * T_{K+1}`` with ``T_k`` the product of
``1 - a_j`` over the splats in front of ``k``. The render keeps every
per-pixel list so the backward pass and the leave-one-out differences are
exact.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class RenderOptions:
    alpha_max: float = 0.999
    footprint_sigmas: float = 3.0
    pixel_dilation: float = 0.3  # added to the projected variance, in px^2
    render_cap: Optional[int] = None
    cap_seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.alpha_max < 1.0:
            raise ValueError(f"alpha_max must lie in (0, 1), not {self.alpha_max}")
        if self.footprint_sigmas <= 0:
            raise ValueError("footprint_sigmas must be positive")
        if self.pixel_dilation < 0:
            raise ValueError("pixel_dilation must be >= 0")
        if self.render_cap is not None and self.render_cap < 1:
            raise ValueError("render_cap must be >= 1")

    def to_dict(self) -> dict:
        return {
            "alpha_max": self.alpha_max,
            "footprint_sigmas": self.footprint_sigmas,
            "pixel_dilation": self.pixel_dilation,
            "render_cap": self.render_cap,
            "cap_seed": self.cap_seed,
        }


@dataclass
class Camera:
    """Pinhole camera, x right / y down / z forward; ``x_cam = R x_world + t``."""

    rotation: np.ndarray
    translation: np.ndarray
    focal: float
    width: int
    height: int
    z_near: float = 0.2

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        self.focal = float(self.focal)
        self.width = int(self.width)
        self.height = int(self.height)
        if not np.allclose(self.rotation @ self.rotation.T, np.eye(3), atol=1e-9, rtol=0):
            raise ValueError("camera rotation is not orthonormal")
        if self.width < 1 or self.height < 1 or self.focal <= 0:
            raise ValueError("camera needs positive focal length and image size")

    @classmethod
    def look_at(cls, eye, target, up=(0.0, 0.0, 1.0), focal=64.0, width=64, height=64, z_near=0.2):
        eye = np.asarray(eye, dtype=np.float64)
        forward = np.asarray(target, dtype=np.float64) - eye
        forward /= np.linalg.norm(forward)
        right = np.cross(forward, np.asarray(up, dtype=np.float64))
        if np.linalg.norm(right) < 1e-12:
            right = np.cross(forward, [0.0, 1.0, 0.0])
        right /= np.linalg.norm(right)
        down = np.cross(forward, right)
        rotation = np.stack([right, down, forward])
        return cls(rotation, -rotation @ eye, focal, width, height, z_near)

    @property
    def center(self) -> np.ndarray:
        return -self.rotation.T @ self.translation

    @property
    def principal_point(self):
        return self.width / 2.0, self.height / 2.0

    def to_camera(self, points):
        return np.asarray(points, dtype=np.float64) @ self.rotation.T + self.translation

    def view_dirs(self, points):
        dirs = np.asarray(points, dtype=np.float64) - self.center
        norms = np.linalg.norm(dirs, axis=-1, keepdims=True)
        return dirs / np.where(norms > 0, norms, 1.0)


@dataclass
class Splats:
    positions: np.ndarray  # (P, 3) world
    opacities: np.ndarray  # (P,)
    scales: np.ndarray  # (P,) world
    colors: np.ndarray  # (P, 3)

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        n = len(self.positions)
        self.opacities = np.asarray(self.opacities, dtype=np.float64).reshape(n)
        self.scales = np.asarray(self.scales, dtype=np.float64).reshape(n)
        self.colors = np.asarray(self.colors, dtype=np.float64).reshape(n, 3)

    def __len__(self):
        return len(self.positions)

    def take(self, index) -> "Splats":
        return Splats(self.positions[index], self.opacities[index], self.scales[index], self.colors[index])

    def without(self, i: int) -> "Splats":
        keep = np.ones(len(self), dtype=bool)
        keep[i] = False
        return self.take(keep)

    @classmethod
    def empty(cls) -> "Splats":
        return cls(np.zeros((0, 3)), np.zeros(0), np.zeros(0), np.zeros((0, 3)))


@dataclass
class Projection:
    cam: np.ndarray  # (P, 3) camera-frame coordinates
    uv: np.ndarray  # (P, 2) pixel coordinates
    sigma_raw: np.ndarray  # scale * focal / depth
    sigma: np.ndarray  # sqrt(sigma_raw^2 + dilation)
    visible: np.ndarray  # (P,) bool

    @property
    def depth(self) -> np.ndarray:
        return self.cam[:, 2]


def project(camera: Camera, world_pos, world_scale, options: RenderOptions = RenderOptions()) -> Projection:
    """Pinhole projection with near-plane and frustum culling."""
    world_pos = np.asarray(world_pos, dtype=np.float64).reshape(-1, 3)
    world_scale = np.asarray(world_scale, dtype=np.float64).reshape(-1)
    cam = camera.to_camera(world_pos)
    depth = cam[:, 2]
    in_front = depth >= camera.z_near
    safe = np.where(in_front, depth, 1.0)
    cx, cy = camera.principal_point
    uv = np.stack([camera.focal * cam[:, 0] / safe + cx, camera.focal * cam[:, 1] / safe + cy], axis=1)
    sigma_raw = world_scale * camera.focal / safe
    sigma = np.sqrt(sigma_raw ** 2 + options.pixel_dilation)
    margin = options.footprint_sigmas * sigma
    inside = (
        (uv[:, 0] >= -margin) & (uv[:, 0] <= camera.width + margin)
        & (uv[:, 1] >= -margin) & (uv[:, 1] <= camera.height + margin)
    )
    visible = in_front & inside & (sigma > 0)
    return Projection(cam=cam, uv=uv, sigma_raw=sigma_raw, sigma=sigma, visible=visible)


@dataclass
class RenderGraph:
    """Everything the backward pass needs, in padded (pixels, K) per-pixel lists."""

    camera: Camera
    options: RenderOptions
    background: np.ndarray
    splats: Splats  # the rendered subset (after the render cap)
    index: np.ndarray  # rendered subset -> caller's primitive ids
    count: int  # caller's primitive count
    projection: Projection
    gid: np.ndarray  # (HW, K) subset ids, -1 for padding
    alpha: np.ndarray  # (HW, K) clamped alpha
    gauss: np.ndarray  # (HW, K) exp(-d^2 / (2 sigma^2))
    clamped: np.ndarray  # (HW, K) bool
    dx: np.ndarray
    dy: np.ndarray
    transmittance: np.ndarray  # (HW, K) T_k
    final_transmittance: np.ndarray  # (HW,)
    image: np.ndarray  # (H, W, 3)
    colors: np.ndarray = field(repr=False, default=None)  # (HW, K, 3)

    @property
    def shape(self):
        return self.camera.height, self.camera.width

    @property
    def visible_ids(self) -> np.ndarray:
        """Caller ids of primitives that survived culling and the cap."""
        return self.index[self.projection.visible]

    def suffix(self) -> np.ndarray:
        """S_k: colour composited behind slot k, background included, (HW, K, 3)."""
        contrib = (self.alpha * self.transmittance)[..., None] * self.colors
        behind = np.cumsum(contrib[:, ::-1], axis=1)[:, ::-1] - contrib
        return behind + (self.background * self.final_transmittance[:, None])[:, None, :]


@dataclass
class SplatGradients:
    opacity: np.ndarray
    color: np.ndarray
    scale: np.ndarray
    position: np.ndarray


def _apply_cap(splats: Splats, options: RenderOptions):
    index = np.arange(len(splats))
    if options.render_cap is not None and len(splats) > options.render_cap:
        rng = np.random.default_rng(options.cap_seed)
        index = np.sort(rng.choice(len(splats), size=options.render_cap, replace=False))
        logger.warning(
            "render cap exceeded, keeping a seeded subset",
            extra={"primitives": len(splats), "render_cap": options.render_cap},
        )
        splats = splats.take(index)
    return splats, index


def _footprint_pairs(projection: Projection, camera: Camera, options: RenderOptions):
    """Every (primitive, pixel) pair whose pixel centre lies inside the footprint circle."""
    ids = np.flatnonzero(projection.visible)
    if len(ids) == 0:
        return ids, np.zeros(0, dtype=np.int64), np.zeros(0), np.zeros(0)
    u, v = projection.uv[ids, 0], projection.uv[ids, 1]
    radius = options.footprint_sigmas * projection.sigma[ids]
    x0 = np.clip(np.ceil(u - radius - 0.5), 0, camera.width).astype(np.int64)
    x1 = np.clip(np.floor(u + radius - 0.5), -1, camera.width - 1).astype(np.int64)
    y0 = np.clip(np.ceil(v - radius - 0.5), 0, camera.height).astype(np.int64)
    y1 = np.clip(np.floor(v + radius - 0.5), -1, camera.height - 1).astype(np.int64)
    nx = np.maximum(x1 - x0 + 1, 0)
    ny = np.maximum(y1 - y0 + 1, 0)
    per = nx * ny
    owner = np.repeat(np.arange(len(ids)), per)
    local = np.arange(per.sum()) - np.repeat(np.cumsum(per) - per, per)
    px = x0[owner] + local % nx[owner]
    py = y0[owner] + local // np.maximum(nx[owner], 1)
    dx = px + 0.5 - u[owner]
    dy = py + 0.5 - v[owner]
    inside = dx * dx + dy * dy <= radius[owner] ** 2
    owner, px, py, dx, dy = owner[inside], px[inside], py[inside], dx[inside], dy[inside]
    return ids[owner], py * camera.width + px, dx, dy


def render(splats: Splats, camera: Camera, background=(0.0, 0.0, 0.0),
           options: RenderOptions = RenderOptions()):
    """Composite ``splats`` into an (H, W, 3) image; returns ``(image, graph)``."""
    background = np.broadcast_to(np.asarray(background, dtype=np.float64), (3,)).copy()
    count = len(splats)
    splats, index = _apply_cap(splats, options)
    projection = project(camera, splats.positions, splats.scales, options)
    hw = camera.width * camera.height

    gid, pixel, dx, dy = _footprint_pairs(projection, camera, options)
    # depth rank with primitive id as the tie-break
    rank = np.empty(len(splats), dtype=np.int64)
    rank[np.lexsort((np.arange(len(splats)), projection.depth))] = np.arange(len(splats))
    order = np.lexsort((rank[gid], pixel))
    gid, pixel, dx, dy = gid[order], pixel[order], dx[order], dy[order]

    counts = np.bincount(pixel, minlength=hw)
    k_max = int(counts.max()) if len(pixel) else 0
    slot = np.arange(len(pixel)) - np.repeat(np.cumsum(counts) - counts, counts)

    sigma = projection.sigma[gid]
    gauss_flat = np.exp(-(dx * dx + dy * dy) / (2.0 * sigma * sigma))
    raw_alpha = splats.opacities[gid] * gauss_flat

    def padded(values, fill=0.0, dtype=np.float64):
        out = np.full((hw, k_max), fill, dtype=dtype)
        out[pixel, slot] = values
        return out

    alpha = padded(np.minimum(raw_alpha, options.alpha_max))
    clamped = padded(raw_alpha > options.alpha_max, False, bool)
    colors = np.zeros((hw, k_max, 3))
    colors[pixel, slot] = splats.colors[gid]
    survive = np.cumprod(1.0 - alpha, axis=1)
    transmittance = np.concatenate([np.ones((hw, 1)), survive[:, :-1]], axis=1)[:, :k_max]
    final = survive[:, -1] if k_max else np.ones(hw)

    flat = np.einsum("pk,pkc->pc", alpha * transmittance, colors) + final[:, None] * background
    image = flat.reshape(camera.height, camera.width, 3)
    graph = RenderGraph(
        camera=camera,
        options=options,
        background=background,
        splats=splats,
        index=index,
        count=count,
        projection=projection,
        gid=padded(gid, -1, np.int64),
        alpha=alpha,
        gauss=padded(gauss_flat),
        clamped=clamped,
        dx=padded(dx),
        dy=padded(dy),
        transmittance=transmittance,
        final_transmittance=final,
        image=image,
        colors=colors,
    )
    return image, graph


def _alpha_adjoint(graph: RenderGraph, g):
    """dL/d alpha_k per slot and the per-slot colour adjoint, g is (HW, 3)."""
    t = graph.transmittance
    dl_dalpha = np.einsum("pkc,pc->pk", graph.colors * t[..., None]
                          - graph.suffix() / (1.0 - graph.alpha)[..., None], g)
    return dl_dalpha


def _reduce(graph: RenderGraph, per_slot, width=None):
    valid = graph.gid >= 0
    ids = graph.gid[valid]
    n = len(graph.splats)
    if width is None:
        return np.bincount(ids, weights=per_slot[valid], minlength=n)
    values = per_slot[valid]
    return np.stack([np.bincount(ids, weights=values[:, c], minlength=n) for c in range(width)], axis=1)


def _scatter(graph: RenderGraph, values):
    out = np.zeros((graph.count,) + values.shape[1:])
    out[graph.index] = values
    return out


def backward(graph: RenderGraph, dl_dimage) -> SplatGradients:
    """Exact reverse-mode derivatives of the compositing expression."""
    g = np.asarray(dl_dimage, dtype=np.float64).reshape(-1, 3)
    valid = graph.gid >= 0
    dl_dalpha = np.where(valid, _alpha_adjoint(graph, g), 0.0)
    live = valid & ~graph.clamped
    dl_dalpha_live = np.where(live, dl_dalpha, 0.0)

    d_color = _reduce(graph, (graph.alpha * graph.transmittance)[..., None] * g[:, None, :], 3)
    d_opacity = _reduce(graph, dl_dalpha_live * graph.gauss)

    proj = graph.projection
    safe_gid = np.where(valid, graph.gid, 0)
    sigma = proj.sigma[safe_gid]
    alpha = graph.alpha
    d_u = _reduce(graph, dl_dalpha_live * alpha * graph.dx / sigma ** 2)
    d_v = _reduce(graph, dl_dalpha_live * alpha * graph.dy / sigma ** 2)
    d2 = graph.dx ** 2 + graph.dy ** 2
    d_sigma = _reduce(graph, dl_dalpha_live * alpha * d2 / sigma ** 3)

    cam = graph.camera
    z = np.where(proj.visible, proj.depth, 1.0)
    sigma_all = np.where(proj.visible, proj.sigma, 1.0)
    d_sigma_raw = d_sigma * proj.sigma_raw / sigma_all
    scales = graph.splats.scales
    d_scale = d_sigma_raw * cam.focal / z
    d_cam = np.zeros((len(graph.splats), 3))
    d_cam[:, 0] = d_u * cam.focal / z
    d_cam[:, 1] = d_v * cam.focal / z
    d_cam[:, 2] = (
        -d_u * cam.focal * proj.cam[:, 0] / z ** 2
        - d_v * cam.focal * proj.cam[:, 1] / z ** 2
        - d_sigma_raw * scales * cam.focal / z ** 2
    )
    d_cam[~proj.visible] = 0.0
    d_scale = np.where(proj.visible, d_scale, 0.0)
    return SplatGradients(
        opacity=_scatter(graph, d_opacity),
        color=_scatter(graph, d_color),
        scale=_scatter(graph, d_scale),
        position=_scatter(graph, d_cam @ cam.rotation),
    )


def opacity_sensitivity(graph: RenderGraph, dl_dimage=None):
    """alpha_i * dI/d alpha_i, which equals I - I_{-i} exactly.

    Without an adjoint returns per-primitive images (P, H, W, 3); with one,
    the scalar weights ``w_i = sum_pixels dL/dI . (I - I_{-i})`` of shape (P,).
    """
    valid = graph.gid >= 0
    per_slot = graph.alpha[..., None] * (
        graph.colors * graph.transmittance[..., None] - graph.suffix() / (1.0 - graph.alpha)[..., None]
    )
    per_slot = np.where(valid[..., None], per_slot, 0.0)
    if dl_dimage is not None:
        g = np.asarray(dl_dimage, dtype=np.float64).reshape(-1, 3)
        return _scatter(graph, _reduce(graph, np.einsum("pkc,pc->pk", per_slot, g)))
    h, w = graph.shape
    images = np.zeros((graph.count, h * w, 3))
    pixel = np.broadcast_to(np.arange(h * w)[:, None], graph.gid.shape)
    np.add.at(images, (graph.index[graph.gid[valid]], pixel[valid]), per_slot[valid])
    return images.reshape(graph.count, h, w, 3)


def leave_one_out_oracle(splats: Splats, camera: Camera, i: int, background=(0.0, 0.0, 0.0),
                         options: RenderOptions = RenderOptions()):
    """The image rendered with primitive ``i`` removed."""
    if not 0 <= i < len(splats):
        raise IndexError(f"primitive {i} out of range")
    image, _ = render(splats.without(i), camera, background, options)
    return image


@dataclass(frozen=True)
class Kernel1D:
    amplitude: float = 1.0
    width: float = 0.05

    def __call__(self, grid, centers):
        diff = np.asarray(grid)[None, :] - np.asarray(centers, dtype=np.float64).reshape(-1)[:, None]
        return self.amplitude * np.exp(-diff ** 2 / (2.0 * self.width ** 2))

    def center_derivative(self, grid, centers):
        diff = np.asarray(grid)[None, :] - np.asarray(centers, dtype=np.float64).reshape(-1)[:, None]
        return self(grid, centers) * diff / self.width ** 2


def additive_render_1d(centers, kernel: Kernel1D, grid):
    """F(grid) = sum_i f(grid - centers_i): compositing replaced by summation."""
    grid = np.asarray(grid, dtype=np.float64)
    centers = np.asarray(centers, dtype=np.float64).reshape(-1)
    if len(centers) == 0:
        return np.zeros_like(grid)
    return kernel(grid, centers).sum(axis=0)
