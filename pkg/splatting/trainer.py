"""Stochastic training of the pyramid and attribute table, primitive extraction
and the fixed-set refinement phase."""
from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional

import numpy as np
from django.conf import settings
from tqdm import tqdm

from probability.attributes import (
    ActivationConfig,
    AttributeTable,
    COLOR_OFFSET,
    SH_C1,
    default_capacity,
    sh_basis,
    sigmoid,
    softplus,
    softplus_inverse,
)
from probability.pyramid import HashedProbabilityPyramid, PyramidConfig, PyramidGradient
from probability.sampler import (
    NOISE_CLIP,
    ContractionConfig,
    DefensiveSchedule,
    SampleBatch,
    defensive_noise,
    from_world,
    jacobian_scale,
    round_and_dedupe,
    sample_batch,
    to_world,
    ungrouped,
)

from .estimators import (
    EstimatorConfigError,
    EstimatorKind,
    grad_cv,
    grad_joint,
    grad_pathwise,
    position_adjoints,
)
from .losses import LossConfig, loss_and_adjoint, metrics_psnr_ssim, psnr
from .renderer import Camera, RenderOptions, Splats, backward, render
from .scenes import Dataset

logger = logging.getLogger(__name__)

TRAIN_ESTIMATORS = ("control_variate", "joint_score", "pathwise")
METRIC_COLUMNS = ("iteration", "loss", "psnr", "ssim", "unique_count", "sigma_noise", "heldout_psnr")
EXPORT_WIDTH = 17

# independent random streams per iteration
SAMPLE_STREAM = 0
NOISE_STREAM = 1
VIEW_STREAM = 2
EVAL_STREAM = 3
REFINE_STREAM = 4


class TrainingDiverged(RuntimeError):
    """Loss became non-finite; ``dump_path`` holds the state at that iteration."""

    def __init__(self, message: str, dump_path=None):
        super().__init__(message)
        self.dump_path = dump_path


@dataclass(frozen=True)
class TrainConfig:
    samples: int = 20000
    iterations: int = 5000
    refine_iters: int = 500
    min_unique: Optional[int] = None  # half of ``samples`` when unset
    max_topups: int = 4
    lr_logits: float = 0.02
    lr_opacity: float = 0.05
    lr_scale: float = 5e-3
    lr_color: float = 2.5e-3
    lr_position: float = 1.6e-4
    refine_lr_opacity: float = 5e-3
    lr_decay: float = 1.0  # per-iteration multiplier
    background_max: float = 0.5
    estimator: str = "control_variate"
    duplicate_policy: str = "exact"
    rounding: bool = True
    defensive: bool = True
    noise_sigma0: float = 2e-3
    noise_fraction: float = 0.2
    noise_anneal_iters: int = 20000
    independent_levels: bool = False
    freeze_positions: bool = True
    capacity: Optional[int] = None
    eval_every: int = 250
    eval_samples: Optional[int] = None
    checkpoint_every: int = 1000
    threads: Optional[int] = None
    seed: int = 0

    def __post_init__(self):
        if self.samples < 1:
            raise ValueError("samples must be >= 1")
        if self.iterations < 0 or self.refine_iters < 0:
            raise ValueError("iteration counts must be >= 0")
        if self.min_unique is not None and not 0 <= self.min_unique <= self.samples:
            raise ValueError(f"min_unique must lie in [0, samples={self.samples}]")
        if self.estimator not in TRAIN_ESTIMATORS:
            raise EstimatorConfigError(f"unknown training estimator {self.estimator!r}")
        if self.estimator == "pathwise" and self.rounding:
            raise EstimatorConfigError("the pathwise estimator needs rounding = false")
        if not 0.0 <= self.background_max <= 1.0:
            raise ValueError("background_max must lie in [0, 1]")
        if not 0.0 < self.lr_decay <= 1.0:
            raise ValueError("lr_decay must lie in (0, 1]")

    @property
    def unique_floor(self) -> int:
        return self.samples // 2 if self.min_unique is None else self.min_unique

    @property
    def schedule(self) -> DefensiveSchedule:
        return DefensiveSchedule(self.noise_sigma0, self.noise_fraction, self.noise_anneal_iters)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


class Adam:
    """Adam moments keyed by parameter-group name."""

    def __init__(self, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-15):
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = {}
        self.v = {}
        self.t = {}

    def step(self, name: str, grad, lr):
        """The update to add to the parameter (``lr`` may broadcast per column)."""
        grad = np.asarray(grad, dtype=np.float64)
        m = self.m.setdefault(name, np.zeros_like(grad))
        v = self.v.setdefault(name, np.zeros_like(grad))
        t = self.t[name] = self.t.get(name, 0) + 1
        m *= self.beta1
        m += (1.0 - self.beta1) * grad
        v *= self.beta2
        v += (1.0 - self.beta2) * grad * grad
        m_hat = m / (1.0 - self.beta1 ** t)
        v_hat = v / (1.0 - self.beta2 ** t)
        return -np.asarray(lr) * m_hat / (np.sqrt(v_hat) + self.eps)

    def save(self, path):
        arrays = {}
        for name in self.m:
            arrays[f"m/{name}"] = self.m[name]
            arrays[f"v/{name}"] = self.v[name]
            arrays[f"t/{name}"] = np.array(self.t[name])
        arrays["hyper"] = np.array([self.beta1, self.beta2, self.eps])
        np.savez(path, **arrays)

    @classmethod
    def load(cls, path) -> "Adam":
        with np.load(path) as data:
            beta1, beta2, eps = data["hyper"]
            adam = cls(float(beta1), float(beta2), float(eps))
            for key in data.files:
                kind, _, name = key.partition("/")
                if kind == "m":
                    adam.m[name] = data[key].copy()
                elif kind == "v":
                    adam.v[name] = data[key].copy()
                elif kind == "t":
                    adam.t[name] = int(data[key])
        return adam


@dataclass
class TrainState:
    pyramid: HashedProbabilityPyramid
    table: AttributeTable
    config: TrainConfig
    loss_config: LossConfig = LossConfig()
    contraction: ContractionConfig = ContractionConfig()
    render_options: RenderOptions = RenderOptions()
    optimizer: Adam = field(default_factory=Adam)
    iteration: int = 0
    metrics: List[dict] = field(default_factory=list)


def initial_state(pyramid_config: PyramidConfig, config: TrainConfig, loss_config: LossConfig = LossConfig(),
                  activation: ActivationConfig = ActivationConfig(),
                  contraction: ContractionConfig = ContractionConfig(),
                  render_options: RenderOptions = RenderOptions()) -> TrainState:
    """Uniform pyramid and a zeroed attribute table."""
    capacity = config.capacity or default_capacity(config.samples, pyramid_config.finest_bin_count)
    table = AttributeTable(pyramid_config.dims, pyramid_config.finest_resolution, capacity, activation)
    return TrainState(HashedProbabilityPyramid(pyramid_config), table, config, loss_config, contraction,
                      render_options)


def stream_seed(seed: int, stream: int, iteration: int) -> int:
    return int(np.random.SeedSequence([seed, stream, iteration]).generate_state(1, dtype=np.uint64)[0])


def training_view(dataset: Dataset, seed: int, iteration: int) -> int:
    """Seeded shuffle of the training views, reshuffled every pass."""
    views = dataset.train_views
    if not views:
        raise ValueError("dataset has no training views")
    epoch, offset = divmod(iteration, len(views))
    order = np.random.default_rng([seed, VIEW_STREAM, epoch]).permutation(views)
    return int(order[offset])


# Sampling --------------------------------------------------------------------

def draw_samples(state: TrainState, iteration: int, samples: Optional[int] = None, stream: int = SAMPLE_STREAM):
    """Sample paths, topped up while too few distinct bins were drawn.

    Returns the batch and its de-duplication. Without rounding every sample
    stays its own primitive at its continuous position.
    """
    cfg = state.config
    samples = samples or cfg.samples
    masses = state.pyramid.masses()
    seed = stream_seed(cfg.seed, stream, iteration)
    batch = sample_batch(state.pyramid, samples, seed, cfg.independent_levels, cfg.threads, masses)
    if not cfg.rounding:
        return batch, ungrouped(batch)
    unique = round_and_dedupe(batch)
    floor = min(cfg.unique_floor, state.pyramid.config.finest_bin_count)
    topups = 0
    while len(unique) < floor and topups < cfg.max_topups:
        topups += 1
        extra = sample_batch(state.pyramid, samples, seed + topups, cfg.independent_levels, cfg.threads, masses)
        batch = SampleBatch.concatenate([batch, extra])
        unique = round_and_dedupe(batch)
    if topups:
        logger.warning(
            "resampled to reach the unique-primitive floor",
            extra={"iteration": iteration, "topups": topups, "unique": len(unique), "floor": floor},
        )
    return batch, unique


@dataclass
class Frame:
    """One iteration's primitives as rendered."""

    bins: np.ndarray
    positions: np.ndarray  # unit cube, after defensive noise
    attrs: object
    splats: Splats
    jac_scale: np.ndarray


def build_frame(state: TrainState, bins, positions, camera: Camera) -> Frame:
    world = to_world(positions, state.contraction)
    jac_scale = jacobian_scale(2.0 * positions - 1.0, state.contraction)
    attrs = state.table.query_many(bins, camera.view_dirs(world))
    splats = Splats(world, attrs.opacity, attrs.scale * jac_scale, attrs.color)
    return Frame(bins, positions, attrs, splats, jac_scale)


def _frustum_regularizer(result, graph, count):
    """Scatter the frustum primitives' regulariser terms back to all primitives."""
    visible = graph.visible_ids
    d_opacity = np.zeros(count)
    d_scale = np.zeros(count)
    d_sh = np.zeros((count, 4, 3))
    share = np.zeros(count)
    d_opacity[visible] = result.d_opacity
    d_scale[visible] = result.d_scale
    d_sh[visible] = result.d_sh
    share[visible] = result.regularizer
    return d_opacity, d_scale, d_sh, share


def _image_loss(attrs, graph, image, target, loss_config):
    visible = graph.visible_ids
    return loss_and_adjoint(image, target, attrs.opacity[visible], attrs.scale[visible],
                            attrs.sh_coeffs[visible], loss_config)


# Training loop ---------------------------------------------------------------

def train_step(state: TrainState, dataset: Dataset, output_dir=None) -> dict:
    """One probabilistic iteration; updates ``state`` in place and returns its metrics row.

    Render adjoints are taken at the defensively noised positions. The pathwise
    estimator chains them through the noise-free sample Jacobian, which is exact
    for the additive perturbation; clipped coordinates contribute nothing.
    """
    cfg = state.config
    it = state.iteration
    rng = np.random.default_rng([cfg.seed, NOISE_STREAM, it])
    view = training_view(dataset, cfg.seed, it)
    camera = dataset.cameras[view]
    background = rng.uniform(0.0, cfg.background_max, 3)
    target = dataset.composite(view, background)

    batch, unique = draw_samples(state, it)
    bins, positions = unique.bins, unique.positions
    sigma = cfg.schedule.sigma(it) if cfg.defensive else 0.0
    if cfg.defensive:
        positions = defensive_noise(positions, it, cfg.schedule, rng)
    frame = build_frame(state, bins, positions, camera)
    image, graph = render(frame.splats, camera, background, state.render_options)
    result = _image_loss(frame.attrs, graph, image, target, state.loss_config)
    if not math.isfinite(result.value):
        dump = save_checkpoint(state, Path(output_dir or settings.HPP_OUTPUT_DIR), prefix="diverged")
        logger.error("non-finite loss", extra={"iteration": it, "dump": str(dump)})
        raise TrainingDiverged(f"non-finite loss at iteration {it}", dump)

    grads = backward(graph, result.dl_dimage)
    reg_opacity, reg_scale, reg_sh, reg_share = _frustum_regularizer(result, graph, len(frame.bins))
    d_raw = np.zeros((len(frame.bins), state.table.entries.shape[1]))
    d_raw[:, 2:] = reg_sh.reshape(len(frame.bins), -1)
    table_grad = state.table.backward(
        frame.attrs,
        d_opacity=grads.opacity + reg_opacity,
        d_scale=grads.scale * frame.jac_scale + reg_scale,
        d_color=grads.color,
        d_raw=d_raw,
    )

    masses = state.pyramid.masses()
    kind = EstimatorKind(cfg.estimator)
    if kind == EstimatorKind.CONTROL_VARIATE:
        logit_grad = grad_cv(state.pyramid, batch, unique, graph, result.dl_dimage, reg_share,
                             cfg.duplicate_policy, masses=masses).gradient
    elif kind == EstimatorKind.JOINT_SCORE:
        logit_grad = grad_joint(state.pyramid, batch, result.value, masses=masses).gradient
    else:
        # Noise is additive, so d(mu + eps)/dlogits = dmu/dlogits except where the clip is active.
        rendered_sh = frame.attrs.sh_coeffs * state.table.activation.sh_weights[None, :, None]
        d_world = grads.position + view_dir_adjoint(camera, frame.splats.positions, rendered_sh, grads.color)
        adj = position_adjoints(frame.positions, d_world, grads.scale, frame.attrs.scale, state.contraction)
        adj[(frame.positions <= 0.0) | (frame.positions >= NOISE_CLIP)] = 0.0
        logit_grad = grad_pathwise(state.pyramid, batch, adj, cfg.rounding, masses=masses).gradient

    decay = cfg.lr_decay ** it
    delta = [state.optimizer.step(f"logits_{level}", g, cfg.lr_logits * decay)
             for level, g in enumerate(logit_grad.arrays)]
    state.pyramid.apply_update(PyramidGradient(delta))
    column_lr = np.array([cfg.lr_opacity, cfg.lr_scale] + [cfg.lr_color] * (state.table.entries.shape[1] - 2))
    state.table.entries += state.optimizer.step("attributes", table_grad, column_lr * decay)

    scores = metrics_psnr_ssim(image, target)
    state.iteration += 1
    return {
        "iteration": it,
        "loss": result.value,
        "psnr": scores["psnr"],
        "ssim": scores["ssim"],
        "unique_count": len(frame.bins),
        "sigma_noise": sigma,
        "heldout_psnr": "",
    }


def train(state: TrainState, dataset: Dataset, output_dir=None, progress: bool = False) -> TrainState:
    """Run the probabilistic phase up to ``state.config.iterations``.

    Checkpoints land in ``output_dir`` every ``checkpoint_every`` iterations
    and once at the end.
    """
    cfg = state.config
    output_dir = Path(output_dir) if output_dir is not None else None
    start = state.iteration
    logger.info("training", extra={"start": start, "iterations": cfg.iterations, "estimator": cfg.estimator})
    bar = tqdm(total=max(cfg.iterations - start, 0), disable=not progress, desc="train")
    while state.iteration < cfg.iterations:
        row = train_step(state, dataset, output_dir)
        done = state.iteration
        if cfg.eval_every and (done % cfg.eval_every == 0 or done == cfg.iterations):
            row["heldout_psnr"] = evaluate(state, dataset)["psnr"]
            logger.info(
                "iteration %d loss %.5f heldout psnr %.2f",
                row["iteration"], row["loss"], row["heldout_psnr"],
                extra={"unique": row["unique_count"], "sigma_noise": row["sigma_noise"]},
            )
        state.metrics.append(row)
        if output_dir is not None and cfg.checkpoint_every and done % cfg.checkpoint_every == 0:
            save_checkpoint(state, output_dir)
        bar.update(1)
    bar.close()
    if output_dir is not None:
        save_checkpoint(state, output_dir)
        write_metrics(state.metrics, output_dir / "metrics.csv")
    return state


# Extraction, evaluation and export -------------------------------------------------

@dataclass
class Primitives:
    """A flat Gaussian set in world space; ``sh`` already carries the degree weights."""

    positions: np.ndarray
    opacities: np.ndarray
    scales: np.ndarray
    sh: np.ndarray  # (P, 4, 3)

    def __len__(self):
        return len(self.positions)

    def colors(self, camera: Camera) -> np.ndarray:
        basis = sh_basis(camera.view_dirs(self.positions))
        return COLOR_OFFSET + np.einsum("nb,nbc->nc", basis, self.sh)

    def splats(self, camera: Camera) -> Splats:
        return Splats(self.positions, self.opacities, self.scales, self.colors(camera))

    def copy(self) -> "Primitives":
        return Primitives(self.positions.copy(), self.opacities.copy(), self.scales.copy(), self.sh.copy())


def extract_primitives(state: TrainState, samples: Optional[int] = None, seed: Optional[int] = None) -> Primitives:
    """Sample, round, de-duplicate and query the attributes."""
    samples = samples or state.config.samples
    if samples < state.config.unique_floor:
        raise ValueError(f"{samples} samples is below the unique-primitive floor {state.config.unique_floor}")
    seed = stream_seed(state.config.seed, EVAL_STREAM, state.iteration) if seed is None else seed
    batch = sample_batch(state.pyramid, samples, seed, state.config.independent_levels, state.config.threads)
    unique = round_and_dedupe(batch)
    world = to_world(unique.positions, state.contraction)
    attrs = state.table.query_many(unique.bins)
    weights = state.table.activation.sh_weights
    return Primitives(
        positions=world,
        opacities=attrs.opacity,
        scales=attrs.scale * jacobian_scale(2.0 * unique.positions - 1.0, state.contraction),
        sh=attrs.sh_coeffs * weights[None, :, None],
    )


def evaluate_primitives(primitives: Primitives, dataset: Dataset, views=None,
                        options: RenderOptions = RenderOptions()) -> dict:
    """Mean PSNR/SSIM against the ground truth over black."""
    views = dataset.heldout_views if views is None else list(views)
    if not views:
        return {"psnr": float("nan"), "ssim": float("nan")}
    psnrs, ssims = [], []
    for view in views:
        camera = dataset.cameras[view]
        image, _ = render(primitives.splats(camera), camera, np.zeros(3), options)
        scores = metrics_psnr_ssim(image, dataset.images[view])
        psnrs.append(scores["psnr"])
        ssims.append(scores["ssim"])
    return {"psnr": float(np.mean(psnrs)), "ssim": float(np.mean(ssims))}


def evaluate(state: TrainState, dataset: Dataset, views=None) -> dict:
    samples = state.config.eval_samples or state.config.samples
    samples = max(samples, state.config.unique_floor)
    return evaluate_primitives(extract_primitives(state, samples), dataset, views, state.render_options)


def occupied_mass(pyramid: HashedProbabilityPyramid, world_points, contraction: ContractionConfig = ContractionConfig()):
    """Total probability of the finest bins containing the given world points."""
    bins = pyramid.finest_bins_of(from_world(world_points, contraction))
    keys = np.unique(bins, axis=0)
    return float(pyramid.bin_masses(keys).sum())


def write_export(path, primitives: Primitives):
    """One primitive per line: position, opacity, scale, 12 SH coefficients."""
    rows = np.concatenate(
        [primitives.positions, primitives.opacities[:, None], primitives.scales[:, None],
         primitives.sh.reshape(len(primitives), -1)],
        axis=1,
    )
    with open(path, "w") as handle:
        for row in rows:
            handle.write(" ".join(f"{v:.17g}" for v in row) + "\n")


def read_export(path) -> Primitives:
    rows = [list(map(float, line.split())) for line in Path(path).read_text().splitlines() if line.strip()]
    if not rows:
        raise ValueError(f"{path}: no primitives")
    data = np.array(rows)
    if data.shape[1] != EXPORT_WIDTH:
        raise ValueError(f"{path}: expected {EXPORT_WIDTH} numbers per primitive, found {data.shape[1]}")
    return Primitives(data[:, 0:3], data[:, 3], data[:, 4], data[:, 5:].reshape(-1, 4, 3))


# Refinement -----------------------------------------------------------------

@dataclass
class RefineParameters:
    """Free parameters of the refinement phase.

    ``sh`` is in attribute-table units, the same coefficients the colour
    regulariser sees during training; primitives render ``sh * sh_weights``.
    """

    positions: np.ndarray
    raw_opacity: np.ndarray
    raw_scale: np.ndarray
    sh: np.ndarray

    @classmethod
    def from_primitives(cls, primitives: Primitives, sh_weights) -> "RefineParameters":
        weights = np.asarray(sh_weights, dtype=np.float64)[None, :, None]
        opacity = np.clip(primitives.opacities, 1e-6, 1 - 1e-6)
        return cls(
            positions=primitives.positions.copy(),
            raw_opacity=np.log(opacity / (1.0 - opacity)),
            raw_scale=softplus_inverse(np.maximum(primitives.scales, 1e-12)),
            sh=np.divide(primitives.sh, weights, out=np.zeros_like(primitives.sh), where=weights > 0),
        )

    def primitives(self, sh_weights) -> Primitives:
        weights = np.asarray(sh_weights, dtype=np.float64)[None, :, None]
        return Primitives(self.positions.copy(), sigmoid(self.raw_opacity), softplus(self.raw_scale),
                          self.sh * weights)


def view_dir_adjoint(camera: Camera, positions, sh, d_color):
    """dL/dposition through the view-dependent colour; ``sh`` are rendered coefficients."""
    offset = np.asarray(positions, dtype=np.float64) - camera.center
    dist = np.linalg.norm(offset, axis=-1, keepdims=True)
    dist = np.where(dist > 0, dist, 1.0)
    dirs = offset / dist
    # colour = 0.5 + C0 sh0 + C1 (-y sh1 + z sh2 - x sh3)
    d_dir = SH_C1 * np.stack(
        [
            -np.einsum("nc,nc->n", d_color, sh[:, 3]),
            -np.einsum("nc,nc->n", d_color, sh[:, 1]),
            np.einsum("nc,nc->n", d_color, sh[:, 2]),
        ],
        axis=-1,
    )
    radial = np.einsum("nk,nk->n", d_dir, dirs)[:, None]
    return (d_dir - radial * dirs) / dist


def refine_objective(params: RefineParameters, camera: Camera, background, target, sh_weights,
                     loss_config: LossConfig = LossConfig(), options: RenderOptions = RenderOptions()):
    """Loss of one view and its gradient with respect to every field of ``params``.

    Returns ``(loss_result, image, gradient)``.
    """
    primitives = params.primitives(sh_weights)
    weights = np.asarray(sh_weights, dtype=np.float64)[None, :, None]
    image, graph = render(primitives.splats(camera), camera, background, options)
    visible = graph.visible_ids
    loss = loss_and_adjoint(image, target, primitives.opacities[visible], primitives.scales[visible],
                            params.sh[visible], loss_config)
    grads = backward(graph, loss.dl_dimage)
    d_opacity = grads.opacity.copy()
    d_scale = grads.scale.copy()
    basis = sh_basis(camera.view_dirs(primitives.positions))
    d_sh = np.einsum("nb,nc->nbc", basis, grads.color) * weights
    d_opacity[visible] += loss.d_opacity
    d_scale[visible] += loss.d_scale
    d_sh[visible] += loss.d_sh
    gradient = RefineParameters(
        positions=grads.position + view_dir_adjoint(camera, primitives.positions, primitives.sh, grads.color),
        raw_opacity=d_opacity * primitives.opacities * (1.0 - primitives.opacities),
        raw_scale=d_scale * sigmoid(params.raw_scale),
        sh=d_sh,
    )
    return loss, image, gradient


def refine(primitives: Primitives, dataset: Dataset, config: TrainConfig, loss_config: LossConfig = LossConfig(),
           iterations: Optional[int] = None, options: RenderOptions = RenderOptions(), progress: bool = False,
           activation: ActivationConfig = ActivationConfig()):
    """Optimise a fixed primitive set; no densification or pruning.

    Positions stay put unless ``config.freeze_positions`` is off. The refined
    set is only kept when its held-out PSNR is no lower than the input's.
    Returns the primitives and the metrics rows.
    """
    iterations = config.refine_iters if iterations is None else iterations
    if iterations == 0 or len(primitives) == 0:
        return primitives.copy(), []
    sh_weights = activation.sh_weights
    params = RefineParameters.from_primitives(primitives, sh_weights)
    optimizer = Adam()
    metrics = []
    bar = tqdm(total=iterations, disable=not progress, desc="refine")
    for it in range(iterations):
        rng = np.random.default_rng([config.seed, REFINE_STREAM, it])
        view = training_view(dataset, config.seed + REFINE_STREAM, it)
        camera = dataset.cameras[view]
        background = rng.uniform(0.0, config.background_max, 3)
        target = dataset.composite(view, background)

        loss, image, grad = refine_objective(params, camera, background, target, sh_weights, loss_config, options)
        params.raw_opacity += optimizer.step("opacity", grad.raw_opacity, config.refine_lr_opacity)
        params.raw_scale += optimizer.step("scale", grad.raw_scale, config.lr_scale)
        params.sh += optimizer.step("sh", grad.sh, config.lr_color)
        if not config.freeze_positions:
            params.positions += optimizer.step("position", grad.positions, config.lr_position)

        metrics.append({"iteration": it, "loss": loss.value, "psnr": psnr(image, target), "ssim": "",
                        "unique_count": len(primitives), "sigma_noise": 0.0, "heldout_psnr": ""})
        bar.update(1)
    bar.close()

    result = params.primitives(sh_weights)
    if not dataset.heldout_views:
        return result, metrics
    before = evaluate_primitives(primitives, dataset, options=options)["psnr"]
    after = evaluate_primitives(result, dataset, options=options)["psnr"]
    logger.info("refinement held-out psnr %.2f -> %.2f", before, after,
                extra={"iterations": iterations, "primitives": len(primitives)})
    if after < before:
        logger.warning("refinement lowered held-out psnr, keeping the unrefined primitives",
                       extra={"before": before, "after": after})
        result = primitives.copy()
        after = before
    metrics[-1]["heldout_psnr"] = after
    return result, metrics


# Checkpoints ----------------------------------------------------------------

def write_metrics(rows, path):
    with open(path, "w", newline="") as handle:
        writer = csv.DictWriter(handle, fieldnames=METRIC_COLUMNS)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: (f"{v:.17g}" if isinstance(v, float) else v) for k, v in row.items()})


def read_metrics(path) -> List[dict]:
    with open(path, newline="") as handle:
        rows = list(csv.DictReader(handle))
    for row in rows:
        row["iteration"] = int(row["iteration"])
        row["unique_count"] = int(row["unique_count"])
        for key in ("loss", "psnr", "ssim", "sigma_noise", "heldout_psnr"):
            row[key] = float(row[key]) if row[key] != "" else ""
    return rows


def save_checkpoint(state: TrainState, output_dir, prefix: str = "ckpt") -> Path:
    directory = Path(output_dir) / f"{prefix}_{state.iteration}"
    directory.mkdir(parents=True, exist_ok=True)
    state.pyramid.save(directory / "pyramid.hpp")
    state.table.save(directory / "attributes.hpa")
    state.optimizer.save(directory / "optimizer.npz")
    write_metrics(state.metrics, directory / "metrics.csv")
    meta = {
        "iteration": state.iteration,
        "train": state.config.to_dict(),
        "loss": state.loss_config.to_dict(),
        "contraction": {"a": state.contraction.a},
        "render": state.render_options.to_dict(),
    }
    (directory / "state.json").write_text(json.dumps(meta, indent=2, sort_keys=True))
    logger.info("checkpoint written", extra={"path": str(directory), "iteration": state.iteration})
    return directory


def load_checkpoint(directory) -> TrainState:
    directory = Path(directory)
    meta_path = directory / "state.json"
    if not meta_path.exists():
        raise FileNotFoundError(f"{directory} is not a checkpoint (state.json missing)")
    meta = json.loads(meta_path.read_text())
    metrics_path = directory / "metrics.csv"
    metrics = read_metrics(metrics_path) if metrics_path.exists() else []
    return TrainState(
        pyramid=HashedProbabilityPyramid.load(directory / "pyramid.hpp"),
        table=AttributeTable.load(directory / "attributes.hpa"),
        config=TrainConfig(**meta["train"]),
        loss_config=LossConfig(**meta["loss"]),
        contraction=ContractionConfig(**meta["contraction"]),
        render_options=RenderOptions(**meta["render"]),
        optimizer=Adam.load(directory / "optimizer.npz"),
        iteration=int(meta["iteration"]),
        metrics=[row for row in metrics if row["iteration"] < int(meta["iteration"])],
    )
