"""Gradient estimators for the pyramid logits and the variance benchmark.

All estimators work on the loss: image-level terms are contracted with
dL/dI before they meet the score, so the control-variate weight of a
primitive is the scalar ``dL/dI . (I - I_{-i})``.
"""
from __future__ import annotations

import csv
import enum
import itertools
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, List, Optional, Sequence

import numpy as np

from probability.attributes import ActivationConfig, AttributeTable
from probability.pyramid import HashedProbabilityPyramid, PyramidConfig, PyramidGradient, delinearize
from probability.sampler import (
    ContractionConfig,
    SampleBatch,
    UniqueSamples,
    contract_jacobian,
    jacobian_scale,
    jacobian_scale_grad,
    pathwise_vjp,
    round_and_dedupe,
    sample_batch,
    to_world,
    worker_count,
)

from .losses import LossConfig, loss_and_adjoint
from .renderer import (
    Camera,
    Kernel1D,
    RenderGraph,
    RenderOptions,
    Splats,
    additive_render_1d,
    backward,
    opacity_sensitivity,
    render,
)

logger = logging.getLogger(__name__)

MAX_ENUMERATION = 512
DUPLICATE_POLICIES = ("exact", "multiplicity")


class EstimatorConfigError(ValueError):
    """An estimator was asked for in a setting where it is undefined."""


class EstimatorKind(str, enum.Enum):
    JOINT_SCORE = "joint_score"
    MARGINAL_1D = "marginal_1d"
    PATHWISE = "pathwise"
    CONTROL_VARIATE = "control_variate"
    EXACT = "exact"  # enumeration oracle, benchmark reference only

    @classmethod
    def parse(cls, value) -> "EstimatorKind":
        try:
            return cls(value)
        except ValueError:
            choices = ", ".join(k.value for k in cls)
            raise EstimatorConfigError(f"unknown estimator {value!r} (choose from {choices})") from None


@dataclass
class GradientSample:
    gradient: PyramidGradient
    kind: EstimatorKind
    samples: int
    seed: Optional[int] = None

    def support(self) -> list:
        return self.gradient.support()


def grad_joint(pyramid: HashedProbabilityPyramid, batch: SampleBatch, loss_value: float,
               seed=None, masses=None) -> GradientSample:
    """Loss times the summed score of every sampled path."""
    weights = np.full(len(batch), float(loss_value))
    grad = pyramid.accumulate_scores(batch.finest_bins, weights, masses=masses)
    return GradientSample(grad, EstimatorKind.JOINT_SCORE, len(batch), seed)


def control_variate_coefficients(unique: UniqueSamples, weights, duplicate_policy: str = "exact"):
    """Per-sample weights from per-unique-bin weights.

    ``exact``: a bin drawn more than once renders identically without any
    single one of its draws, so those draws get zero. ``multiplicity``: every
    draw of a merged bin carries the merged weight.
    """
    if duplicate_policy not in DUPLICATE_POLICIES:
        raise EstimatorConfigError(f"unknown duplicate policy {duplicate_policy!r}")
    weights = np.asarray(weights, dtype=np.float64).reshape(len(unique))
    per_sample = weights[unique.inverse]
    if duplicate_policy == "exact":
        per_sample = np.where(unique.multiplicity[unique.inverse] > 1, 0.0, per_sample)
    return per_sample


def grad_cv(pyramid: HashedProbabilityPyramid, batch: SampleBatch, unique: UniqueSamples,
            graph: RenderGraph, dl_dimage, extra_weights=None, duplicate_policy: str = "exact",
            seed=None, masses=None) -> GradientSample:
    """Leave-one-out control variate: sum_i (L - L_{-i}) grad log p(mu_i).

    ``graph`` must have been rendered from the unique bins in ``unique``
    order; ``extra_weights`` adds each unique primitive's own share of any
    per-primitive loss term (regularisers).
    """
    if graph.count != len(unique):
        raise EstimatorConfigError("render graph does not match the de-duplicated samples")
    weights = opacity_sensitivity(graph, dl_dimage)
    if extra_weights is not None:
        weights = weights + np.asarray(extra_weights, dtype=np.float64)
    per_sample = control_variate_coefficients(unique, weights, duplicate_policy)
    grad = pyramid.accumulate_scores(batch.finest_bins, per_sample, masses=masses)
    return GradientSample(grad, EstimatorKind.CONTROL_VARIATE, len(batch), seed)


def grad_pathwise(pyramid: HashedProbabilityPyramid, batch: SampleBatch, position_adjoints,
                  rounding: bool = False, seed=None, masses=None) -> GradientSample:
    """Reparameterisation gradient through the chained inverse CDFs."""
    if rounding:
        raise EstimatorConfigError("the pathwise estimator needs sample rounding disabled")
    grad = pathwise_vjp(pyramid, batch, position_adjoints, masses=masses)
    return GradientSample(grad, EstimatorKind.PATHWISE, len(batch), seed)


def grad_marginal_1d(pyramid: HashedProbabilityPyramid, batch: SampleBatch, kernel, grid, adjoint,
                     centers=None, seed=None, masses=None) -> GradientSample:
    """Each sample's own kernel contribution, contracted with dL/dF, times its score."""
    if pyramid.config.dims != 1 or not isinstance(kernel, Kernel1D):
        raise EstimatorConfigError("the marginal estimator applies to the additive 1D model only")
    centers = batch.mu_continuous[:, 0] if centers is None else np.asarray(centers).reshape(-1)
    if len(centers) == 0:
        return GradientSample(PyramidGradient.zeros_like(pyramid), EstimatorKind.MARGINAL_1D, 0, seed)
    contributions = kernel(grid, centers) @ np.asarray(adjoint, dtype=np.float64)
    grad = pyramid.accumulate_scores(batch.finest_bins, contributions, masses=masses)
    return GradientSample(grad, EstimatorKind.MARGINAL_1D, len(batch), seed)


def position_adjoints(mu, d_world_position, d_world_scale, scales, contraction: ContractionConfig):
    """dL/dmu for unit-cube positions given world-space position and scale adjoints."""
    x = 2.0 * np.asarray(mu, dtype=np.float64) - 1.0
    jac = contract_jacobian(x, contraction)
    through_position = np.einsum("nk,nkd->nd", d_world_position, jac)
    through_scale = (np.asarray(d_world_scale) * np.asarray(scales))[:, None] * jacobian_scale_grad(x, contraction)
    return 2.0 * (through_position + through_scale)


def enumerate_expected_gradient(pyramid: HashedProbabilityPyramid, samples: int,
                                outcome_value: Callable[[np.ndarray], float],
                                max_outcomes: int = MAX_ENUMERATION):
    """Exact E[f] and its logit gradient over every ordered assignment of samples to finest bins.

    ``outcome_value`` receives the (samples, D) finest-bin coordinates of one
    outcome.
    """
    cfg = pyramid.config
    bins = cfg.finest_bin_count
    if bins ** samples > max_outcomes:
        raise EstimatorConfigError(f"{bins}^{samples} outcomes exceed the enumeration limit {max_outcomes}")
    masses = pyramid.masses()
    all_bins = delinearize(np.arange(bins), cfg.finest_resolution, cfg.dims)
    probs = pyramid.bin_masses(all_bins, masses)
    expected = 0.0
    grad = PyramidGradient.zeros_like(pyramid)
    for outcome in itertools.product(range(bins), repeat=samples):
        outcome = np.array(outcome)
        weight = float(np.prod(probs[outcome]))
        value = float(outcome_value(all_bins[outcome]))
        expected += weight * value
        pyramid.accumulate_scores(all_bins[outcome], np.full(samples, weight * value), out=grad, masses=masses)
    return expected, grad


# Benchmark setups ------------------------------------------------------------

@dataclass
class AdditiveBenchSetup:
    """1D additive model against a sum of random kernels; loss -<target, F>."""

    levels: int = 6
    kernel: Kernel1D = Kernel1D(amplitude=1.0, width=0.02)
    grid_size: int = 256
    target_kernels: int = 15
    rounding: bool = False
    seed: int = 0
    pyramid: HashedProbabilityPyramid = field(init=False)
    grid: np.ndarray = field(init=False)
    target: np.ndarray = field(init=False)

    def __post_init__(self):
        rng = np.random.default_rng(self.seed)
        self.pyramid = HashedProbabilityPyramid(PyramidConfig(dims=1, levels=self.levels, base_resolution=2,
                                                              budget=None))
        self.grid = (np.arange(self.grid_size) + 0.5) / self.grid_size
        self.target = np.zeros(self.grid_size)
        for _ in range(self.target_kernels):
            bump = Kernel1D(amplitude=rng.uniform(0.2, 1.0), width=rng.uniform(0.01, 0.06))
            self.target += bump(self.grid, [rng.uniform(0.1, 0.9)])[0]

    @property
    def adjoint(self) -> np.ndarray:
        return -self.target / self.grid_size

    def supports(self, kind: EstimatorKind) -> bool:
        if kind == EstimatorKind.PATHWISE:
            return not self.rounding
        if kind == EstimatorKind.EXACT:
            return self.rounding
        return kind in (EstimatorKind.JOINT_SCORE, EstimatorKind.MARGINAL_1D)

    def centers(self, batch: SampleBatch) -> np.ndarray:
        return (batch.mu_rounded if self.rounding else batch.mu_continuous)[:, 0]

    def loss(self, centers) -> float:
        return float(additive_render_1d(centers, self.kernel, self.grid) @ self.adjoint)

    def estimate(self, kind: EstimatorKind, samples: int, seed: int) -> PyramidGradient:
        if kind == EstimatorKind.EXACT:
            return self.exact_gradient(samples)
        batch = sample_batch(self.pyramid, samples, seed, threads=1)
        centers = self.centers(batch)
        if kind == EstimatorKind.JOINT_SCORE:
            return grad_joint(self.pyramid, batch, self.loss(centers), seed).gradient
        if kind == EstimatorKind.MARGINAL_1D:
            return grad_marginal_1d(self.pyramid, batch, self.kernel, self.grid, self.adjoint, centers, seed).gradient
        if kind == EstimatorKind.PATHWISE:
            d_centers = self.kernel.center_derivative(self.grid, centers) @ self.adjoint
            return grad_pathwise(self.pyramid, batch, d_centers[:, None], self.rounding, seed).gradient
        raise EstimatorConfigError(f"{kind.value} is not defined for the additive model")

    def exact_gradient(self, samples: int) -> PyramidGradient:
        """Closed form for rounded samples: samples * sum_b p_b a_b grad log p_b."""
        if not self.rounding:
            raise EstimatorConfigError("exact gradient needs rounded samples")
        cfg = self.pyramid.config
        bins = delinearize(np.arange(cfg.finest_bin_count), cfg.finest_resolution, 1)
        centers = (bins[:, 0] + 0.5) / cfg.finest_resolution
        contributions = self.kernel(self.grid, centers) @ self.adjoint
        probs = self.pyramid.bin_masses(bins)
        return self.pyramid.accumulate_scores(bins, samples * probs * contributions)


@dataclass
class SplatBenchSetup:
    """One view rendered from a frozen pyramid with bin-constant attributes.

    With ``target`` the loss is the training loss (L1 + D-SSIM) against it;
    with ``adjoint`` it is the linear functional <adjoint, I>.
    """

    pyramid: HashedProbabilityPyramid
    camera: Camera
    attributes: AttributeTable
    target: Optional[np.ndarray] = None
    adjoint: Optional[np.ndarray] = None
    background: np.ndarray = field(default_factory=lambda: np.zeros(3))
    contraction: ContractionConfig = ContractionConfig()
    options: RenderOptions = RenderOptions()
    loss_config: LossConfig = LossConfig(lambda_opacity=0.0, lambda_scale=0.0, lambda_color=0.0)
    duplicate_policy: str = "exact"

    def __post_init__(self):
        if (self.target is None) == (self.adjoint is None):
            raise EstimatorConfigError("give exactly one of target or adjoint")

    @classmethod
    def default(cls, resolution: int = 16, size: int = 32, seed: int = 0):
        from .scenes import SceneSpec, synth_scene

        spec = SceneSpec(width=size, height=size, cameras=4, heldout_every=4, seed=seed)
        _, dataset = synth_scene(spec, RenderOptions())
        pyramid = HashedProbabilityPyramid(PyramidConfig(dims=3, levels=1, base_resolution=resolution, budget=None))
        table = AttributeTable(3, resolution, resolution ** 3, ActivationConfig(o0=0.2, s0=0.02))
        table.entries[:, 2:5] = np.random.default_rng(seed).normal(0.0, 0.5, size=(resolution ** 3, 3))
        return cls(pyramid, dataset.cameras[0], table, target=dataset.images[0])

    def supports(self, kind: EstimatorKind) -> bool:
        return kind in (EstimatorKind.JOINT_SCORE, EstimatorKind.PATHWISE, EstimatorKind.CONTROL_VARIATE)

    def splats_for(self, bins, positions):
        x = 2.0 * positions - 1.0
        world = to_world(positions, self.contraction)
        attrs = self.attributes.query_many(bins, self.camera.view_dirs(world))
        splats = Splats(
            positions=world,
            opacities=attrs.opacity,
            scales=attrs.scale * jacobian_scale(x, self.contraction),
            colors=attrs.color,
        )
        return splats, attrs

    def image_loss(self, image):
        """Scalar loss and dL/dI."""
        if self.adjoint is not None:
            return float(np.sum(self.adjoint * image)), self.adjoint
        result = loss_and_adjoint(image, self.target, np.zeros(0), np.zeros(0), np.zeros((0, 4, 3)),
                                  self.loss_config)
        return result.value, result.dl_dimage

    def outcome_loss(self, bins) -> float:
        """Loss of one outcome after rounding and de-duplication."""
        keys = np.unique(np.asarray(bins, dtype=np.int64), axis=0)
        resolution = self.pyramid.config.finest_resolution
        splats, _ = self.splats_for(keys, (keys + 0.5) / resolution)
        image, _ = render(splats, self.camera, self.background, self.options)
        return self.image_loss(image)[0]

    def estimate(self, kind: EstimatorKind, samples: int, seed: int) -> PyramidGradient:
        batch = sample_batch(self.pyramid, samples, seed, threads=1)
        if kind == EstimatorKind.PATHWISE:
            positions = batch.mu_continuous
            splats, attrs = self.splats_for(batch.finest_bins, positions)
            image, graph = render(splats, self.camera, self.background, self.options)
            _, dl_dimage = self.image_loss(image)
            grads = backward(graph, dl_dimage)
            adj = position_adjoints(positions, grads.position, grads.scale, attrs.scale, self.contraction)
            return grad_pathwise(self.pyramid, batch, adj, False, seed).gradient
        unique = round_and_dedupe(batch)
        splats, _ = self.splats_for(unique.bins, unique.positions)
        image, graph = render(splats, self.camera, self.background, self.options)
        value, dl_dimage = self.image_loss(image)
        if kind == EstimatorKind.JOINT_SCORE:
            return grad_joint(self.pyramid, batch, value, seed).gradient
        if kind == EstimatorKind.CONTROL_VARIATE:
            return grad_cv(self.pyramid, batch, unique, graph, dl_dimage,
                           duplicate_policy=self.duplicate_policy, seed=seed).gradient
        raise EstimatorConfigError(f"{kind.value} is not defined for the splat renderer")


# Variance benchmark --------------------------------------------------------------

@dataclass
class VarianceRow:
    estimator: str
    samples: int
    mean: np.ndarray
    variance: np.ndarray
    replicates: int
    seed_base: int
    total_variance: float
    slope: float = float("nan")


def _replicate(setup, kind, samples, seed):
    return setup.estimate(kind, samples, seed).flatten()


def variance_bench(setup, kinds: Iterable, repeats: int, sample_counts: Sequence[int], seed_base: int = 0,
                   threads: Optional[int] = None, progress=None) -> List[VarianceRow]:
    """Per-parameter mean and variance over seeded replicates, plus log-log slopes.

    Replicate ``r`` uses seed ``seed_base + r`` for every estimator, so the
    estimators see paired samples.
    """
    if repeats < 30:
        raise EstimatorConfigError(f"repeats must be >= 30, not {repeats}")
    kinds = [EstimatorKind.parse(k) for k in kinds]
    for kind in kinds:
        if not setup.supports(kind):
            raise EstimatorConfigError(f"{kind.value} is not applicable to this setup")
    rows: List[VarianceRow] = []
    workers = worker_count(threads)
    for kind in kinds:
        kind_rows = []
        for samples in sample_counts:
            seeds = [seed_base + r for r in range(repeats)]
            if workers == 1:
                estimates = [_replicate(setup, kind, samples, s) for s in seeds]
            else:
                with ThreadPoolExecutor(max_workers=workers) as pool:
                    estimates = list(pool.map(lambda s: _replicate(setup, kind, samples, s), seeds))
            stack = np.stack(estimates)
            variance = stack.var(axis=0, ddof=1)
            row = VarianceRow(kind.value, int(samples), stack.mean(axis=0), variance, repeats, seed_base,
                              float(variance.sum()))
            kind_rows.append(row)
            logger.info(
                "variance bench",
                extra={"estimator": kind.value, "samples": samples, "total_variance": row.total_variance},
            )
            if progress is not None:
                progress.update(1)
        slope = fit_slope([r.samples for r in kind_rows], [r.total_variance for r in kind_rows])
        for row in kind_rows:
            row.slope = slope
        rows.extend(kind_rows)
    return rows


def fit_slope(sample_counts, total_variances) -> float:
    """Slope of log(total variance) against log(M); nan if undefined."""
    m = np.asarray(sample_counts, dtype=np.float64)
    v = np.asarray(total_variances, dtype=np.float64)
    keep = v > 0
    if keep.sum() < 2:
        return float("nan")
    return float(np.polyfit(np.log(m[keep]), np.log(v[keep]), 1)[0])


CSV_COLUMNS = ("estimator", "M", "param_id", "mean", "variance", "replicates", "seed_base",
               "total_variance", "slope")


def write_variance_csv(rows: Sequence[VarianceRow], path):
    with open(path, "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(CSV_COLUMNS)
        for row in rows:
            for param, (mean, var) in enumerate(zip(row.mean, row.variance)):
                writer.writerow([row.estimator, row.samples, param, f"{mean:.17g}", f"{var:.17g}",
                                 row.replicates, row.seed_base, f"{row.total_variance:.17g}",
                                 f"{row.slope:.6g}"])


def summarize(rows: Sequence[VarianceRow]) -> Dict[str, Dict[int, float]]:
    """estimator -> M -> total variance."""
    out: Dict[str, Dict[int, float]] = {}
    for row in rows:
        out.setdefault(row.estimator, {})[row.samples] = row.total_variance
    return out
