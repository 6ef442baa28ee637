"""Two-phase piecewise-constant segmentation by gradient descent.

The energy is the classic two-region fit

    E = sum_x (I(x) - c1)^2 f(x) + (I(x) - c2)^2 (1 - f(x))

with f the polytope-union membership field and c1/c2 the soft foreground and
background means.  Descent runs directly on the half-space weights and
biases, so there is no CFL-style step limit and no re-initialization: the
field stays in [0, 1] by construction.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import _kernels
from .errors import DegenerateRegionError
from .geometry import LevelSetModel, ModelConfig, init_grid
from .imaging import _otsu_single, histogram256


@dataclass
class RegionStats:
    """Soft mean intensities of foreground (c1) and background (c2)."""

    c1: float
    c2: float


@dataclass
class EvolutionConfig:
    """Solver knobs: step-size schedule, stopping rule, stats refresh cadence.

    The effective step is gamma_t = gamma0 * gamma_decay**t, large early and
    shrinking as the boundary settles.  The run stops when the 5-iteration
    moving average of the relative energy change drops below energy_tol
    (energy_tol = 0 disables early stopping, e.g. for fixed-budget
    benchmarks).
    """

    max_iters: int = 60
    gamma0: float = 4e-7
    gamma_decay: float = 0.98
    energy_tol: float = 1e-6
    stats_every: int = 1

    STOP_WINDOW = 5  # iterations averaged by the stopping rule

    def __post_init__(self):
        if self.max_iters < 0:
            raise ValueError("max_iters must be >= 0")
        if self.gamma0 <= 0:
            raise ValueError("gamma0 must be positive")
        if not 0.0 < self.gamma_decay <= 1.0:
            raise ValueError("gamma_decay must lie in (0, 1]")
        if self.energy_tol < 0:
            raise ValueError("energy_tol must be >= 0")
        if self.stats_every < 1:
            raise ValueError("stats_every must be >= 1")

    def gamma(self, t: int) -> float:
        return self.gamma0 * self.gamma_decay ** t


@dataclass
class SegmentationResult:
    mask: np.ndarray            # boolean, f > 0.5 at the final parameters
    final_energy: float
    iterations_run: int
    energy_trace: list[float]   # pre-step energy of each iteration
    wall_time: float
    model: LevelSetModel


def energy_from_field(image, fhat, c1: float, c2: float) -> float:
    """E for an explicit membership field (reference formula)."""
    img = np.asarray(image, dtype=float)
    fhat = np.asarray(fhat, dtype=float)
    if img.shape != fhat.shape:
        raise ValueError(f"image {img.shape} vs field {fhat.shape}")
    return float(np.sum((img - c1) ** 2 * fhat + (img - c2) ** 2 * (1.0 - fhat)))


def energy_two_phase(image, model: LevelSetModel, stats: RegionStats) -> float:
    """E at the model's current parameters (neighbor-restricted field)."""
    _check_shapes(image, model)
    out = _kernels.twophase_pass(model, image, stats.c1, stats.c2)
    return float(out[0])


def soft_region_means(image, fhat) -> RegionStats:
    """Membership-weighted means of an explicit field."""
    img = np.asarray(image, dtype=float)
    fhat = np.asarray(fhat, dtype=float)
    sum_f = float(fhat.sum())
    sum_b = float((1.0 - fhat).sum())
    if sum_f <= 0.0 or sum_b <= 0.0:
        raise DegenerateRegionError("a region has zero soft area; cannot form means")
    return RegionStats(c1=float((img * fhat).sum() / sum_f),
                       c2=float((img * (1.0 - fhat)).sum() / sum_b))


def update_region_stats(image, model: LevelSetModel) -> RegionStats:
    """Refresh c1/c2 as soft-membership means of the current field."""
    _check_shapes(image, model)
    fhat = _kernels.field_pass(model, image=image)[0]
    return soft_region_means(image, fhat)


def gradient_step_two_phase(image, model: LevelSetModel, stats: RegionStats,
                            gamma: float) -> float:
    """One evolution step; returns the pre-step energy.

    Re-homes drifted polytopes, accumulates the energy gradient over every
    pixel each polytope participates in, applies w <- w - gamma * dE/dw,
    projects each face back to a unit normal, and refreshes the cached
    centroids from the step's membership field.
    """
    if gamma <= 0:
        raise ValueError("gamma must be positive")
    _check_shapes(image, model)
    model.rebuild_neighbor_index()
    energy, grad_w, grad_b, _, _, support, cents = _kernels.twophase_pass(
        model, image, stats.c1, stats.c2)
    model.weights -= gamma * grad_w
    model.biases -= gamma * grad_b
    project_unit_normals(model)
    _refresh_centroids(model, support, cents)
    return float(energy)


def project_unit_normals(model: LevelSetModel) -> None:
    """Rescale every face so its weight vector has unit norm.

    Dividing (w, b) by |w| leaves the face's hyperplane exactly where it is
    but pins the sigmoid transition width to the model steepness.  Without
    this projection plain descent keeps sharpening the faces (the weight
    gradient carries the pixel lever arm) until the active band is narrower
    than a pixel and the boundary freezes short of the target.
    """
    norms = np.linalg.norm(model.weights, axis=2, keepdims=True)
    if np.any(norms == 0.0):
        raise ValueError("cannot normalize a zero face normal")
    model.weights /= norms
    model.biases /= norms[:, :, 0]


def initial_region_stats(image) -> RegionStats:
    """Polarity-fixing seed means: c1 from the brighter Otsu side, c2 darker.

    The two-phase energy is symmetric in its regions, so the soft means of
    the fresh lattice (which covers the image uniformly) would leave the
    foreground/background roles to rounding luck.  Seeding from the Otsu
    split deterministically makes the brighter region the foreground.
    """
    img = np.asarray(image, dtype=float)
    thr = _otsu_single(histogram256(np.clip(img, 0, 255).astype(np.uint8)))
    hi = img > thr
    if hi.any() and (~hi).any():
        return RegionStats(c1=float(img[hi].mean()), c2=float(img[~hi].mean()))
    mean = float(img.mean())
    return RegionStats(c1=mean, c2=mean)


def segment_two_phase(image, model_config: ModelConfig | None = None,
                      evo_config: EvolutionConfig | None = None,
                      on_iteration=None) -> SegmentationResult:
    """Full two-phase run: lattice init, descent with decaying steps, mask.

    `on_iteration(t, model)` is called after each parameter update (useful
    for tracing intermediate fields).  Hitting max_iters without meeting the
    energy tolerance is not an error; the result simply reports the full
    iteration count.
    """
    model_config = model_config or ModelConfig()
    evo_config = evo_config or EvolutionConfig()
    img = np.asarray(image, dtype=float)
    t0 = time.perf_counter()
    model = init_grid(model_config, img.shape)

    stats = initial_region_stats(img)
    pending = (stats.c1, stats.c2)  # means of the most recently evaluated field
    trace: list[float] = []
    rel_changes: list[float] = []
    for t in range(evo_config.max_iters):
        if t > 0 and t % evo_config.stats_every == 0:
            stats = RegionStats(*pending)
        energy, grad_w, grad_b, sum_f, sum_if, support, cents = \
            _kernels.twophase_pass(model, img, stats.c1, stats.c2)
        pending = _stats_from_sums(img, sum_f, sum_if)
        model.weights -= evo_config.gamma(t) * grad_w
        model.biases -= evo_config.gamma(t) * grad_b
        project_unit_normals(model)
        _refresh_centroids(model, support, cents)
        model.rebuild_neighbor_index()
        trace.append(float(energy))
        if on_iteration is not None:
            on_iteration(t, model)
        if len(trace) > 1:
            prev = trace[-2]
            rel_changes.append(abs(trace[-1] - prev) / max(abs(prev), 1e-12))
            window = rel_changes[-EvolutionConfig.STOP_WINDOW:]
            if (evo_config.energy_tol > 0
                    and len(window) == EvolutionConfig.STOP_WINDOW
                    and float(np.mean(window)) < evo_config.energy_tol):
                break

    mask = model.field() > 0.5
    final_energy = energy_two_phase(img, model, RegionStats(*pending))
    return SegmentationResult(mask=mask, final_energy=float(final_energy),
                              iterations_run=len(trace), energy_trace=trace,
                              wall_time=time.perf_counter() - t0, model=model)


def _stats_from_sums(img, sum_f: float, sum_if: float):
    total = float(img.sum())
    count = float(img.size)
    sum_b = count - sum_f
    if sum_f <= 0.0 or sum_b <= 0.0:
        raise DegenerateRegionError("a region has zero soft area; cannot form means")
    return sum_if / sum_f, (total - sum_if) / sum_b


def _refresh_centroids(model: LevelSetModel, support, cents) -> None:
    # invisible polytopes keep their last centroid (and stay homed there)
    alive = support > _kernels.SUPPORT_EPS
    model.centroids[alive] = cents[alive] / support[alive, None]


def _check_shapes(image, model: LevelSetModel) -> None:
    img = np.asarray(image)
    if tuple(img.shape) != tuple(model.image_shape):
        raise ValueError(f"image shape {img.shape} does not match model "
                         f"{model.image_shape}")
