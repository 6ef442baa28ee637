"""Simultaneous R-region segmentation with one polytope-union model.

Region boundaries move two ways: polytopes deform under a competition energy
(for each pixel the best-matching region's level set advances, all other
nearby regions retreat), and polytopes change region by 1-D K-means on their
mean intensities.  Because every pixel only ever sees the polytopes homed in
its neighbor block, the per-iteration cost does not grow with the number of
regions.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import _kernels
from .geometry import LevelSetModel, ModelConfig, init_grid
from .imaging import _multi_otsu_any
from .twophase import EvolutionConfig, project_unit_normals


@dataclass
class RegionModel:
    """Current partition of the polytopes into R intensity regions."""

    n_regions: int
    region_means: np.ndarray     # (R,) gray levels, ascending after K-means
    polytope_labels: np.ndarray  # (N,) region index in {1..R} per polytope

    def __post_init__(self):
        self.region_means = np.asarray(self.region_means, dtype=float)
        self.polytope_labels = np.asarray(self.polytope_labels, dtype=np.int64)
        if self.region_means.shape != (self.n_regions,):
            raise ValueError("need one mean per region")
        if not np.all(np.isfinite(self.region_means)):
            raise ValueError("region means must be finite")
        if self.polytope_labels.min(initial=1) < 1 or \
                self.polytope_labels.max(initial=1) > self.n_regions:
            raise ValueError("polytope labels must lie in 1..n_regions")


@dataclass
class PolytopeIntensity:
    """Soft mean image intensity and soft area of every polytope.

    Polytopes whose support falls at or below SUPPORT_EPS are numerically
    invisible; their value entry is NaN and they are excluded from
    clustering.
    """

    values: np.ndarray   # (N,) mean intensity under g_i, NaN when invisible
    support: np.ndarray  # (N,) sum of g_i over the polytope's neighbor block

    @property
    def valid(self) -> np.ndarray:
        return (self.support > _kernels.SUPPORT_EPS) & np.isfinite(self.values)


@dataclass
class MultiphaseResult:
    label_map: np.ndarray        # (H, W) uint8, exactly one region per pixel
    region_means: np.ndarray
    iterations_run: int
    wall_time: float
    energy_trace: list[float]
    model: LevelSetModel


def polytope_mean_intensities(image, model: LevelSetModel) -> PolytopeIntensity:
    """Soft intensity mean of every polytope over its neighbor block.

    The mean weights pixels by g_i^4 rather than g_i: the quartic suppresses
    the sigmoid tails, which otherwise pull a small polytope's mean several
    gray levels toward whatever surrounds it and destabilize the region
    clustering when many regions sit close in intensity.  Support (the
    plain sum of g_i) is returned alongside; polytopes at or below
    SUPPORT_EPS are reported NaN.
    """
    img = np.asarray(image, dtype=float)
    if tuple(img.shape) != tuple(model.image_shape):
        raise ValueError(f"image shape {img.shape} does not match model "
                         f"{model.image_shape}")
    _, support, core_w, core_i, _ = _kernels.field_pass(model, image=img)
    values = np.full(model.n_polytopes, np.nan)
    alive = (support > _kernels.SUPPORT_EPS) & (core_w > 0.0)
    values[alive] = core_i[alive] / core_w[alive]
    return PolytopeIntensity(values=values, support=support)


def assign_labels_kmeans(p: PolytopeIntensity, n_regions: int,
                         previous: RegionModel | None = None,
                         centroids=None) -> RegionModel:
    """Cluster polytope intensities into regions by 1-D Lloyd iteration.

    Means start from the previous region model when given; a cold start runs
    Lloyd from several evenly spaced quantile phases and keeps the best
    objective.  Every Lloyd result is then polished with single-point moves
    until no move lowers the within-cluster sum of squares, so the output is
    always a move-stable local optimum (and on small instances almost always
    the global one).  Nearest-mean ties break toward the lower region index;
    emptied clusters keep their previous mean until points return.  Output
    clusters are sorted by ascending mean, so region indices are
    intensity-ordered and stable across calls.  Invisible polytopes inherit
    the label of the nearest valid polytope (by centroid when `centroids` is
    given, else by index).
    """
    valid = p.valid
    v = p.values[valid]
    if n_regions > v.size:
        raise ValueError(f"{n_regions} regions but only {v.size} valid polytopes")
    if previous is not None:
        if previous.n_regions != n_regions:
            raise ValueError("previous region model has a different region count")
        starts = [previous.region_means.astype(float).copy()]
    else:
        starts = [np.quantile(v, np.clip((np.arange(n_regions) + phase) / n_regions,
                                         0.0, 1.0))
                  for phase in (0.5, 0.0, 1.0, 0.25, 0.75)]

    best = None
    for initial_means in starts:
        labels_try, means_try = _lloyd(v, initial_means.copy(), n_regions)
        labels_try, means_try = _single_move_polish(v, labels_try, means_try)
        cost = float(((v - means_try[labels_try]) ** 2).sum())
        if best is None or cost < best[0] - 1e-12:
            best = (cost, labels_try, means_try)
    _, labels_v, means = best

    order = np.argsort(means, kind="stable")
    remap = np.empty(n_regions, dtype=np.int64)
    remap[order] = np.arange(n_regions)
    labels_v = remap[labels_v] + 1
    means = means[order]

    labels = np.zeros(p.values.size, dtype=np.int64)
    labels[valid] = labels_v
    missing = np.flatnonzero(~valid)
    if missing.size:
        vidx = np.flatnonzero(valid)
        for i in missing:
            if centroids is not None:
                d = np.sum((np.asarray(centroids)[vidx] - np.asarray(centroids)[i]) ** 2, axis=1)
            else:
                d = np.abs(vidx - i)
            labels[i] = labels[vidx[int(np.argmin(d))]]
    return RegionModel(n_regions=n_regions, region_means=means, polytope_labels=labels)


def _lloyd(v, means, n_regions, max_sweeps=100):
    """Standard Lloyd iteration; asserts the objective never rises per sweep."""
    labels = np.zeros(v.size, dtype=np.int64)
    prev_wcss = np.inf
    for sweep in range(max_sweeps):
        dist = (v[:, None] - means[None, :]) ** 2
        new_labels = np.argmin(dist, axis=1)  # first minimum = lowest index
        for r in range(n_regions):
            sel = new_labels == r
            if sel.any():
                means[r] = v[sel].mean()
        wcss = float(((v - means[new_labels]) ** 2).sum())
        if wcss > prev_wcss * (1.0 + 1e-12) + 1e-9:
            raise AssertionError("K-means objective increased across a sweep")
        converged = np.array_equal(new_labels, labels) and sweep > 0
        labels = new_labels
        prev_wcss = wcss
        if converged:
            break
    return labels, means


def _single_move_polish(v, labels, means):
    """Greedy single-point moves until none lowers the objective.

    Uses the exact objective change of moving x from cluster A to B,
        nB/(nB+1) (x - muB)^2  -  nA/(nA-1) (x - muA)^2,
    so each accepted move strictly decreases the sum of squares; a cluster's
    last member never benefits from leaving (the removal gain is zero), so
    populated clusters stay populated.
    """
    labels = labels.copy()
    means = means.copy()
    n_regions = means.size
    counts = np.bincount(labels, minlength=n_regions).astype(float)
    sums = np.zeros(n_regions)
    for r in range(n_regions):
        sel = labels == r
        if sel.any():
            sums[r] = v[sel].sum()
    improved = True
    while improved:
        improved = False
        for idx in range(v.size):
            a = labels[idx]
            if counts[a] <= 1:
                continue
            x = v[idx]
            gain = counts[a] / (counts[a] - 1.0) * (x - means[a]) ** 2
            for b in range(n_regions):
                if b == a:
                    continue
                cost = counts[b] / (counts[b] + 1.0) * (x - means[b]) ** 2
                if cost - gain < -1e-12:
                    counts[a] -= 1.0
                    sums[a] -= x
                    means[a] = sums[a] / counts[a]
                    counts[b] += 1.0
                    sums[b] += x
                    means[b] = sums[b] / counts[b]
                    labels[idx] = b
                    improved = True
                    a = b
                    if counts[a] <= 1:
                        break
                    gain = counts[a] / (counts[a] - 1.0) * (x - means[a]) ** 2
    return labels, means


def best_region(intensity: float, region_means) -> int:
    """Region whose mean is closest to the intensity; ties to the lower index."""
    means = np.asarray(region_means, dtype=float)
    if means.size == 0:
        raise ValueError("region_means is empty")
    return int(np.argmin((float(intensity) - means) ** 2)) + 1


def energy_deformation(image, model: LevelSetModel, regions: RegionModel) -> float:
    """Competition energy: sum over pixels of -f_rb + sum_{r != rb} f_r."""
    _sync_labels(model, regions)
    out = _kernels.deform_pass(model, image, regions.region_means)
    return float(out[0])


def gradient_step_deformation(image, model: LevelSetModel, regions: RegionModel,
                              gamma: float) -> float:
    """One region-competition step; returns the pre-step deformation energy.

    For every pixel, polytopes labeled with the best-matching region are
    pushed to include it and all other nearby polytopes are pushed to
    exclude it.
    """
    if gamma <= 0:
        raise ValueError("gamma must be positive")
    img = np.asarray(image, dtype=float)
    if tuple(img.shape) != tuple(model.image_shape):
        raise ValueError(f"image shape {img.shape} does not match model "
                         f"{model.image_shape}")
    _sync_labels(model, regions)
    model.rebuild_neighbor_index()
    energy, grad_w, grad_b, support, cents = _kernels.deform_pass(
        model, img, regions.region_means)
    model.weights -= gamma * grad_w
    model.biases -= gamma * grad_b
    project_unit_normals(model)
    alive = support > _kernels.SUPPORT_EPS
    model.centroids[alive] = cents[alive] / support[alive, None]
    return float(energy)


def extract_label_map(image, model: LevelSetModel, regions: RegionModel) -> np.ndarray:
    """Rasterize the partition: argmax_r f_r(x) with ties to the lowest index.

    Pixels where every region level set stays below 0.5 fall back to the
    best intensity match, so the output is always a total, overlap-free
    assignment.
    """
    _sync_labels(model, regions)
    out = _kernels.label_map_pass(model, image, regions.region_means)
    return out.astype(np.uint8)


INIT_MODES = ("grid-kmeans", "multi-otsu", "random")

# deformation gradients carry no squared-intensity residual factor (unlike
# the two-phase energy), so the step size is about four orders of magnitude
# larger
DEFAULT_MULTI_GAMMA0 = 3e-3


def default_multiphase_config() -> EvolutionConfig:
    return EvolutionConfig(max_iters=80, gamma0=DEFAULT_MULTI_GAMMA0,
                           gamma_decay=0.98, energy_tol=1e-6)


def segment_multiphase(image, n_regions: int, model_config: ModelConfig | None = None,
                       evo_config: EvolutionConfig | None = None,
                       relabel_every: int = 5, init: str = "grid-kmeans",
                       seed: int | None = None, on_iteration=None) -> MultiphaseResult:
    """Full multiphase run: init, alternating relabel/deform, rasterization.

    `init` picks the starting polytope labels: immediate K-means on the
    lattice intensities, majority multilevel-Otsu class per home cell, or
    uniform random labels drawn from `seed`.  Every `relabel_every`
    iterations the polytope intensities are re-measured and re-clustered;
    every iteration runs one competition descent step.
    """
    if n_regions < 2:
        raise ValueError("multiphase segmentation needs n_regions >= 2")
    if n_regions > 255:
        raise ValueError("label maps are 8-bit; n_regions must be <= 255")
    if init not in INIT_MODES:
        raise ValueError(f"unknown init {init!r}; expected one of {INIT_MODES}")
    if relabel_every < 1:
        raise ValueError("relabel_every must be >= 1")
    model_config = model_config or ModelConfig()
    evo_config = evo_config or default_multiphase_config()
    img = np.asarray(image, dtype=float)

    t0 = time.perf_counter()
    model = init_grid(model_config, img.shape)
    intensities = polytope_mean_intensities(img, model)
    if init == "grid-kmeans":
        regions = assign_labels_kmeans(intensities, n_regions, centroids=model.centroids)
    elif init == "multi-otsu":
        regions = otsu_region_init(img, model, n_regions)
    else:
        rng = np.random.default_rng(seed)
        labels = rng.integers(1, n_regions + 1, size=model.n_polytopes)
        regions = RegionModel(n_regions, _labelwise_means(intensities, labels, n_regions),
                              labels)
    _sync_labels(model, regions)

    trace: list[float] = []
    rel_changes: list[float] = []
    for t in range(evo_config.max_iters):
        if t > 0 and t % relabel_every == 0:
            intensities = polytope_mean_intensities(img, model)
            regions = assign_labels_kmeans(intensities, n_regions, previous=regions,
                                           centroids=model.centroids)
            _sync_labels(model, regions)
        energy = gradient_step_deformation(img, model, regions, evo_config.gamma(t))
        trace.append(energy)
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

    label_map = extract_label_map(img, model, regions)
    return MultiphaseResult(label_map=label_map, region_means=regions.region_means.copy(),
                            iterations_run=len(trace),
                            wall_time=time.perf_counter() - t0,
                            energy_trace=trace, model=model)


def otsu_region_init(image, model: LevelSetModel, n_regions: int) -> RegionModel:
    """Seed polytope labels from a multilevel Otsu split of the image.

    Each polytope takes the majority Otsu class inside its home grid cell;
    region means are the class-conditional image means (empty classes fall
    back to the global mean).
    """
    img = np.asarray(image)
    _, class_map = _multi_otsu_any(img, n_regions)
    home = model.home_cells()
    labels = np.empty(model.n_polytopes, dtype=np.int64)
    for i in range(model.n_polytopes):
        hr, hc = home[i]
        block = class_map[model.row_edges[hr]:model.row_edges[hr + 1],
                          model.col_edges[hc]:model.col_edges[hc + 1]]
        counts = np.bincount(block.ravel(), minlength=n_regions + 1)
        labels[i] = int(np.argmax(counts[1:])) + 1
    fimg = img.astype(float)
    global_mean = float(fimg.mean())
    means = np.array([float(fimg[class_map == r].mean()) if (class_map == r).any()
                      else global_mean for r in range(1, n_regions + 1)])
    return RegionModel(n_regions=n_regions, region_means=means, polytope_labels=labels)


def _labelwise_means(p: PolytopeIntensity, labels, n_regions: int) -> np.ndarray:
    sel_valid = p.valid
    fallback = float(np.nanmean(p.values)) if sel_valid.any() else 0.0
    means = np.empty(n_regions)
    for r in range(1, n_regions + 1):
        sel = sel_valid & (labels == r)
        means[r - 1] = float(p.values[sel].mean()) if sel.any() else fallback
    return means


def _sync_labels(model: LevelSetModel, regions: RegionModel) -> None:
    if regions.polytope_labels.size != model.n_polytopes:
        raise ValueError("region model does not match the polytope count")
    if not np.array_equal(model.labels, regions.polytope_labels):
        model.labels = regions.polytope_labels.copy()
        model.rebuild_neighbor_index()
