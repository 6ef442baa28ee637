"""Union-of-polytopes level set representation.

The shape model is a soft union of N convex polytopes, each the soft
intersection of M half-planes realized as logistic sigmoids.  The membership
field is

    f(x) = 1 - prod_{i in nbhd(x)} (1 - g_i(x)),      g_i(x) = prod_j sigma_ij(x)

where nbhd(x) restricts the product to polytopes homed near x, which is what
makes evaluation cost independent of how many polytopes (or regions) the
model carries.  Points are (x, y) pairs in pixel units with x along image
columns and y along rows; pixel centers sit at integer coordinates.

Each half-plane is evaluated in its polytope's local frame, i.e. at
x - anchor where the anchor is the polytope's initial lattice center.  This
is a pure reparameterization of the global-frame discriminant (the anchor
shift can be folded into the bias) but it keeps gradient magnitudes uniform
across the image: in a global frame the weight gradients scale with the
absolute pixel coordinate, so polytopes far from the origin would evolve
orders of magnitude faster than the rest.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

D = 2  # spatial dimension: this artifact is 2-D only

# Sigmoid arguments are clamped to +-SIGMOID_CLAMP before exponentiation so a
# runaway half-plane can never overflow; the clamp changes values by < 1e-217.
SIGMOID_CLAMP = 500.0

MODEL_FORMAT_VERSION = 1


def sigmoid(z):
    """Logistic sigmoid 1 / (1 + exp(-z)) with the standard clamp applied."""
    z = np.clip(z, -SIGMOID_CLAMP, SIGMOID_CLAMP)
    return 1.0 / (1.0 + np.exp(-z))


@dataclass
class HalfSpace:
    """One linear discriminant: soft membership sigma(s * (w . x + b)).

    The weights and bias are the only adaptive parameters of the model.
    """

    weights: np.ndarray  # (2,) slope per pixel coordinate
    bias: float

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=float)
        if self.weights.shape != (D,):
            raise ValueError(f"weights must have {D} entries, got {self.weights.shape}")
        if not (np.all(np.isfinite(self.weights)) and np.isfinite(self.bias)):
            raise ValueError("half-space parameters must be finite")


@dataclass
class Polytope:
    """Soft convex polytope: product of M half-space sigmoids.

    `label` is the region the polytope currently belongs to (always 1 in
    two-phase mode).  `centroid` is the cached soft center of mass used for
    spatial re-homing; `anchor` is the fixed local-frame origin.
    """

    halfspaces: list[HalfSpace]
    label: int = 1
    centroid: np.ndarray = field(default_factory=lambda: np.zeros(D))
    anchor: np.ndarray = field(default_factory=lambda: np.zeros(D))

    def __post_init__(self):
        if not self.halfspaces:
            raise ValueError("a polytope needs at least one half-space")
        self.centroid = np.asarray(self.centroid, dtype=float)
        self.anchor = np.asarray(self.anchor, dtype=float)


@dataclass
class ModelConfig:
    """Construction knobs for the lattice-initialized model."""

    n_polytopes: int = 100
    m_halfspaces: int = 16
    init_radius_fraction: float = 0.4  # face distance as a fraction of lattice spacing
    steepness: float = 1.0             # sigmoid sharpness, per pixel
    neighbor_cells: int = 3            # side of the cell block defining nbhd(x)

    def __post_init__(self):
        if self.n_polytopes <= 0 or self.m_halfspaces <= 0:
            raise ValueError("n_polytopes and m_halfspaces must be positive")
        if not 0.0 < self.init_radius_fraction < 1.0:
            raise ValueError("init_radius_fraction must lie in (0, 1)")
        if self.steepness <= 0.0:
            raise ValueError("steepness must be positive")
        if self.neighbor_cells < 1 or self.neighbor_cells % 2 == 0:
            raise ValueError("neighbor_cells must be an odd positive integer")


def eval_sigmoid(hs: HalfSpace, x, steepness: float) -> float:
    """Evaluate one half-space membership sigma(s * (w . x + b)) at a point.

    Returns 0.5 exactly on the hyperplane w . x + b = 0.
    """
    x = np.asarray(x, dtype=float)
    return float(sigmoid(steepness * (hs.weights @ x + hs.bias)))


def eval_polytope(p: Polytope, x, steepness: float) -> float:
    """Evaluate the polytope membership g(x), the product of its sigmoids.

    The point is shifted into the polytope's local frame before the
    half-spaces are evaluated.
    """
    xl = np.asarray(x, dtype=float) - p.anchor
    g = 1.0
    for hs in p.halfspaces:
        g *= eval_sigmoid(hs, xl, steepness)
    return g


class LevelSetModel:
    """N polytopes on a cell lattice plus the neighborhood index nbhd(x).

    Parameters are stored as flat arrays (weights (N, M, 2), biases (N, M))
    for the vectorized evolution kernels; `polytope(i)` materializes the
    object view of one polytope.  The neighborhood of a pixel is the set of
    polytopes whose home cell lies in the `neighbor_cells` x `neighbor_cells`
    block centered on the pixel's cell; home cells are recomputed from the
    cached centroids by `rebuild_neighbor_index`, so drifting polytopes
    re-home.
    """

    def __init__(self, weights, biases, anchors, labels, centroids,
                 grid_shape, image_shape, steepness, neighbor_cells=3):
        self.weights = np.asarray(weights, dtype=float)
        self.biases = np.asarray(biases, dtype=float)
        self.anchors = np.asarray(anchors, dtype=float)
        self.labels = np.asarray(labels, dtype=np.int64)
        self.centroids = np.asarray(centroids, dtype=float)
        self.grid_shape = (int(grid_shape[0]), int(grid_shape[1]))
        self.image_shape = (int(image_shape[0]), int(image_shape[1]))
        self.steepness = float(steepness)
        self.neighbor_cells = int(neighbor_cells)

        n, m, d = self.weights.shape
        if d != D or self.biases.shape != (n, m):
            raise ValueError("inconsistent parameter array shapes")
        rows, cols = self.grid_shape
        h, w = self.image_shape
        # cell edges in pixel index units (row_edges along y, col_edges along x)
        self.row_edges = np.round(np.linspace(0, h, rows + 1)).astype(np.int64)
        self.col_edges = np.round(np.linspace(0, w, cols + 1)).astype(np.int64)
        self.cell_members = None  # (C, Kmax) int64, -1 padded
        self.rebuild_neighbor_index()

    # -- basic introspection -------------------------------------------------

    @property
    def n_polytopes(self) -> int:
        return self.weights.shape[0]

    @property
    def m_halfspaces(self) -> int:
        return self.weights.shape[1]

    def polytope(self, i: int) -> Polytope:
        """Object view of polytope i (copies the parameters)."""
        hs = [HalfSpace(self.weights[i, j].copy(), float(self.biases[i, j]))
              for j in range(self.m_halfspaces)]
        return Polytope(hs, label=int(self.labels[i]),
                        centroid=self.centroids[i].copy(),
                        anchor=self.anchors[i].copy())

    # -- neighborhood index --------------------------------------------------

    def cell_of(self, x) -> tuple[int, int]:
        """(row, col) grid cell containing the point, clipped to the grid."""
        rows, cols = self.grid_shape
        r = int(np.searchsorted(self.row_edges, x[1], side="right")) - 1
        c = int(np.searchsorted(self.col_edges, x[0], side="right")) - 1
        return min(max(r, 0), rows - 1), min(max(c, 0), cols - 1)

    def home_cells(self) -> np.ndarray:
        """(N, 2) home cell (row, col) of each polytope from its centroid."""
        rows, cols = self.grid_shape
        r = np.searchsorted(self.row_edges, self.centroids[:, 1], side="right") - 1
        c = np.searchsorted(self.col_edges, self.centroids[:, 0], side="right") - 1
        return np.stack([np.clip(r, 0, rows - 1), np.clip(c, 0, cols - 1)], axis=1)

    def rebuild_neighbor_index(self) -> None:
        """Recompute the per-cell member lists from the cached centroids.

        Members of a cell are sorted by (label, index) so that same-region
        polytopes form contiguous runs, which the evolution kernels rely on.
        """
        rows, cols = self.grid_shape
        reach = (self.neighbor_cells - 1) // 2
        home = self.home_cells()
        lists: list[list[int]] = [[] for _ in range(rows * cols)]
        for i in range(self.n_polytopes):
            hr, hc = home[i]
            for r in range(max(hr - reach, 0), min(hr + reach, rows - 1) + 1):
                for c in range(max(hc - reach, 0), min(hc + reach, cols - 1) + 1):
                    lists[r * cols + c].append(i)
        order = np.lexsort((np.arange(self.n_polytopes), self.labels))
        rank = np.empty(self.n_polytopes, dtype=np.int64)
        rank[order] = np.arange(self.n_polytopes)
        kmax = max(1, max(len(l) for l in lists))
        members = np.full((rows * cols, kmax), -1, dtype=np.int64)
        for idx, l in enumerate(lists):
            l.sort(key=lambda i: rank[i])
            members[idx, :len(l)] = l
        self.cell_members = members

    def neighborhood(self, x) -> list[int]:
        """nbhd(x): indices of the polytopes participating at the point."""
        r, c = self.cell_of(x)
        row = self.cell_members[r * self.grid_shape[1] + c]
        return sorted(int(i) for i in row if i >= 0)

    def cell_bounds(self):
        """Per-cell pixel bounds (y0, y1, x0, x1), each an array of C ints."""
        rows, cols = self.grid_shape
        y0 = np.repeat(self.row_edges[:-1], cols)
        y1 = np.repeat(self.row_edges[1:], cols)
        x0 = np.tile(self.col_edges[:-1], rows)
        x1 = np.tile(self.col_edges[1:], rows)
        return y0, y1, x0, x1

    # -- evaluation (reference path; the evolution kernels live in _kernels) --

    def evaluate(self, x, region: int | None = None) -> float:
        return eval_level_set(self, x, region)

    def field(self, region: int | None = None) -> np.ndarray:
        """Membership image f(x) (or the region level set f_r) at every pixel."""
        from ._kernels import field_pass

        fhat = field_pass(self, 0 if region is None else int(region))[0]
        return fhat

    # -- serialization ---------------------------------------------------------

    def to_json(self) -> str:
        """Versioned JSON snapshot of the full model state."""
        doc = {
            "format_version": MODEL_FORMAT_VERSION,
            "steepness": self.steepness,
            "neighbor_cells": self.neighbor_cells,
            "grid_shape": list(self.grid_shape),
            "image_shape": list(self.image_shape),
            "weights": self.weights.tolist(),
            "biases": self.biases.tolist(),
            "anchors": self.anchors.tolist(),
            "labels": self.labels.tolist(),
            "centroids": self.centroids.tolist(),
        }
        return json.dumps(doc)

    @classmethod
    def from_json(cls, text: str) -> "LevelSetModel":
        doc = json.loads(text)
        if doc.get("format_version") != MODEL_FORMAT_VERSION:
            raise ValueError(f"unsupported model format version {doc.get('format_version')!r}")
        return cls(doc["weights"], doc["biases"], doc["anchors"], doc["labels"],
                   doc["centroids"], doc["grid_shape"], doc["image_shape"],
                   doc["steepness"], doc["neighbor_cells"])


def eval_level_set(m: LevelSetModel, x, region: int | None = None) -> float:
    """Membership f(x) = 1 - prod over nbhd(x) of (1 - g_i(x)).

    With `region` given, the product runs only over polytopes carrying that
    label (the region level set f_r); an empty set yields 0.
    """
    total = 1.0
    for i in m.neighborhood(x):
        if region is not None and m.labels[i] != region:
            continue
        total *= 1.0 - _poly_value(m, x, i)
    return 1.0 - total


def _poly_value(m: LevelSetModel, x, i: int) -> float:
    xl = np.asarray(x, dtype=float) - m.anchors[i]
    z = m.steepness * (m.weights[i] @ xl + m.biases[i])
    return float(np.prod(sigmoid(z)))


def grad_f_wrt_params(m: LevelSetModel, x, i: int, j: int) -> np.ndarray:
    """Analytic [df/dw_ij1, df/dw_ij2, df/db_ij] of the membership at a point.

    df/dtheta = prod_{r in nbhd(x), r != i} (1 - g_r) * g_i * (1 - sigma_ij)
                * s * (local coordinate for weights, 1 for the bias).
    Raises ValueError when polytope i is not in nbhd(x): excluded polytopes
    do not enter f at x at all, so asking for their gradient is a contract
    violation rather than a zero.
    """
    nbhd = m.neighborhood(x)
    if i not in nbhd:
        raise ValueError(f"polytope {i} is not in the neighborhood of {tuple(x)}")
    others = 1.0
    for r in nbhd:
        if r != i:
            others *= 1.0 - _poly_value(m, x, r)
    xl = np.asarray(x, dtype=float) - m.anchors[i]
    s = m.steepness
    sig = sigmoid(s * (m.weights[i] @ xl + m.biases[i]))
    g_i = float(np.prod(sig))
    common = others * g_i * (1.0 - float(sig[j])) * s
    return np.array([common * xl[0], common * xl[1], common])


def init_grid(config: ModelConfig, image_shape) -> LevelSetModel:
    """Build the lattice-initialized model for an image of the given shape.

    Chooses rows = floor(sqrt(N)), cols = ceil(N / rows) and instantiates one
    regular M-gon per lattice cell: unit-norm face normals at angles 2*pi*j/M
    and biases placing every face at distance r0 = init_radius_fraction *
    spacing from the cell center, leaving gaps between neighbors.
    """
    h, w = int(image_shape[0]), int(image_shape[1])
    rows = int(np.floor(np.sqrt(config.n_polytopes)))
    cols = int(np.ceil(config.n_polytopes / rows))
    if h < rows or w < cols:
        raise ValueError(f"image {h}x{w} is smaller than the {rows}x{cols} grid")
    n = rows * cols
    m = config.m_halfspaces

    spacing = min(h / rows, w / cols)
    r0 = config.init_radius_fraction * spacing

    # face j: outward unit normal u_j; inside where u_j . (x - center) <= r0,
    # i.e. z_j = -u_j . (x - center) + r0 >= 0 with unit-norm weights.
    angles = 2.0 * np.pi * np.arange(m) / m
    normals = np.stack([np.cos(angles), np.sin(angles)], axis=1)
    weights = np.broadcast_to(-normals, (n, m, D)).copy()
    biases = np.full((n, m), r0)

    row_edges = np.round(np.linspace(0, h, rows + 1))
    col_edges = np.round(np.linspace(0, w, cols + 1))
    cy = (row_edges[:-1] + row_edges[1:] - 1.0) / 2.0
    cx = (col_edges[:-1] + col_edges[1:] - 1.0) / 2.0
    centers = np.stack([np.tile(cx, rows), np.repeat(cy, cols)], axis=1)

    return LevelSetModel(weights, biases, anchors=centers, labels=np.ones(n, dtype=np.int64),
                         centroids=centers.copy(), grid_shape=(rows, cols),
                         image_shape=(h, w), steepness=config.steepness,
                         neighbor_cells=config.neighbor_cells)
