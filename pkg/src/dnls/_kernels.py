"""Vectorized evolution kernels.

Each kernel walks the image cell by cell and, per pixel, evaluates only the
polytopes homed in that cell's neighbor block, so per-iteration cost is
O(pixels * |nbhd| * M) regardless of how many regions the model segments.
Inside a polytope the sigmoid product is abandoned as soon as it falls below
`DEFAULT_CUTOFF` (the polytope is then invisible at the pixel and its
gradient is zero to the same accuracy), which skips most of the exp calls on
saturated geometry.

Leave-one-out products over the neighborhood are computed with prefix/suffix
sweeps rather than division, so fully saturated factors (1 - g == 0 in
float64) stay exact.  Members of a cell arrive sorted by (label, index), so
same-region polytopes form contiguous runs and the multiphase kernels can
take the per-region products run by run.

All kernels are serial and accumulate in a fixed order: results are
bit-reproducible across runs.
"""

from __future__ import annotations

import numpy as np
from numba import njit

from .errors import NumericalError

# below this, a polytope's membership at a pixel is treated as exactly zero
DEFAULT_CUTOFF = 1e-14

# soft area below which a polytope is numerically invisible
SUPPORT_EPS = 1e-6

_CLAMP = 500.0


def _prep(model):
    y0, y1, x0, x1 = model.cell_bounds()
    return (model.weights, model.biases, model.anchors, model.cell_members,
            y0, y1, x0, x1, model.steepness)


def _as_image(model, image) -> np.ndarray:
    img = np.ascontiguousarray(image, dtype=np.float64)
    if tuple(img.shape) != tuple(model.image_shape):
        raise ValueError(f"image shape {img.shape} does not match model "
                         f"{model.image_shape}")
    return img


@njit(cache=True)
def _poly_membership(weights, biases, anchors, i, xx, yy, steep, cutoff, sig, k):
    """g_i at pixel (xx, yy); stores the face sigmoids into sig[k, :].

    Returns 0.0 as soon as the running product drops below cutoff.
    """
    m = weights.shape[1]
    xl = xx - anchors[i, 0]
    yl = yy - anchors[i, 1]
    gi = 1.0
    for j in range(m):
        z = steep * (weights[i, j, 0] * xl + weights[i, j, 1] * yl + biases[i, j])
        if z < -_CLAMP:
            z = -_CLAMP
        elif z > _CLAMP:
            z = _CLAMP
        s = 1.0 / (1.0 + np.exp(-z))
        sig[k, j] = s
        gi *= s
        if gi < cutoff:
            return 0.0
    return gi


@njit(cache=True)
def _field_stats_kernel(img, weights, biases, anchors, members,
                        cy0, cy1, cx0, cx1, steep, labels, region, cutoff):
    n_cells, kmax = members.shape
    n, m, _ = weights.shape
    h, w = img.shape
    fhat = np.zeros((h, w))
    support = np.zeros(n)
    core_w = np.zeros(n)
    core_i = np.zeros(n)
    cents = np.zeros((n, 2))
    sig = np.empty((kmax, m))
    for c in range(n_cells):
        nk = 0
        for k in range(kmax):
            if members[c, k] >= 0:
                nk += 1
        for iy in range(cy0[c], cy1[c]):
            yy = float(iy)
            for ix in range(cx0[c], cx1[c]):
                xx = float(ix)
                val = img[iy, ix]
                total = 1.0
                for k in range(nk):
                    i = members[c, k]
                    if region > 0 and labels[i] != region:
                        continue
                    gi = _poly_membership(weights, biases, anchors, i, xx, yy,
                                          steep, cutoff, sig, k)
                    total *= 1.0 - gi
                    support[i] += gi
                    # quartic weighting for the intensity mean: suppresses the
                    # sigmoid tails that otherwise dilute small polytopes with
                    # neighboring-region intensity
                    g4 = gi * gi
                    g4 *= g4
                    core_w[i] += g4
                    core_i[i] += g4 * val
                    cents[i, 0] += gi * xx
                    cents[i, 1] += gi * yy
                fhat[iy, ix] = 1.0 - total
    return fhat, support, core_w, core_i, cents


@njit(cache=True)
def _twophase_kernel(img, weights, biases, anchors, members,
                     cy0, cy1, cx0, cx1, steep, c1, c2, cutoff):
    n_cells, kmax = members.shape
    n, m, _ = weights.shape
    grad_w = np.zeros((n, m, 2))
    grad_b = np.zeros((n, m))
    support = np.zeros(n)
    cents = np.zeros((n, 2))
    energy = 0.0
    sum_f = 0.0
    sum_if = 0.0
    sig = np.empty((kmax, m))
    g = np.empty(kmax)
    pref = np.empty(kmax)
    suf = np.empty(kmax)
    for c in range(n_cells):
        nk = 0
        for k in range(kmax):
            if members[c, k] >= 0:
                nk += 1
        for iy in range(cy0[c], cy1[c]):
            yy = float(iy)
            for ix in range(cx0[c], cx1[c]):
                xx = float(ix)
                val = img[iy, ix]
                for k in range(nk):
                    g[k] = _poly_membership(weights, biases, anchors, members[c, k],
                                            xx, yy, steep, cutoff, sig, k)
                total = 1.0
                if nk > 0:
                    pref[0] = 1.0
                    for k in range(1, nk):
                        pref[k] = pref[k - 1] * (1.0 - g[k - 1])
                    suf[nk - 1] = 1.0
                    for k in range(nk - 2, -1, -1):
                        suf[k] = suf[k + 1] * (1.0 - g[k + 1])
                    total = pref[nk - 1] * (1.0 - g[nk - 1])
                f = 1.0 - total
                r1 = val - c1
                r2 = val - c2
                energy += r1 * r1 * f + r2 * r2 * (1.0 - f)
                sum_f += f
                sum_if += val * f
                res = r1 * r1 - r2 * r2
                for k in range(nk):
                    gi = g[k]
                    i = members[c, k]
                    support[i] += gi
                    cents[i, 0] += gi * xx
                    cents[i, 1] += gi * yy
                    if gi <= 0.0:
                        continue
                    base = res * pref[k] * suf[k] * gi * steep
                    if base == 0.0:
                        continue
                    xl = xx - anchors[i, 0]
                    yl = yy - anchors[i, 1]
                    for j in range(m):
                        cj = base * (1.0 - sig[k, j])
                        grad_w[i, j, 0] += cj * xl
                        grad_w[i, j, 1] += cj * yl
                        grad_b[i, j] += cj
    return energy, grad_w, grad_b, sum_f, sum_if, support, cents


@njit(cache=True)
def _deform_kernel(img, weights, biases, anchors, members, member_labels,
                   cy0, cy1, cx0, cx1, steep, means, cutoff):
    n_cells, kmax = members.shape
    n, m, _ = weights.shape
    n_regions = means.shape[0]
    grad_w = np.zeros((n, m, 2))
    grad_b = np.zeros((n, m))
    support = np.zeros(n)
    cents = np.zeros((n, 2))
    energy = 0.0
    sig = np.empty((kmax, m))
    g = np.empty(kmax)
    pref = np.empty(kmax)
    suf = np.empty(kmax)
    for c in range(n_cells):
        nk = 0
        for k in range(kmax):
            if members[c, k] >= 0:
                nk += 1
        for iy in range(cy0[c], cy1[c]):
            yy = float(iy)
            for ix in range(cx0[c], cx1[c]):
                xx = float(ix)
                val = img[iy, ix]
                # best region for this intensity; ties go to the lower index
                rb = 1
                best = (val - means[0]) * (val - means[0])
                for r in range(1, n_regions):
                    d = (val - means[r]) * (val - means[r])
                    if d < best:
                        best = d
                        rb = r + 1
                for k in range(nk):
                    g[k] = _poly_membership(weights, biases, anchors, members[c, k],
                                            xx, yy, steep, cutoff, sig, k)
                # leave-one-out prefix/suffix within each same-label run
                for k in range(nk):
                    if k > 0 and member_labels[c, k] == member_labels[c, k - 1]:
                        pref[k] = pref[k - 1] * (1.0 - g[k - 1])
                    else:
                        pref[k] = 1.0
                for k in range(nk - 1, -1, -1):
                    if k < nk - 1 and member_labels[c, k] == member_labels[c, k + 1]:
                        suf[k] = suf[k + 1] * (1.0 - g[k + 1])
                    else:
                        suf[k] = 1.0
                # energy: sum_r f_r - 2 f_rb over regions present in the block
                for k in range(nk):
                    last = k == nk - 1 or member_labels[c, k] != member_labels[c, k + 1]
                    if last:
                        f_r = 1.0 - pref[k] * (1.0 - g[k]) * suf[k]
                        energy += f_r
                        if member_labels[c, k] == rb:
                            energy -= 2.0 * f_r
                for k in range(nk):
                    gi = g[k]
                    i = members[c, k]
                    support[i] += gi
                    cents[i, 0] += gi * xx
                    cents[i, 1] += gi * yy
                    if gi <= 0.0:
                        continue
                    sign = 1.0
                    if member_labels[c, k] == rb:
                        sign = -1.0
                    base = sign * pref[k] * suf[k] * gi * steep
                    if base == 0.0:
                        continue
                    xl = xx - anchors[i, 0]
                    yl = yy - anchors[i, 1]
                    for j in range(m):
                        cj = base * (1.0 - sig[k, j])
                        grad_w[i, j, 0] += cj * xl
                        grad_w[i, j, 1] += cj * yl
                        grad_b[i, j] += cj
    return energy, grad_w, grad_b, support, cents


@njit(cache=True)
def _label_map_kernel(img, weights, biases, anchors, members, member_labels,
                      cy0, cy1, cx0, cx1, steep, means, cutoff):
    n_cells, kmax = members.shape
    m = weights.shape[1]
    n_regions = means.shape[0]
    h, w = img.shape
    out = np.zeros((h, w), dtype=np.int64)
    sig = np.empty((kmax, m))
    g = np.empty(kmax)
    for c in range(n_cells):
        nk = 0
        for k in range(kmax):
            if members[c, k] >= 0:
                nk += 1
        for iy in range(cy0[c], cy1[c]):
            yy = float(iy)
            for ix in range(cx0[c], cx1[c]):
                xx = float(ix)
                for k in range(nk):
                    g[k] = _poly_membership(weights, biases, anchors, members[c, k],
                                            xx, yy, steep, cutoff, sig, k)
                # per-region level sets from same-label runs (labels ascend)
                best_f = -1.0
                best_label = 0
                prod = 1.0
                for k in range(nk):
                    prod *= 1.0 - g[k]
                    last = k == nk - 1 or member_labels[c, k] != member_labels[c, k + 1]
                    if last:
                        f_r = 1.0 - prod
                        if f_r > best_f:
                            best_f = f_r
                            best_label = member_labels[c, k]
                        prod = 1.0
                if best_f >= 0.5:
                    out[iy, ix] = best_label
                else:
                    # no region claims the pixel: fall back to the best
                    # intensity match (ties to the lower index)
                    val = img[iy, ix]
                    rb = 1
                    best = (val - means[0]) * (val - means[0])
                    for r in range(1, n_regions):
                        d = (val - means[r]) * (val - means[r])
                        if d < best:
                            best = d
                            rb = r + 1
                    out[iy, ix] = rb
    return out


# -- python-side wrappers ------------------------------------------------------

def field_pass(model, region: int = 0, image: np.ndarray | None = None,
               cutoff: float = DEFAULT_CUTOFF):
    """Evaluate f (or f_region) plus per-polytope soft sums.

    Returns (fhat, support, core_weight, core_intensity, centroid_sums):
    support is sum g_i, the core pair are the quartic-weighted intensity
    sums behind the polytope means, and centroid_sums are g-weighted
    coordinate sums.  The per-polytope sums are only meaningful when
    region == 0 (no filtering).
    """
    h, w = model.image_shape
    img = np.zeros((h, w)) if image is None else _as_image(model, image)
    args = _prep(model)
    return _field_stats_kernel(img, *args[:8], args[8], model.labels, region, cutoff)


def twophase_pass(model, image, c1: float, c2: float, cutoff: float = DEFAULT_CUTOFF):
    """One two-phase accumulation sweep: energy, gradients and soft sums."""
    img = _as_image(model, image)
    out = _twophase_kernel(img, *_prep(model), float(c1), float(c2), cutoff)
    if not (np.isfinite(out[0]) and np.all(np.isfinite(out[1])) and np.all(np.isfinite(out[2]))):
        raise NumericalError("non-finite two-phase energy or gradient; "
                             "check steepness and step size")
    return out


def member_label_table(model) -> np.ndarray:
    """Labels of the cell member table (padding slots carry 0)."""
    members = model.cell_members
    tab = np.zeros(members.shape, dtype=np.int64)
    valid = members >= 0
    tab[valid] = model.labels[members[valid]]
    return tab


def deform_pass(model, image, region_means, cutoff: float = DEFAULT_CUTOFF):
    """One region-competition sweep: deformation energy, gradients, soft sums."""
    img = _as_image(model, image)
    means = np.ascontiguousarray(region_means, dtype=np.float64)
    args = _prep(model)
    out = _deform_kernel(img, args[0], args[1], args[2], args[3],
                         member_label_table(model),
                         args[4], args[5], args[6], args[7], args[8], means, cutoff)
    if not (np.isfinite(out[0]) and np.all(np.isfinite(out[1])) and np.all(np.isfinite(out[2]))):
        raise NumericalError("non-finite deformation energy or gradient; "
                             "check steepness and step size")
    return out


def label_map_pass(model, image, region_means, cutoff: float = DEFAULT_CUTOFF) -> np.ndarray:
    """Per-pixel region assignment: argmax_r f_r, intensity fallback below 0.5."""
    img = _as_image(model, image)
    means = np.ascontiguousarray(region_means, dtype=np.float64)
    args = _prep(model)
    return _label_map_kernel(img, args[0], args[1], args[2], args[3],
                             member_label_table(model),
                             args[4], args[5], args[6], args[7], args[8], means, cutoff)
