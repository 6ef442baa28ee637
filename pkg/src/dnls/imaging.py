"""Image I/O, phantom generation, thresholding and evaluation metrics.

Grayscale images and label maps are plain 2-D uint8 numpy arrays (row-major,
shape (height, width)); label maps carry 1-based region indices.  The
interchange format is binary PGM (P5) with maxval 255, which round-trips
bit-exactly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import PgmFormatError

# -- PGM (P5) ------------------------------------------------------------------


def write_pgm(path, image) -> None:
    """Write a 2-D uint8 array as binary PGM, maxval 255."""
    img = np.asarray(image)
    if img.ndim != 2:
        raise ValueError("PGM writer expects a 2-D array")
    img = img.astype(np.uint8)
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(img.tobytes())


def read_pgm(path) -> np.ndarray:
    """Read a binary PGM (P5, maxval 255) into a 2-D uint8 array.

    Rejects other magics, other maxvals, and truncated payloads.  Header
    comments (# ...) are allowed.
    """
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:2] != b"P5":
        raise PgmFormatError(f"{path}: not a binary PGM (P5) file")
    pos = 2
    fields = []
    while len(fields) < 3:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise PgmFormatError(f"{path}: malformed PGM header")
        fields.append(data[start:pos])
    try:
        w, h, maxval = (int(f) for f in fields)
    except ValueError as exc:
        raise PgmFormatError(f"{path}: non-numeric PGM header field") from exc
    if maxval != 255:
        raise PgmFormatError(f"{path}: unsupported maxval {maxval} (only 255)")
    if w <= 0 or h <= 0:
        raise PgmFormatError(f"{path}: bad dimensions {w}x{h}")
    pos += 1  # single whitespace byte after maxval
    payload = data[pos:pos + w * h]
    if len(payload) < w * h:
        raise PgmFormatError(f"{path}: truncated payload "
                             f"({len(payload)} of {w * h} bytes)")
    return np.frombuffer(payload, dtype=np.uint8).reshape(h, w).copy()


# -- overlap metrics -------------------------------------------------------------


def dice(a, b) -> float:
    """Dice overlap 2|A&B| / (|A|+|B|) of two binary masks; 1.0 if both empty."""
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise ValueError(f"mask shapes differ: {a.shape} vs {b.shape}")
    denom = int(a.sum()) + int(b.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int(np.logical_and(a, b).sum()) / denom


def dice_multilabel(pred, truth, matching: str = "fixed"):
    """Per-region Dice of two label maps plus the unweighted mean.

    matching="fixed" compares label r against label r directly;
    matching="hungarian-greedy" first pairs predicted with ground-truth
    labels by descending pixel overlap (so the score is invariant to any
    permutation of the predicted labels), then scores each ground-truth
    region against its matched prediction.

    Returns (per_region, mean) where per_region maps ground-truth label ->
    Dice value.
    """
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    if pred.shape != truth.shape:
        raise ValueError(f"label map shapes differ: {pred.shape} vs {truth.shape}")
    if matching not in ("fixed", "hungarian-greedy"):
        raise ValueError(f"unknown matching mode {matching!r}")

    truth_labels = [int(v) for v in np.unique(truth)]
    if matching == "fixed":
        labels = sorted(set(truth_labels) | {int(v) for v in np.unique(pred)})
        per = {r: dice(pred == r, truth == r) for r in labels}
    else:
        pred_labels = [int(v) for v in np.unique(pred)]
        overlap = np.zeros((len(pred_labels), len(truth_labels)), dtype=np.int64)
        for pi, pl in enumerate(pred_labels):
            mask = pred == pl
            for ti, tl in enumerate(truth_labels):
                overlap[pi, ti] = int(np.logical_and(mask, truth == tl).sum())
        match: dict[int, int] = {}
        work = overlap.copy()
        while work.size and work.max() > 0:
            pi, ti = np.unravel_index(int(work.argmax()), work.shape)
            match[truth_labels[ti]] = pred_labels[pi]
            work[pi, :] = -1
            work[:, ti] = -1
        per = {}
        for tl in truth_labels:
            if tl in match:
                per[tl] = dice(pred == match[tl], truth == tl)
            else:
                per[tl] = dice(np.zeros_like(truth, dtype=bool), truth == tl)
    mean = float(np.mean(list(per.values())))
    return per, mean


# -- phantom generation ----------------------------------------------------------


@dataclass
class PhantomSpec:
    """Recipe for a lattice phantom with per-object ground truth.

    `intensities` lists distinct gray levels, background first; objects take
    the following entries in order.  When omitted, an evenly spaced ascending
    plan is generated.  Objects are laid out on a lattice with at least
    `margin` pixels of clearance, so they never overlap.
    """

    size: tuple[int, int] = (300, 300)
    n_objects: int = 12
    shape: str = "disk"
    intensities: list[int] | None = None
    noise_sigma: float = 0.0
    seed: int = 0
    margin: int = 4
    radius_range: tuple[float, float] = (0.7, 0.9)  # fraction of the largest feasible radius

    def __post_init__(self):
        if isinstance(self.size, int):
            self.size = (self.size, self.size)
        if self.shape not in ("disk", "square"):
            raise ValueError(f"unknown object shape {self.shape!r}")
        if self.n_objects < 1:
            raise ValueError("need at least one object")
        if self.noise_sigma < 0:
            raise ValueError("noise sigma must be >= 0")
        if self.intensities is None:
            self.intensities = default_intensity_plan(self.n_objects)
        if len(self.intensities) != len(set(self.intensities)):
            raise ValueError("intensity plan entries must be distinct")
        if self.n_objects > len(self.intensities) - 1:
            raise ValueError("intensity plan too short for the object count")


def default_intensity_plan(n_objects: int) -> list[int]:
    """Background plus n ascending object gray levels, evenly spread."""
    levels = np.linspace(10, 250, n_objects + 1)
    return [int(round(v)) for v in levels]


def generate_phantom(spec: PhantomSpec):
    """Render the phantom; returns (image uint8, ground-truth label map uint8).

    Ground truth labels background as region 1 and object k as region k+1,
    following the intensity plan order.  Output is a pure function of the
    spec (the seed drives all randomness).
    """
    h, w = spec.size
    gy = int(np.ceil(np.sqrt(spec.n_objects)))
    gx = int(np.ceil(spec.n_objects / gy))
    cell_h, cell_w = h / gy, w / gx
    r_max = min(cell_h, cell_w) / 2.0 - spec.margin
    if r_max < 2.0:
        raise ValueError(f"cannot pack {spec.n_objects} objects with margin "
                         f"{spec.margin} into {h}x{w}")
    rng = np.random.default_rng(spec.seed)
    base = np.full((h, w), spec.intensities[0], dtype=float)
    truth = np.ones((h, w), dtype=np.uint8)
    ys, xs = np.mgrid[0:h, 0:w]
    lo, hi = spec.radius_range
    for k in range(spec.n_objects):
        cy = (k // gx + 0.5) * cell_h
        cx = (k % gx + 0.5) * cell_w
        r = r_max * rng.uniform(lo, hi)
        slack = r_max - r
        cy += rng.uniform(-slack, slack)
        cx += rng.uniform(-slack, slack)
        if spec.shape == "disk":
            inside = (xs - cx) ** 2 + (ys - cy) ** 2 <= r * r
        else:
            inside = (np.abs(xs - cx) <= r) & (np.abs(ys - cy) <= r)
        base[inside] = spec.intensities[k + 1]
        truth[inside] = k + 2
    img = add_noise(base, spec.noise_sigma, rng)
    return img, truth


def add_noise(base, sigma: float, rng) -> np.ndarray:
    """Clipped additive Gaussian noise, quantized to uint8."""
    base = np.asarray(base, dtype=float)
    if sigma > 0:
        base = base + rng.normal(0.0, sigma, size=base.shape)
    return np.clip(np.round(base), 0, 255).astype(np.uint8)


def disk_phantom(size: int = 200, radius: float = 50.0, fg: int = 200, bg: int = 20,
                 noise_sigma: float = 0.0, seed: int = 0):
    """Bright disk at the image center; returns (image, boolean truth mask)."""
    c = (size - 1) / 2.0
    ys, xs = np.mgrid[0:size, 0:size]
    mask = (xs - c) ** 2 + (ys - c) ** 2 <= radius * radius
    img = add_noise(np.where(mask, fg, bg).astype(float), noise_sigma,
                    np.random.default_rng(seed))
    return img, mask


def annulus_phantom(size: int = 200, r_outer: float = 60.0, r_inner: float = 30.0,
                    fg: int = 200, bg: int = 20, noise_sigma: float = 0.0, seed: int = 0):
    """Bright ring (object with a hole); returns (image, boolean truth mask)."""
    if not 0 < r_inner < r_outer:
        raise ValueError("need 0 < r_inner < r_outer")
    c = (size - 1) / 2.0
    ys, xs = np.mgrid[0:size, 0:size]
    d2 = (xs - c) ** 2 + (ys - c) ** 2
    mask = (d2 <= r_outer ** 2) & (d2 >= r_inner ** 2)
    img = add_noise(np.where(mask, fg, bg).astype(float), noise_sigma,
                    np.random.default_rng(seed))
    return img, mask


# -- multilevel Otsu thresholding -------------------------------------------------


def histogram256(image) -> np.ndarray:
    img = np.asarray(image, dtype=np.uint8)
    return np.bincount(img.ravel(), minlength=256).astype(np.int64)


def _segment_sse(hist):
    """sse[a, b]: weighted within-class squared error of gray levels a..b."""
    levels = np.arange(256, dtype=float)
    hist = np.asarray(hist, dtype=float)
    w = np.concatenate([[0.0], np.cumsum(hist)])
    s = np.concatenate([[0.0], np.cumsum(hist * levels)])
    q = np.concatenate([[0.0], np.cumsum(hist * levels * levels)])
    a = np.arange(256)[:, None]
    b = np.arange(256)[None, :]
    cw = w[b + 1] - w[a]
    cs = s[b + 1] - s[a]
    cq = q[b + 1] - q[a]
    sse = cq - np.where(cw > 0, cs * cs / np.where(cw > 0, cw, 1.0), 0.0)
    sse = np.maximum(sse, 0.0)  # exact-zero segments can round slightly negative
    sse[(b < a)] = np.inf
    return sse


def otsu_thresholds(hist, n_classes: int) -> np.ndarray:
    """Globally optimal multilevel Otsu thresholds for a 256-bin histogram.

    Maximizing between-class variance equals minimizing the total weighted
    within-class squared error, which is solved exactly by dynamic
    programming over contiguous histogram segments; the result therefore
    attains the same optimum as exhaustive enumeration of threshold tuples.
    Returns n_classes - 1 ascending thresholds t; class k holds gray levels
    t_{k-1} < v <= t_k.

    A single-valued histogram is degenerate: all thresholds collapse onto
    that value, which puts every pixel in class 1.
    """
    hist = np.asarray(hist, dtype=np.int64)
    occupied = np.flatnonzero(hist)
    if occupied.size == 0:
        raise ValueError("empty histogram")
    if occupied.size == 1:
        return np.full(n_classes - 1, occupied[0], dtype=np.int64)
    if n_classes == 2:
        return np.array([_otsu_single(hist)], dtype=np.int64)

    sse = _segment_sse(hist)
    n_bins = 256
    # dp[b] = optimal cost of covering bins 0..b with the current class count
    dp = sse[0, :].copy()
    cut = np.zeros((n_classes, n_bins), dtype=np.int64)
    for k in range(1, n_classes):
        # candidate[a, b] = dp[a - 1] + sse[a, b] for 1 <= a <= b
        cand = dp[:-1, None] + sse[1:, :]
        best = np.argmin(cand, axis=0)
        new_dp = cand[best, np.arange(n_bins)]
        cut[k] = best  # last class of the (k+1)-class solution starts at best+1
        dp = new_dp
    thresholds = np.empty(n_classes - 1, dtype=np.int64)
    b = n_bins - 1
    for k in range(n_classes - 1, 0, -1):
        start = cut[k, b]  # last class covers bins start+1..b
        thresholds[k - 1] = start
        b = start
    return thresholds


def _otsu_single(hist) -> int:
    """Classic single Otsu threshold; plateau ties resolved to the middle.

    Scans all candidate thresholds for the within-class squared error and,
    when several are exactly optimal (e.g. an empty gap between two modes),
    returns the midpoint of the first and last optimum so the threshold
    falls strictly between separated modes.
    """
    hist = np.asarray(hist, dtype=float)
    levels = np.arange(256, dtype=float)
    w0 = np.cumsum(hist)[:-1]
    s0 = np.cumsum(hist * levels)[:-1]
    q0 = np.cumsum(hist * levels * levels)[:-1]
    total_w, total_s, total_q = hist.sum(), (hist * levels).sum(), (hist * levels * levels).sum()
    w1 = total_w - w0
    s1 = total_s - s0
    q1 = total_q - q0
    with np.errstate(invalid="ignore", divide="ignore"):
        sse = (q0 - np.where(w0 > 0, s0 * s0 / np.where(w0 > 0, w0, 1), 0)
               + q1 - np.where(w1 > 0, s1 * s1 / np.where(w1 > 0, w1, 1), 0))
    valid = (w0 > 0) & (w1 > 0)
    if not valid.any():
        return int(np.flatnonzero(hist)[0])
    sse = np.where(valid, sse, np.inf)
    optima = np.flatnonzero(sse <= sse.min() + 1e-9)
    mid = int((optima[0] + optima[-1]) // 2)
    # a plateau from an empty gap is contiguous, so its midpoint is optimal;
    # fall back to the first optimum if the ties were not contiguous
    if sse[mid] > sse.min() + 1e-9:
        mid = int(optima[0])
    return mid


def multi_otsu(image, n_classes: int):
    """Multilevel Otsu split of an 8-bit image into 2..5 classes.

    Returns (thresholds, label map) with 1-based class labels; class k holds
    intensities in (t_{k-1}, t_k].  Degenerate (constant) images yield all
    pixels in class 1.
    """
    if not 2 <= n_classes <= 5:
        raise ValueError(f"n_classes must be in [2, 5], got {n_classes}")
    return _multi_otsu_any(image, n_classes)


def _multi_otsu_any(image, n_classes: int):
    """multi_otsu without the public class-count cap (exact for any count)."""
    img = np.asarray(image, dtype=np.uint8)
    thresholds = otsu_thresholds(histogram256(img), n_classes)
    labels = (np.digitize(img, thresholds, right=True) + 1).astype(np.uint8)
    return thresholds, labels


# -- overlays ---------------------------------------------------------------------


def mask_boundary(mask) -> np.ndarray:
    """Pixels inside the mask with a 4-connected neighbor outside it."""
    m = np.asarray(mask, dtype=bool)
    inner = np.zeros_like(m)
    inner[1:-1, 1:-1] = (m[1:-1, 1:-1] & m[:-2, 1:-1] & m[2:, 1:-1]
                         & m[1:-1, :-2] & m[1:-1, 2:])
    return m & ~inner


def label_boundaries(labels) -> np.ndarray:
    """Pixels whose 4-neighborhood contains a different region label."""
    lab = np.asarray(labels)
    edge = np.zeros(lab.shape, dtype=bool)
    edge[:-1, :] |= lab[:-1, :] != lab[1:, :]
    edge[1:, :] |= lab[1:, :] != lab[:-1, :]
    edge[:, :-1] |= lab[:, :-1] != lab[:, 1:]
    edge[:, 1:] |= lab[:, 1:] != lab[:, :-1]
    return edge


def burn_overlay(image, boundary) -> np.ndarray:
    """Copy of the image with boundary pixels burned to max intensity."""
    img = np.asarray(image, dtype=np.uint8).copy()
    img[np.asarray(boundary, dtype=bool)] = 255
    return img
