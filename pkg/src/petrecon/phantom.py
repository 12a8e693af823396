"""Sphere phantoms and image-domain dose thinning.

A phantom is a body ellipse filled with a uniform background activity plus
a ring of hot spheres (and optional cold discs), rendered on a square pixel
grid. Partial volume at region boundaries is handled by supersampling each
pixel 4x4 and averaging the subpixel activities, so edge pixels carry
fractional coverage instead of a hard step.

Dose reduction happens in image space: pixel counts are drawn as
Poisson(fraction * counts_per_activity * activity) and divided back by
(fraction * counts_per_activity), which leaves the expectation equal to the
ground truth while the variance grows as 1/(fraction * counts_per_activity
* activity).

Units: lengths in mm, activities in kBq/ml. Coordinates are offsets from
the grid center, x along columns and y along rows.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

SUPERSAMPLE = 4


class PhantomError(ValueError):
    """Invalid phantom geometry or dose model."""


@dataclass(frozen=True)
class Sphere:
    """A filled disc: center offset (mm), diameter (mm), activity ratio
    relative to the background (>1 hot, <1 cold)."""

    center_mm: tuple[float, float]
    diameter_mm: float
    activity_ratio: float

    @property
    def radius_mm(self) -> float:
        return 0.5 * self.diameter_mm


# NEMA-like ring: six spheres, 60 degree spacing, centers 57.2 mm from the
# grid center, diameters 10..37 mm, all hot at 4x background.
_RING_RADIUS_MM = 57.2
_DIAMETERS_MM = (10.0, 13.0, 17.0, 22.0, 28.0, 37.0)


def _ring(ring_radius: float, diameters, ratios, phase_deg: float = 0.0,
          radial_jitter=None) -> tuple[Sphere, ...]:
    spheres = []
    n = len(diameters)
    for k, d in enumerate(diameters):
        ang = math.radians(phase_deg + 360.0 * k / n)
        r = ring_radius if radial_jitter is None else ring_radius + radial_jitter[k]
        cx = r * math.cos(ang)
        cy = r * math.sin(ang)
        ratio = ratios[k] if not np.isscalar(ratios) else ratios
        spheres.append(Sphere((cx, cy), d, float(ratio)))
    return tuple(spheres)


@dataclass(frozen=True)
class PhantomSpec:
    """Geometry and activities for one phantom image.

    ``liver_center_mm``/``liver_radius_mm`` declare a background disc kept
    clear of every sphere; it serves as the reference region for contrast
    and noise statistics.
    """

    height: int = 128
    width: int = 128
    pixel_mm: float = 2.0
    body_semiaxes_mm: tuple[float, float] = (112.0, 92.0)
    background_kbq_ml: float = 5.3
    spheres: tuple[Sphere, ...] = field(default_factory=lambda: _ring(_RING_RADIUS_MM, _DIAMETERS_MM, 4.0))
    cold_regions: tuple[Sphere, ...] = ()
    liver_center_mm: tuple[float, float] = (0.0, 0.0)
    liver_radius_mm: float = 15.0


@dataclass(frozen=True)
class DoseModel:
    """Dose fraction, detector counts per unit activity, and the RNG seed."""

    fraction: float
    counts_per_activity: float
    seed: int


@dataclass
class ImageGrid:
    """A non-negative activity image with its pixel pitch."""

    values: np.ndarray
    pixel_mm: float

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float32)
        if v.ndim != 2:
            raise PhantomError("ImageGrid wants a 2-D array")
        if not np.isfinite(v).all() or (v < 0).any():
            raise PhantomError("ImageGrid values must be finite and non-negative")
        if self.pixel_mm <= 0:
            raise PhantomError("pixel size must be positive")
        self.values = v

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]


def validate_spec(spec: PhantomSpec) -> None:
    a, b = spec.body_semiaxes_mm
    if a <= 0 or b <= 0:
        raise PhantomError("body semi-axes must be positive")
    if spec.background_kbq_ml < 0:
        raise PhantomError("background activity must be non-negative")
    if spec.height <= 0 or spec.width <= 0 or spec.pixel_mm <= 0:
        raise PhantomError("grid dims and pixel size must be positive")
    half_w = 0.5 * spec.width * spec.pixel_mm
    half_h = 0.5 * spec.height * spec.pixel_mm
    if a > half_w or b > half_h:
        raise PhantomError("body ellipse does not fit the grid")
    regions = list(spec.spheres) + list(spec.cold_regions)
    for s in regions:
        if s.diameter_mm <= 2.0 * spec.pixel_mm:
            raise PhantomError(
                f"sphere diameter {s.diameter_mm} mm needs more than two pixels"
            )
        if s.activity_ratio < 0:
            raise PhantomError("activity ratio must be non-negative")
        r = s.radius_mm
        if a - r <= 0 or b - r <= 0:
            raise PhantomError("sphere larger than the body")
        cx, cy = s.center_mm
        if (cx / (a - r)) ** 2 + (cy / (b - r)) ** 2 > 1.0:
            raise PhantomError(f"sphere at {s.center_mm} leaves the body ellipse")
    for i in range(len(regions)):
        for j in range(i + 1, len(regions)):
            ci, cj = regions[i].center_mm, regions[j].center_mm
            dist = math.hypot(ci[0] - cj[0], ci[1] - cj[1])
            if dist < regions[i].radius_mm + regions[j].radius_mm:
                raise PhantomError("spheres overlap")
    # the liver disc must stay pure background
    lr = spec.liver_radius_mm
    lcx, lcy = spec.liver_center_mm
    if lr <= 0:
        raise PhantomError("liver radius must be positive")
    if (lcx / (a - lr)) ** 2 + (lcy / (b - lr)) ** 2 > 1.0:
        raise PhantomError("liver disc leaves the body ellipse")
    for s in regions:
        dist = math.hypot(lcx - s.center_mm[0], lcy - s.center_mm[1])
        if dist < lr + s.radius_mm:
            raise PhantomError("liver disc overlaps a sphere")


def _subpixel_coords(n_pix: int, pixel_mm: float) -> np.ndarray:
    # subpixel centers in mm, offset from the grid center
    n = n_pix * SUPERSAMPLE
    return (np.arange(n, dtype=np.float64) + 0.5) * (pixel_mm / SUPERSAMPLE) - 0.5 * n_pix * pixel_mm


def generate_phantom(spec: PhantomSpec) -> ImageGrid:
    """Render the spec to an activity image. Pure and seed-free: the same
    spec always yields byte-identical pixels."""
    validate_spec(spec)
    ys = _subpixel_coords(spec.height, spec.pixel_mm)[:, None]
    xs = _subpixel_coords(spec.width, spec.pixel_mm)[None, :]
    a, b = spec.body_semiaxes_mm
    bg = spec.background_kbq_ml
    vals = np.where((xs / a) ** 2 + (ys / b) ** 2 <= 1.0, bg, 0.0)
    for s in list(spec.cold_regions) + list(spec.spheres):
        cx, cy = s.center_mm
        inside = (xs - cx) ** 2 + (ys - cy) ** 2 <= s.radius_mm**2
        vals = np.where(inside, s.activity_ratio * bg, vals)
    n = SUPERSAMPLE
    coarse = vals.reshape(spec.height, n, spec.width, n).mean(axis=(1, 3))
    return ImageGrid(coarse.astype(np.float32), spec.pixel_mm)


def simulate_lowdose(truth: ImageGrid, dose: DoseModel) -> ImageGrid:
    """Poisson-thin the truth image down to the dose fraction."""
    f, s = dose.fraction, dose.counts_per_activity
    if not (0 < f <= 1):
        raise PhantomError(f"dose fraction {f} outside (0, 1]")
    if s <= 0:
        raise PhantomError("counts_per_activity must be positive")
    peak = float(truth.values.max())
    if f * s * peak < 1.0:
        raise PhantomError(
            f"count scale too low: fraction*counts_per_activity*peak = {f * s * peak:.3g} < 1"
        )
    rng = np.random.default_rng(np.random.SeedSequence(dose.seed))
    lam = f * s * truth.values.astype(np.float64)
    counts = rng.poisson(lam)
    return ImageGrid((counts / (f * s)).astype(np.float32), truth.pixel_mm)


# --------------------------------------------------------------- datasets

@dataclass
class Sample:
    """One phantom with its ground truth and per-fraction low-dose images."""

    sample_id: str
    spec: PhantomSpec
    truth: ImageGrid
    lows: dict[float, ImageGrid]
    seed: int


@dataclass
class Dataset:
    train: list[Sample]
    test: list[Sample]
    fractions: tuple[float, ...]
    counts_per_activity: float
    seed: int


DEFAULT_FRACTIONS = (0.5, 0.25, 0.1, 0.01)


def _jittered_spec(base: PhantomSpec, rng: np.random.Generator) -> PhantomSpec:
    """Randomize ring phase, radial positions, ratios, and background."""
    scale = min(base.body_semiaxes_mm) / 92.0
    diameters = [s.diameter_mm for s in base.spheres]
    n = len(diameters)
    phase = rng.uniform(0.0, 360.0)
    radial = rng.uniform(-4.0 * scale, 4.0 * scale, size=n)
    ratios = rng.uniform(3.0, 5.0, size=n)
    ring_r = _RING_RADIUS_MM * scale if not base.spheres else (
        math.hypot(*base.spheres[0].center_mm)
    )
    spheres = _ring(ring_r, diameters, ratios, phase_deg=phase, radial_jitter=radial)
    background = rng.uniform(4.0, 7.0)
    return replace(base, spheres=spheres, background_kbq_ml=float(background))


def make_dataset(
    n_train: int,
    n_test: int,
    fractions=DEFAULT_FRACTIONS,
    seed: int = 0,
    base_spec: PhantomSpec | None = None,
    counts_per_activity: float = 4.0,
) -> Dataset:
    """Build disjoint train/test phantom sets with per-fraction low-dose pairs.

    Every random draw descends from ``seed`` through a counter-based seed
    tree (split index, sample index, fraction index), so any image can be
    regenerated in isolation and train/test never share a stream.
    """
    base = base_spec if base_spec is not None else PhantomSpec()
    fractions = tuple(float(f) for f in fractions)
    if len(set(fractions)) != len(fractions):
        raise PhantomError("duplicate dose fractions")
    splits: list[list[Sample]] = [[], []]
    for split_idx, count, tag in ((0, n_train, "train"), (1, n_test, "test")):
        for i in range(count):
            ss = np.random.SeedSequence([seed, split_idx, i])
            spec_rng = np.random.default_rng(ss)
            spec = _jittered_spec(base, spec_rng)
            truth = generate_phantom(spec)
            lows = {}
            for k, f in enumerate(fractions):
                low_seed = int(
                    np.random.SeedSequence([seed, split_idx, i, 1000 + k]).generate_state(1)[0]
                )
                lows[f] = simulate_lowdose(
                    truth, DoseModel(f, counts_per_activity, low_seed)
                )
            sample_seed = int(ss.generate_state(1)[0])
            splits[split_idx].append(
                Sample(f"{tag}{i:04d}", spec, truth, lows, sample_seed)
            )
    return Dataset(splits[0], splits[1], fractions, counts_per_activity, seed)


# ------------------------------------------------------------ ROI helpers

def disc_mask(shape: tuple[int, int], pixel_mm: float, center_mm, radius_mm: float,
              erode_mm: float = 0.0) -> np.ndarray:
    """Boolean mask of pixels whose centers fall inside a disc. ``erode_mm``
    shrinks the radius, useful for excluding partial-volume boundary pixels."""
    H, W = shape
    ys = ((np.arange(H, dtype=np.float64) + 0.5) - 0.5 * H) * pixel_mm
    xs = ((np.arange(W, dtype=np.float64) + 0.5) - 0.5 * W) * pixel_mm
    cy = ys[:, None] - center_mm[1]
    cx = xs[None, :] - center_mm[0]
    r = radius_mm - erode_mm
    if r <= 0:
        return np.zeros(shape, dtype=bool)
    return cx**2 + cy**2 <= r**2


def body_mask(spec: PhantomSpec) -> np.ndarray:
    H, W = spec.height, spec.width
    ys = ((np.arange(H, dtype=np.float64) + 0.5) - 0.5 * H) * spec.pixel_mm
    xs = ((np.arange(W, dtype=np.float64) + 0.5) - 0.5 * W) * spec.pixel_mm
    a, b = spec.body_semiaxes_mm
    return (xs[None, :] / a) ** 2 + (ys[:, None] / b) ** 2 <= 1.0


def toy_spec(side: int = 48, pixel_mm: float = 4.0) -> PhantomSpec:
    """A scaled-down phantom whose geometry fits a small grid.

    The sphere diameters are re-picked (not just scaled) so the smallest
    one still spans more than two pixels at the coarser pitch.
    """
    scale = (side * pixel_mm) / 256.0
    body = (112.0 * scale, 92.0 * scale)
    diam = tuple(d * scale for d in (12.0, 15.0, 19.0, 24.0, 31.0, 40.0))
    if diam[0] <= 2.0 * pixel_mm:
        raise PhantomError(f"toy grid {side}@{pixel_mm}mm too coarse for the sphere set")
    spheres = _ring(_RING_RADIUS_MM * scale, diam, 4.0)
    return PhantomSpec(
        height=side,
        width=side,
        pixel_mm=pixel_mm,
        body_semiaxes_mm=body,
        spheres=spheres,
        liver_radius_mm=15.0 * scale,
    )
