"""Parallel-beam CT simulation: phantoms, projection, dose noise and FBP.

Images are square 2D float arrays. Pixel ``(row, col)`` has its center at

    x = (col - (N - 1) / 2) * fov / N,    y = ((N - 1) / 2 - row) * fov / N

so ``x`` points right and ``y`` points up, both in physical field-of-view
units. Phantom specs use normalized coordinates in ``[-1, 1]`` across the
field of view (physical = normalized * fov / 2). Attenuation values are per
unit of physical length, so a line integral through a disk of value 1 and
physical radius R peaks at 2R.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import ndimage

__all__ = [
    "Ellipse",
    "Vessel",
    "PhantomSpec",
    "SinogramGeometry",
    "Sinogram",
    "DoseModel",
    "shepp_logan",
    "disk_phantom",
    "make_phantom",
    "load_phantom_spec",
    "save_phantom_spec",
    "parallel_geometry",
    "radon",
    "ramp_filter",
    "backproject",
    "circle_mask",
    "fbp",
    "simulate_dose",
    "make_pair",
    "central_slice_check",
    "AbdomenVolume",
    "random_abdomen",
]


@dataclass(frozen=True)
class Ellipse:
    center: tuple[float, float]
    axes: tuple[float, float]
    angle: float = 0.0
    value: float = 1.0


@dataclass(frozen=True)
class Vessel:
    center: tuple[float, float]
    radius: float
    value: float


@dataclass(frozen=True)
class PhantomSpec:
    ellipses: tuple[Ellipse, ...]
    vessels: tuple[Vessel, ...] = ()

    def validate(self) -> None:
        if not self.ellipses:
            raise ValueError("phantom spec needs at least one ellipse")
        for e in self.ellipses:
            if e.axes[0] <= 0 or e.axes[1] <= 0:
                raise ValueError(f"ellipse semi-axes must be positive, got {e.axes}")
        for v in self.vessels:
            if v.radius <= 0:
                raise ValueError(f"vessel radius must be positive, got {v.radius}")

    def to_dict(self) -> dict:
        return {
            "ellipses": [
                {"center": list(e.center), "axes": list(e.axes), "angle": e.angle, "value": e.value}
                for e in self.ellipses
            ],
            "vessels": [
                {"center": list(v.center), "radius": v.radius, "value": v.value}
                for v in self.vessels
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> PhantomSpec:
        ellipses = tuple(
            Ellipse(tuple(e["center"]), tuple(e["axes"]), float(e.get("angle", 0.0)), float(e["value"]))
            for e in d.get("ellipses", [])
        )
        vessels = tuple(
            Vessel(tuple(v["center"]), float(v["radius"]), float(v["value"]))
            for v in d.get("vessels", [])
        )
        return cls(ellipses, vessels)


def load_phantom_spec(path) -> PhantomSpec:
    with open(path) as fh:
        return PhantomSpec.from_dict(json.load(fh))


def save_phantom_spec(spec: PhantomSpec, path) -> None:
    Path(path).write_text(json.dumps(spec.to_dict(), indent=2))


# Shepp-Logan ellipses: a, b, x0, y0, phi in degrees, then the original
# (1974) value and the high-contrast "modified" value of Toft.
_SHEPP_LOGAN = (
    (0.69, 0.92, 0.0, 0.0, 0.0, 2.0, 1.0),
    (0.6624, 0.8740, 0.0, -0.0184, 0.0, -0.98, -0.8),
    (0.1100, 0.3100, 0.22, 0.0, -18.0, -0.02, -0.2),
    (0.1600, 0.4100, -0.22, 0.0, 18.0, -0.02, -0.2),
    (0.2100, 0.2500, 0.0, 0.35, 0.0, 0.01, 0.1),
    (0.0460, 0.0460, 0.0, 0.1, 0.0, 0.01, 0.1),
    (0.0460, 0.0460, 0.0, -0.1, 0.0, 0.01, 0.1),
    (0.0460, 0.0230, -0.08, -0.605, 0.0, 0.01, 0.1),
    (0.0230, 0.0230, 0.0, -0.606, 0.0, 0.01, 0.1),
    (0.0230, 0.0460, 0.06, -0.605, 0.0, 0.01, 0.1),
)


def shepp_logan(modified: bool = False) -> PhantomSpec:
    """Shepp-Logan head phantom; ``modified=True`` gives the high-contrast variant."""
    return PhantomSpec(tuple(
        Ellipse((x0, y0), (a, b), math.radians(phi), mod if modified else orig)
        for a, b, x0, y0, phi, orig, mod in _SHEPP_LOGAN
    ))


def disk_phantom(radius: float, value: float = 1.0) -> PhantomSpec:
    """Centered disk with ``radius`` in normalized [-1, 1] units."""
    return PhantomSpec((Ellipse((0.0, 0.0), (radius, radius), 0.0, value),))


def _normalized_grid(size: int, supersample: int) -> tuple[np.ndarray, np.ndarray]:
    n = size * supersample
    c = (np.arange(n) - (n - 1) / 2) * (2.0 / n)
    return c[None, :], -c[:, None]


def make_phantom(spec: PhantomSpec, size: int, supersample: int = 1) -> np.ndarray:
    """Rasterize ``spec`` on a ``size`` x ``size`` grid.

    With ``supersample > 1`` each pixel averages a ``supersample**2`` block of
    sub-pixel indicator samples (anti-aliased edges).
    """
    if size < 16:
        raise ValueError(f"phantom size must be >= 16, got {size}")
    spec.validate()
    u, v = _normalized_grid(size, supersample)
    img = np.zeros((u.shape[1], v.shape[0]))
    for e in spec.ellipses:
        du, dv = u - e.center[0], v - e.center[1]
        c, s = math.cos(e.angle), math.sin(e.angle)
        xr = du * c + dv * s
        yr = -du * s + dv * c
        img += e.value * ((xr / e.axes[0]) ** 2 + (yr / e.axes[1]) ** 2 <= 1.0)
    for ves in spec.vessels:
        inside = (u - ves.center[0]) ** 2 + (v - ves.center[1]) ** 2 <= ves.radius ** 2
        img += ves.value * inside
    if supersample > 1:
        img = img.reshape(size, supersample, size, supersample).mean(axis=(1, 3))
    if img.min() < -1e-12:
        raise ValueError("phantom has negative summed attenuation")
    return np.maximum(img, 0.0)


@dataclass(frozen=True)
class SinogramGeometry:
    angles: np.ndarray
    n_detectors: int
    detector_spacing: float
    fov: float = 1.0

    def __post_init__(self):
        angles = np.asarray(self.angles, dtype=float).reshape(-1)
        object.__setattr__(self, "angles", angles)
        if angles.size < 1:
            raise ValueError("geometry needs at least one angle")
        if self.n_detectors < 3:
            raise ValueError("geometry needs at least 3 detector bins")
        span = self.n_detectors * self.detector_spacing
        if span < math.sqrt(2) * self.fov - 1e-9:
            raise ValueError(f"detector span {span:.4g} does not cover the FOV diagonal")

    @property
    def n_angles(self) -> int:
        return self.angles.size

    @property
    def offsets(self) -> np.ndarray:
        """Signed detector-bin centers, zero at the rotation axis."""
        return (np.arange(self.n_detectors) - (self.n_detectors - 1) / 2) * self.detector_spacing

    def to_dict(self) -> dict:
        return {
            "n_angles": self.n_angles,
            "n_detectors": self.n_detectors,
            "detector_spacing": self.detector_spacing,
            "fov": self.fov,
        }

    @classmethod
    def from_dict(cls, d: dict) -> SinogramGeometry:
        n = int(d["n_angles"])
        return cls(np.arange(n) * math.pi / n, int(d["n_detectors"]), float(d["detector_spacing"]),
                   float(d.get("fov", 1.0)))


def parallel_geometry(size: int, n_angles: int | None = None, fov: float = 1.0,
                      angles=None, oversample: int = 2) -> SinogramGeometry:
    """Geometry with ``oversample`` detector bins per pixel covering the FOV diagonal.

    Angles default to ``ceil(size * pi / 2)`` uniform views over [0, pi).
    ``n_detectors`` has the parity of ``size * oversample`` so that, at angle
    0, detector centers fall on pixel-column centers.
    """
    if angles is None:
        if n_angles is None:
            n_angles = int(math.ceil(size * math.pi / 2))
        angles = np.arange(n_angles) * math.pi / n_angles
    bins = size * oversample
    n_det = int(math.ceil(math.sqrt(2) * bins)) + 2
    if (n_det - bins) % 2:
        n_det += 1
    return SinogramGeometry(np.asarray(angles, dtype=float), n_det, fov / bins, fov)


@dataclass
class Sinogram:
    geometry: SinogramGeometry
    values: np.ndarray

    def __post_init__(self):
        expected = (self.geometry.n_angles, self.geometry.n_detectors)
        if self.values.shape != expected:
            raise ValueError(f"sinogram shape {self.values.shape} != {expected}")


def _check_square(image: np.ndarray) -> int:
    if image.ndim != 2 or image.shape[0] != image.shape[1]:
        raise ValueError(f"expected a square 2D image, got shape {image.shape}")
    return image.shape[0]


def radon(image: np.ndarray, geom: SinogramGeometry, step: float = 0.5) -> Sinogram:
    """Line integrals along parallel rays, sampled bilinearly every ``step`` pixels."""
    n = _check_square(image)
    if step > 0.5:
        raise ValueError("ray sampling step must be <= 0.5 pixel")
    dx = geom.fov / n
    dt = step * dx
    t_max = geom.fov * math.sqrt(2) / 2 + dx
    nt = int(math.ceil(2 * t_max / dt)) + 1
    t = (np.arange(nt) - (nt - 1) / 2) * dt
    s = geom.offsets
    img = np.asarray(image, dtype=float)
    out = np.empty((geom.n_angles, geom.n_detectors))
    # Chunk angles to bound the coordinate arrays at ~2M samples.
    chunk = max(1, 2_000_000 // (s.size * nt))
    for start in range(0, geom.n_angles, chunk):
        th = geom.angles[start:start + chunk, None, None]
        cos, sin = np.cos(th), np.sin(th)
        x = s[None, :, None] * cos - t[None, None, :] * sin
        y = s[None, :, None] * sin + t[None, None, :] * cos
        col = x / dx + (n - 1) / 2
        row = (n - 1) / 2 - y / dx
        vals = ndimage.map_coordinates(img, [row.ravel(), col.ravel()], order=1,
                                       mode="grid-constant", cval=0.0, prefilter=False)
        out[start:start + chunk] = vals.reshape(col.shape).sum(axis=2) * dt
    return Sinogram(geom, out)


def _ramp_response(n_pad: int, window: str) -> np.ndarray:
    k = np.arange(n_pad)
    k = np.where(k <= n_pad // 2, k, k - n_pad)
    h = np.zeros(n_pad)
    h[0] = 0.25
    odd = k % 2 == 1
    h[odd] = -1.0 / (math.pi ** 2 * k[odd] ** 2)
    resp = np.fft.fft(h).real
    resp[0] = 0.0
    if window == "hann":
        f = np.fft.fftfreq(n_pad)
        resp *= 0.5 * (1.0 + np.cos(2 * math.pi * f))
    elif window != "ramlak":
        raise ValueError(f"unknown filter window {window!r}")
    return resp


def ramp_filter(sino: Sinogram, window: str = "ramlak", full: bool = False) -> Sinogram | np.ndarray:
    """Filter every projection with the band-limited ramp kernel.

    Rows are zero-padded to eight times the next power of two before the
    FFT; at that length, zeroing the DC bin of the response perturbs the
    band-limited kernel by less than 1e-6 of its peak. With ``full=True`` the padded
    filtered rows are returned as a plain array instead of a cropped
    ``Sinogram``.
    """
    n_det = sino.geometry.n_detectors
    if n_det < 3:
        raise ValueError("ramp filter needs at least 3 detector bins")
    n_pad = 8 * 2 ** int(math.ceil(math.log2(n_det)))
    resp = _ramp_response(n_pad, window)
    spec = np.fft.fft(sino.values, n=n_pad, axis=1)
    filtered = np.fft.ifft(spec * resp, axis=1).real / sino.geometry.detector_spacing
    if full:
        return filtered
    return Sinogram(sino.geometry, filtered[:, :n_det])


def _pixel_coords(size: int, fov: float) -> tuple[np.ndarray, np.ndarray]:
    c = (np.arange(size) - (size - 1) / 2) * (fov / size)
    return c[None, :], -c[:, None]


def backproject(filtered: Sinogram, size: int) -> np.ndarray:
    """Sum of linearly interpolated projections, scaled by pi / n_angles."""
    geom = filtered.geometry
    x, y = _pixel_coords(size, geom.fov)
    s = geom.offsets
    out = np.zeros((size, size))
    for th, row in zip(geom.angles, filtered.values):
        pos = x * math.cos(th) + y * math.sin(th)
        out += np.interp(pos, s, row, left=0.0, right=0.0)
    return out * (math.pi / geom.n_angles)


def circle_mask(size: int) -> np.ndarray:
    """Boolean mask of pixel centers inside the inscribed disk."""
    x, y = _pixel_coords(size, 2.0)
    return x ** 2 + y ** 2 <= 1.0


def fbp(sino: Sinogram, size: int, window: str = "ramlak", mask: bool = True) -> np.ndarray:
    img = backproject(ramp_filter(sino, window), size)
    if mask:
        img = np.where(circle_mask(size), img, 0.0)
    return img


@dataclass(frozen=True)
class DoseModel:
    i0_routine: float = 1e5
    dose_fraction: float = 0.25
    count_floor: float = 1.0
    rng_seed: int = 0
    noiseless: bool = False

    def __post_init__(self):
        if self.i0_routine <= 0:
            raise ValueError("i0_routine must be positive")
        if not 0 < self.dose_fraction <= 1:
            raise ValueError("dose_fraction must be in (0, 1]")
        if self.count_floor < 1:
            raise ValueError("count_floor must be >= 1")

    def to_dict(self) -> dict:
        return {"i0_routine": self.i0_routine, "dose_fraction": self.dose_fraction,
                "count_floor": self.count_floor, "rng_seed": self.rng_seed,
                "noiseless": self.noiseless}

    @classmethod
    def from_dict(cls, d: dict) -> DoseModel:
        return cls(**d)


def simulate_dose(sino: Sinogram, dose: DoseModel, rng: np.random.Generator | None = None) -> Sinogram:
    """Poisson photon-count noise on the line integrals.

    ``rng`` overrides the generator seeded from ``dose.rng_seed``.
    """
    p = sino.values
    if p.min() < -1e-9 * max(1.0, float(np.abs(p).max())):
        raise ValueError("line integrals must be non-negative")
    p = np.maximum(p, 0.0)
    if dose.noiseless:
        return Sinogram(sino.geometry, p.copy())
    if rng is None:
        rng = np.random.default_rng(dose.rng_seed)
    i0 = dose.dose_fraction * dose.i0_routine
    counts = rng.poisson(i0 * np.exp(-p)).astype(float)
    counts = np.maximum(counts, dose.count_floor)
    return Sinogram(sino.geometry, -np.log(counts / i0))


def make_pair(spec: PhantomSpec | np.ndarray, geom: SinogramGeometry, dose: DoseModel, size: int,
              window: str = "ramlak", noiseless_target: bool = False
              ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Return ``(ldct, rdct, truth)`` reconstructed from independent noise draws.

    ``spec`` may also be an already rasterized truth image.
    """
    truth = spec if isinstance(spec, np.ndarray) else make_phantom(spec, size)
    sino = radon(truth, geom)
    routine_rng, low_rng = (np.random.default_rng(s)
                            for s in np.random.SeedSequence(dose.rng_seed).spawn(2))
    routine = replace(dose, dose_fraction=1.0, noiseless=dose.noiseless or noiseless_target)
    rdct = fbp(simulate_dose(sino, routine, routine_rng), size, window)
    ldct = fbp(simulate_dose(sino, dose, low_rng), size, window)
    return ldct, rdct, truth


def _pearson(a: np.ndarray, b: np.ndarray) -> float:
    scale_a = max(float(np.abs(a).max(initial=0.0)), 1e-300)
    scale_b = max(float(np.abs(b).max(initial=0.0)), 1e-300)
    a = a - a.mean()
    b = b - b.mean()
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    # Degenerate (flat) spectra are declared perfectly correlated.
    if na <= 1e-9 * scale_a * math.sqrt(a.size) or nb <= 1e-9 * scale_b * math.sqrt(b.size):
        return 1.0
    return float(np.dot(a, b) / (na * nb))


def central_slice_check(image: np.ndarray, angle: float, fov: float = 1.0) -> float:
    """Correlate |FT(projection at angle)| with the matching radial slice of |FT2(image)|.

    Returns the normalized cross-correlation over the central half of the
    frequency band, or 1.0 when either magnitude profile is flat.
    """
    n = _check_square(image)
    geom = parallel_geometry(n, fov=fov, angles=[angle], oversample=1)
    proj = radon(image, geom).values[0]
    length = 2 ** (int(math.ceil(math.log2(max(geom.n_detectors, n)))) + 1)
    proj_mag = np.abs(np.fft.fftshift(np.fft.fft(proj, n=length)))
    padded = np.zeros((length, length))
    padded[:n, :n] = image
    img_mag = np.abs(np.fft.fftshift(np.fft.fft2(padded)))

    k = np.arange(length) - length // 2
    keep = np.abs(k) < length // 4
    k = k[keep]
    # Column frequency follows +x, row frequency follows -y.
    cols = length // 2 + k * math.cos(angle)
    rows = length // 2 - k * math.sin(angle)
    slice_mag = ndimage.map_coordinates(img_mag, [rows, cols], order=1, mode="nearest")
    # Projection integrates over physical length; image DFT sums pixels.
    slice_mag = slice_mag * (fov / n)
    return _pearson(proj_mag[keep], slice_mag)


@dataclass(frozen=True)
class _Ellipsoid:
    center: tuple[float, float, float]
    axes: tuple[float, float, float]
    angle: float
    value: float

    def section(self, z: float) -> Ellipse | None:
        dz = (z - self.center[2]) / self.axes[2]
        if abs(dz) >= 1.0:
            return None
        r = math.sqrt(1.0 - dz * dz)
        return Ellipse(self.center[:2], (self.axes[0] * r, self.axes[1] * r), self.angle, self.value)


@dataclass(frozen=True)
class AbdomenVolume:
    """Stack of ellipsoids whose axial cross-sections are abdomen-like phantoms."""

    parts: tuple[_Ellipsoid, ...]
    vessels: tuple[_Ellipsoid, ...] = field(default=())
    scale: float = 1.0

    def slice(self, z: float) -> PhantomSpec:
        ellipses = []
        for part in self.parts:
            e = part.section(z)
            if e is not None:
                ellipses.append(replace(e, value=e.value * self.scale))
        vessels = []
        for ves in self.vessels:
            e = ves.section(z)
            if e is not None:
                vessels.append(Vessel(e.center, e.axes[0], ves.value * self.scale))
        return PhantomSpec(tuple(ellipses), tuple(vessels))

    def slices(self, n: int, extent: float = 0.6) -> list[PhantomSpec]:
        return [self.slice(z) for z in np.linspace(-extent, extent, n)]


def random_abdomen(rng: np.random.Generator, scale: float = 8.0) -> AbdomenVolume:
    """Random contrast-enhanced abdomen: fat, soft tissue, liver, kidneys, spine and vessels.

    Relative attenuations (water = 1) are multiplied by ``scale``, the
    attenuation of water per unit field-of-view length.
    """
    u = rng.uniform
    bx, by = u(0.78, 0.9), u(0.55, 0.68)
    parts = [
        _Ellipsoid((0.0, 0.0, 0.0), (bx, by, 3.0), 0.0, 0.92),  # subcutaneous fat
        _Ellipsoid((0.0, 0.0, 0.0), (bx - u(0.05, 0.1), by - u(0.05, 0.09), 3.0), 0.0, 0.1),
    ]
    # Liver on the patient's right (image left), tapering toward the top of the stack.
    lx, ly = u(-0.45, -0.3), u(0.0, 0.15)
    parts.append(_Ellipsoid((lx, ly, u(0.2, 0.5)), (u(0.3, 0.4), u(0.25, 0.35), u(0.7, 1.0)),
                            u(-0.4, 0.4), 0.06))
    # Kidneys flank the spine.
    kz = u(-0.4, -0.1)
    for side in (-1, 1):
        parts.append(_Ellipsoid((side * u(0.3, 0.38), -by * 0.45, kz), (u(0.09, 0.13), u(0.13, 0.18), u(0.3, 0.45)),
                                side * u(0.2, 0.5), 0.08))
    # Vertebral body with a denser cortical shell.
    sy = -by + u(0.2, 0.26)
    parts.append(_Ellipsoid((0.0, sy, 0.0), (0.13, 0.11, 3.0), 0.0, 0.35))
    parts.append(_Ellipsoid((0.0, sy, 0.0), (0.1, 0.08, 3.0), 0.0, -0.15))
    # Bowel loops with mildly lower attenuation.
    for _ in range(rng.integers(2, 5)):
        parts.append(_Ellipsoid((u(0.0, 0.45), u(-0.2, 0.3), u(-0.5, 0.5)),
                                (u(0.06, 0.14), u(0.05, 0.12), u(0.15, 0.4)), u(0, math.pi), -0.04))
    vessels = [
        _Ellipsoid((u(-0.05, 0.05), sy + 0.2, 0.0), (0.05, 0.05, 3.0), 0.0, 0.3),  # aorta
        _Ellipsoid((u(-0.2, -0.12), sy + 0.2, 0.0), (0.045, 0.045, 3.0), 0.0, 0.22),  # vena cava
    ]
    for _ in range(rng.integers(3, 7)):
        r = u(0.015, 0.035)
        vessels.append(_Ellipsoid((lx + u(-0.15, 0.15), ly + u(-0.12, 0.12), u(-0.2, 0.6)),
                                  (r, r, u(0.3, 0.8)), 0.0, u(0.15, 0.25)))
    return AbdomenVolume(tuple(parts), tuple(vessels), scale)
