"""Affine and projective transformations of the image plane.

All transformations act on normalized image coordinates: the origin sits at
the image center and ``x, y`` span ``[-1, 1]`` across the image extent, so a
translation of ``f`` image widths is ``2 * f`` normalized units.

A :class:`Homography` is always stored normalized (``m[2, 2] == 1``). Its
first eight row-major entries form the regression target that the AET
decoder learns to predict.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence, Union

import numpy as np

from .errors import (
    DegenerateCorners,
    EmptySampleSet,
    PointAtInfinity,
    SingularTransform,
)

DET_EPS = 1e-12
NORM_EPS = 1e-9
DLT_MAX_COND = 1e12
MAX_CORNER_RETRIES = 100

# (-1,-1) top-left, then clockwise in image orientation (y points down)
BASE_CORNERS = np.array([[-1.0, -1.0], [1.0, -1.0], [1.0, 1.0], [-1.0, 1.0]])

AFFINE_FACTORS = ("translate", "rotate", "shear", "scale")


class Homography:
    """A normalized 3x3 homogeneous transformation of the plane."""

    __slots__ = ("_m",)

    def __init__(self, m):
        m = np.array(m, dtype=np.float64)
        if m.shape != (3, 3):
            raise ValueError(f"homography must be 3x3, got {m.shape}")
        if not np.all(np.isfinite(m)):
            raise SingularTransform("homography has non-finite entries")
        if abs(m[2, 2]) < NORM_EPS:
            raise SingularTransform(f"cannot normalize: |m[2,2]| = {abs(m[2, 2]):.3g}")
        if m[2, 2] != 1.0:
            m = m / m[2, 2]
            m[2, 2] = 1.0
        m.setflags(write=False)
        self._m = m

    @property
    def m(self) -> np.ndarray:
        return self._m

    def det(self) -> float:
        return float(np.linalg.det(self._m))

    def is_identity(self) -> bool:
        return bool(np.array_equal(self._m, np.eye(3)))

    def __eq__(self, other):
        if not isinstance(other, Homography):
            return NotImplemented
        return bool(np.array_equal(self._m, other._m))

    def __hash__(self):
        return hash(self._m.tobytes())

    def __repr__(self):
        rows = ", ".join(np.array2string(r, precision=6, separator=", ") for r in self._m)
        return f"Homography([{rows}])"


def normalize(m) -> np.ndarray:
    """Return ``m`` scaled so that its bottom-right entry is exactly 1."""
    return Homography(m).m.copy()


def _check_invertible(h: Homography, what="homography"):
    if abs(h.det()) < DET_EPS:
        raise SingularTransform(f"{what} is singular (|det| < {DET_EPS})")


# ---------------------------------------------------------------------------
# elementary factors

def identity() -> Homography:
    return Homography(np.eye(3))


def translation(tx: float, ty: float) -> Homography:
    """Translation by ``(tx, ty)`` normalized units."""
    return Homography([[1.0, 0.0, tx], [0.0, 1.0, ty], [0.0, 0.0, 1.0]])


def _cos_sin(deg: float):
    # exact values at right angles keep compositions of quarter turns exact
    q, r = divmod(float(deg), 90.0)
    if r == 0.0:
        return ((1.0, 0.0), (0.0, 1.0), (-1.0, 0.0), (0.0, -1.0))[int(q) % 4]
    rad = math.radians(deg)
    return math.cos(rad), math.sin(rad)


def rotation(deg: float) -> Homography:
    """Rotation about the origin; ``(1, 0)`` maps to ``(cos, sin)``."""
    c, s = _cos_sin(deg)
    return Homography([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def scaling(sx: float, sy: float | None = None) -> Homography:
    sy = sx if sy is None else sy
    if sx == 0.0 or sy == 0.0:
        raise SingularTransform("zero scale factor")
    return Homography([[sx, 0.0, 0.0], [0.0, sy, 0.0], [0.0, 0.0, 1.0]])


def shear(deg: float) -> Homography:
    """Horizontal shear: ``x' = x + tan(deg) * y``."""
    k = 0.0 if deg == 0.0 else math.tan(math.radians(deg))
    return Homography([[1.0, k, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]])


# ---------------------------------------------------------------------------
# group operations

def compose(a: Homography, b: Homography) -> Homography:
    """Return ``a . b``: apply ``b`` first, then ``a``."""
    _check_invertible(a, "left operand")
    _check_invertible(b, "right operand")
    prod = a.m @ b.m
    if abs(np.linalg.det(prod)) < DET_EPS:
        raise SingularTransform("composition is singular")
    return Homography(prod)


def compose_all(*hs: Homography) -> Homography:
    out = identity()
    for h in hs:
        out = compose(out, h)
    return out


def invert(h: Homography) -> Homography:
    _check_invertible(h)
    if h.is_identity():
        return identity()
    return Homography(np.linalg.inv(h.m))


def apply_point(h: Homography, p) -> np.ndarray:
    """Map a 2-d point through ``h`` with perspective division."""
    x, y = float(p[0]), float(p[1])
    m = h.m
    z = m[2, 0] * x + m[2, 1] * y + m[2, 2]
    if abs(z) < DET_EPS:
        raise PointAtInfinity(f"point ({x}, {y}) maps to infinity")
    return np.array([
        (m[0, 0] * x + m[0, 1] * y + m[0, 2]) / z,
        (m[1, 0] * x + m[1, 1] * y + m[1, 2]) / z,
    ])


def apply_points(h: Homography, pts) -> np.ndarray:
    """Vectorized :func:`apply_point` over an ``(n, 2)`` array."""
    pts = np.asarray(pts, dtype=np.float64).reshape(-1, 2)
    hom = np.concatenate([pts, np.ones((len(pts), 1))], axis=1) @ h.m.T
    if np.any(np.abs(hom[:, 2]) < DET_EPS):
        raise PointAtInfinity("a point maps to infinity")
    return hom[:, :2] / hom[:, 2:3]


# ---------------------------------------------------------------------------
# regression target

def to_target_vector(h) -> np.ndarray:
    """First eight row-major entries of the normalized matrix."""
    if not isinstance(h, Homography):
        m = np.asarray(h, dtype=np.float64)
        if abs(m[2, 2]) < NORM_EPS:
            raise SingularTransform("m[2,2] too small to normalize")
        h = Homography(m)
    return h.m.reshape(-1)[:8].copy()


def from_target_vector(v) -> Homography:
    v = np.asarray(v, dtype=np.float64).reshape(-1)
    if v.shape != (8,):
        raise ValueError(f"target vector must have 8 entries, got {v.shape}")
    return Homography(np.append(v, 1.0).reshape(3, 3))


def param_loss(target, predicted) -> float:
    """Half squared Euclidean distance between two target vectors."""
    d = np.asarray(target, dtype=np.float64) - np.asarray(predicted, dtype=np.float64)
    return 0.5 * float(np.dot(d, d))


def image_space_loss(t: Homography, t_hat: Homography, samples) -> float:
    """Mean over ``samples`` of the pixel MSE between ``t(x)`` and ``t_hat(x)``."""
    from .warp import warp_image

    samples = list(samples)
    if not samples:
        raise EmptySampleSet("image_space_loss needs at least one sample")
    total = 0.0
    for x in samples:
        d = warp_image(x, t) - warp_image(x, t_hat)
        total += float(np.mean(d * d))
    return total / len(samples)


# ---------------------------------------------------------------------------
# four-point solve

def _general_position(pts, tol=1e-9) -> bool:
    for i in range(4):
        a, b, c = (pts[j] for j in range(4) if j != i)
        cross = (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])
        if abs(cross) < tol:
            return False
    return True


def corners_to_homography(src, dst) -> Homography:
    """Solve the unique homography taking four ``src`` points onto ``dst``."""
    src = np.asarray(src, dtype=np.float64).reshape(4, 2)
    dst = np.asarray(dst, dtype=np.float64).reshape(4, 2)
    for name, pts in (("source", src), ("target", dst)):
        if not np.all(np.isfinite(pts)) or not _general_position(pts):
            raise DegenerateCorners(f"{name} corners are not in general position")
    if np.array_equal(src, dst):
        return identity()
    a = np.zeros((8, 8))
    b = np.zeros(8)
    for i, ((x, y), (u, v)) in enumerate(zip(src, dst)):
        a[2 * i] = [x, y, 1.0, 0.0, 0.0, 0.0, -u * x, -u * y]
        a[2 * i + 1] = [0.0, 0.0, 0.0, x, y, 1.0, -v * x, -v * y]
        b[2 * i] = u
        b[2 * i + 1] = v
    if np.linalg.cond(a) > DLT_MAX_COND:
        raise DegenerateCorners("corner correspondence system is singular")
    h = np.linalg.solve(a, b)
    return Homography(np.append(h, 1.0).reshape(3, 3))


# ---------------------------------------------------------------------------
# parameter families

@dataclass(frozen=True)
class AffineParams:
    rotation_deg: float = 0.0
    translate_x: float = 0.0  # fraction of image width
    translate_y: float = 0.0  # fraction of image height
    scale: float = 1.0
    shear_deg: float = 0.0


@dataclass(frozen=True)
class ProjectiveParams:
    pre_scale: float = 1.0
    pre_rotation_deg: float = 0.0
    corner_dx: tuple = (0.0, 0.0, 0.0, 0.0)  # fractions of image width
    corner_dy: tuple = (0.0, 0.0, 0.0, 0.0)  # fractions of image height


Params = Union[AffineParams, ProjectiveParams]


@dataclass(frozen=True)
class TransformSample:
    params: Params
    homography: Homography
    target: np.ndarray


def _check_range(name, r):
    lo, hi = r
    if not (math.isfinite(lo) and math.isfinite(hi)) or lo > hi:
        raise ValueError(f"invalid range for {name}: {r}")


@dataclass
class XformConfig:
    """Sampling distribution over transformations.

    Translation and corner displacement ranges are fractions of the image
    extent; angles are in degrees.
    """

    family: str = "projective"
    rotation_range: tuple = (-180.0, 180.0)
    translate_range: tuple = (-0.2, 0.2)
    scale_range: tuple = (0.7, 1.3)
    shear_range: tuple = (-30.0, 30.0)
    affine_order: tuple = AFFINE_FACTORS
    pre_scale_range: tuple = (0.8, 1.2)
    pre_rotations: tuple = (0.0, 90.0, 180.0, 270.0)
    corner_shift_range: tuple = (-0.125, 0.125)
    coordinates: str = field(default="center-origin, [-1, 1] spans the image", repr=False)

    def __post_init__(self):
        if self.family not in ("affine", "projective"):
            raise ValueError(f"unknown transformation family {self.family!r}")
        for name in ("rotation_range", "translate_range", "scale_range",
                     "shear_range", "pre_scale_range", "corner_shift_range"):
            r = tuple(float(v) for v in getattr(self, name))
            _check_range(name, r)
            setattr(self, name, r)
        self.pre_rotations = tuple(float(v) for v in self.pre_rotations)
        self.affine_order = tuple(self.affine_order)
        if sorted(self.affine_order) != sorted(AFFINE_FACTORS):
            raise ValueError(f"affine_order must permute {AFFINE_FACTORS}")
        if not self.pre_rotations:
            raise ValueError("pre_rotations must not be empty")

    @classmethod
    def identity_only(cls, family="projective") -> "XformConfig":
        """A degenerate distribution that always yields the identity."""
        return cls(family=family, rotation_range=(0.0, 0.0), translate_range=(0.0, 0.0),
                   scale_range=(1.0, 1.0), shear_range=(0.0, 0.0),
                   pre_scale_range=(1.0, 1.0), pre_rotations=(0.0,),
                   corner_shift_range=(0.0, 0.0))


def affine_to_matrix(p: AffineParams, order: Sequence[str] = AFFINE_FACTORS) -> Homography:
    """Compose the affine factors; the leftmost factor in ``order`` is applied last."""
    if p.scale == 0.0:
        raise SingularTransform("affine scale is zero")
    factors = {
        "translate": translation(2.0 * p.translate_x, 2.0 * p.translate_y),
        "rotate": rotation(p.rotation_deg),
        "shear": shear(p.shear_deg),
        "scale": scaling(p.scale),
    }
    return compose_all(*(factors[name] for name in order))


def _projective_corners(p: ProjectiveParams):
    pre = compose(rotation(p.pre_rotation_deg), scaling(p.pre_scale))
    src = apply_points(pre, BASE_CORNERS)
    dst = src + 2.0 * np.stack([np.asarray(p.corner_dx, float), np.asarray(p.corner_dy, float)], axis=1)
    return pre, src, dst


def projective_to_matrix(p: ProjectiveParams) -> Homography:
    """Right-angle rotation and scaling, then independent corner displacement.

    The corner homography maps the scaled/rotated corners onto their displaced
    positions, so the full transform carries each base corner of the image to
    its displaced target.
    """
    pre, src, dst = _projective_corners(p)
    if not _general_position(dst):
        raise DegenerateCorners("displaced corners are not in general position")
    return compose(corners_to_homography(src, dst), pre)


def sample_affine(rng: np.random.Generator, cfg: XformConfig) -> TransformSample:
    if cfg.family != "affine":
        raise ValueError("sample_affine requires family='affine'")
    p = AffineParams(
        rotation_deg=float(rng.uniform(*cfg.rotation_range)),
        translate_x=float(rng.uniform(*cfg.translate_range)),
        translate_y=float(rng.uniform(*cfg.translate_range)),
        scale=float(rng.uniform(*cfg.scale_range)),
        shear_deg=float(rng.uniform(*cfg.shear_range)),
    )
    h = affine_to_matrix(p, cfg.affine_order)
    return TransformSample(p, h, to_target_vector(h))


def sample_projective(rng: np.random.Generator, cfg: XformConfig) -> TransformSample:
    if cfg.family != "projective":
        raise ValueError("sample_projective requires family='projective'")
    for _ in range(MAX_CORNER_RETRIES):
        scale = float(rng.uniform(*cfg.pre_scale_range))
        rot = cfg.pre_rotations[int(rng.integers(len(cfg.pre_rotations)))]
        shifts = rng.uniform(*cfg.corner_shift_range, size=8)
        p = ProjectiveParams(scale, rot, tuple(float(v) for v in shifts[:4]),
                             tuple(float(v) for v in shifts[4:]))
        try:
            h = projective_to_matrix(p)
        except (DegenerateCorners, SingularTransform):
            continue
        return TransformSample(p, h, to_target_vector(h))
    raise DegenerateCorners(f"no valid corner draw after {MAX_CORNER_RETRIES} retries")


def sample(rng: np.random.Generator, cfg: XformConfig) -> TransformSample:
    if cfg.family == "affine":
        return sample_affine(rng, cfg)
    return sample_projective(rng, cfg)
