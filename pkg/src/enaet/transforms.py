"""Spatial and photometric transformation ensemble.

Coordinates are normalized with the origin at the image center: the left/right
pixel centers sit at x = -1/+1 and the top/bottom pixel centers at y = -1/+1.
Translations and projective corner offsets are expressed in these units.

Images handled here are ``(H, W, C)`` float arrays in ``[0, 1]``.  Batched
torch counterparts (``warp_batch``, ``ccbs_batch``) operate on ``(B, C, H, W)``
tensors and are what the trainer uses.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

ROTATION_RANGE = (-180.0, 180.0)
TRANSLATION_RANGE = (-0.2, 0.2)
SCALE_RANGE = (0.8, 1.2)
SHEAR_RANGE = (-30.0, 30.0)
CORNER_RANGE = (-0.125, 0.125)
CCBS_RANGE = (0.2, 1.8)

LUMA = np.array([0.299, 0.587, 0.114])
# PIL's SMOOTH filter; the sharpness operator blends away from this.
SMOOTH_KERNEL = np.array([[1.0, 1.0, 1.0], [1.0, 5.0, 1.0], [1.0, 1.0, 1.0]]) / 13.0

# (-1,-1), (1,-1), (1,1), (-1,1): top-left, top-right, bottom-right, bottom-left
CORNERS = np.array([[-1.0, -1.0], [1.0, -1.0], [1.0, 1.0], [-1.0, 1.0]])

SINGULAR_TOL = 1e-12


class TransformError(ValueError):
    """Raised for out-of-range parameters or singular/degenerate matrices."""


class Kind(enum.IntEnum):
    """Spatial families, ordered from widest to narrowest."""

    PROJECTIVE = 0
    AFFINE = 1
    SIMILARITY = 2
    EUCLIDEAN = 3


# Parameter layout per family: (name, sampling range).
PARAM_LAYOUT: dict[Kind, tuple[tuple[str, tuple[float, float]], ...]] = {
    Kind.EUCLIDEAN: (
        ("rotation", ROTATION_RANGE),
        ("tx", TRANSLATION_RANGE),
        ("ty", TRANSLATION_RANGE),
    ),
    Kind.SIMILARITY: (
        ("rotation", ROTATION_RANGE),
        ("scale", SCALE_RANGE),
        ("tx", TRANSLATION_RANGE),
        ("ty", TRANSLATION_RANGE),
    ),
    Kind.AFFINE: (
        ("rotation", ROTATION_RANGE),
        ("scale_x", SCALE_RANGE),
        ("scale_y", SCALE_RANGE),
        ("shear", SHEAR_RANGE),
        ("tx", TRANSLATION_RANGE),
        ("ty", TRANSLATION_RANGE),
    ),
    Kind.PROJECTIVE: tuple(
        (f"corner{i}_{axis}", CORNER_RANGE) for i in range(4) for axis in "xy"
    ),
}

CCBS_LAYOUT = (
    ("color", CCBS_RANGE),
    ("contrast", CCBS_RANGE),
    ("brightness", CCBS_RANGE),
    ("sharpness", CCBS_RANGE),
)

DOF = {Kind.PROJECTIVE: 8, Kind.AFFINE: 6, Kind.SIMILARITY: 4, Kind.EUCLIDEAN: 3}

# Ensemble order used by the model and trainer: four spatial families, then CCBS.
FAMILIES = ("projective", "affine", "similarity", "euclidean", "ccbs")
FAMILY_DOF = (8, 6, 4, 3, 4)


@dataclass(frozen=True)
class SpatialTransform:
    kind: Kind
    params: np.ndarray
    matrix: np.ndarray = field(repr=False)

    def apply(self, points: np.ndarray) -> np.ndarray:
        return apply_homography(self.matrix, points)


@dataclass(frozen=True)
class PhotometricTransform:
    color: float = 1.0
    contrast: float = 1.0
    brightness: float = 1.0
    sharpness: float = 1.0

    @property
    def params(self) -> np.ndarray:
        return np.array([self.color, self.contrast, self.brightness, self.sharpness])


def _check_ranges(layout, params: np.ndarray) -> None:
    if len(params) != len(layout):
        raise TransformError(f"expected {len(layout)} parameters, got {len(params)}")
    for (name, (lo, hi)), v in zip(layout, params):
        if not lo <= v <= hi:
            raise TransformError(f"{name}={v} outside [{lo}, {hi}]")


def apply_homography(matrix: np.ndarray, points: np.ndarray) -> np.ndarray:
    """Map ``(..., 2)`` points through a 3x3 homography."""
    pts = np.asarray(points, dtype=np.float64)
    homog = pts @ matrix[:, :2].T + matrix[:, 2]
    return homog[..., :2] / homog[..., 2:3]


def _rotation(theta_deg: float) -> np.ndarray:
    t = math.radians(theta_deg)
    c, s = math.cos(t), math.sin(t)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def _translation(tx: float, ty: float) -> np.ndarray:
    return np.array([[1.0, 0.0, tx], [0.0, 1.0, ty], [0.0, 0.0, 1.0]])


def _scale(sx: float, sy: float) -> np.ndarray:
    return np.diag([sx, sy, 1.0])


def _shear(shear_deg: float) -> np.ndarray:
    return np.array([[1.0, math.tan(math.radians(shear_deg)), 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]])


def fit_projective(corner_offsets) -> np.ndarray:
    """Homography taking the canonical corners to their displaced positions.

    ``corner_offsets`` holds ``(dx, dy)`` for each entry of ``CORNERS`` in
    order, flattened to 8 values.  Raises ``TransformError`` if the displaced
    quadrilateral is degenerate.
    """
    off = np.asarray(corner_offsets, dtype=np.float64).reshape(4, 2)
    dst = CORNERS + off
    a = np.zeros((8, 8))
    rhs = np.zeros(8)
    for i, ((x, y), (u, v)) in enumerate(zip(CORNERS, dst)):
        a[2 * i] = [x, y, 1, 0, 0, 0, -u * x, -u * y]
        a[2 * i + 1] = [0, 0, 0, x, y, 1, -v * x, -v * y]
        rhs[2 * i] = u
        rhs[2 * i + 1] = v
    if abs(np.linalg.det(a)) < SINGULAR_TOL:
        raise TransformError("degenerate corner configuration")
    h = np.linalg.solve(a, rhs)
    m = np.append(h, 1.0).reshape(3, 3)
    if abs(np.linalg.det(m)) < SINGULAR_TOL:
        raise TransformError("degenerate corner configuration")
    return m


def matrix_from_params(kind: Kind, params, strict: bool = True) -> np.ndarray:
    """Build the 3x3 matrix for ``kind`` from its generating parameters.

    Spatial families compose scale -> shear -> rotation -> translation; the
    projective family is fitted from its corner offsets.  With ``strict`` the
    parameters must lie inside the sampling ranges.
    """
    kind = Kind(kind)
    p = np.asarray(params, dtype=np.float64)
    if strict:
        _check_ranges(PARAM_LAYOUT[kind], p)
    elif len(p) != DOF[kind]:
        raise TransformError(f"expected {DOF[kind]} parameters, got {len(p)}")

    if kind is Kind.PROJECTIVE:
        return fit_projective(p)
    if kind is Kind.EUCLIDEAN:
        theta, tx, ty = p
        m = _translation(tx, ty) @ _rotation(theta)
    elif kind is Kind.SIMILARITY:
        theta, s, tx, ty = p
        m = _translation(tx, ty) @ _rotation(theta) @ _scale(s, s)
    else:
        theta, sx, sy, shear, tx, ty = p
        m = _translation(tx, ty) @ _rotation(theta) @ _shear(shear) @ _scale(sx, sy)
    m[2] = [0.0, 0.0, 1.0]
    return m


def params_from_matrix(kind: Kind, matrix: np.ndarray) -> np.ndarray:
    """Recover generating parameters from a matrix of the given family."""
    kind = Kind(kind)
    m = np.asarray(matrix, dtype=np.float64)
    if kind is Kind.PROJECTIVE:
        return (apply_homography(m, CORNERS) - CORNERS).reshape(-1)
    a = m[:2, :2]
    tx, ty = m[0, 2], m[1, 2]
    if kind is Kind.EUCLIDEAN:
        return np.array([math.degrees(math.atan2(a[1, 0], a[0, 0])), tx, ty])
    if kind is Kind.SIMILARITY:
        s = math.sqrt(abs(np.linalg.det(a)))
        return np.array([math.degrees(math.atan2(a[1, 0], a[0, 0])), s, tx, ty])
    # A = R @ [[sx, k*sy], [0, sy]]: Gram-Schmidt on the first column.
    sx = math.hypot(a[0, 0], a[1, 0])
    theta = math.atan2(a[1, 0], a[0, 0])
    c, s = math.cos(theta), math.sin(theta)
    u01 = c * a[0, 1] + s * a[1, 1]
    sy = -s * a[0, 1] + c * a[1, 1]
    shear = math.degrees(math.atan2(u01, sy)) if sy > 0 else math.degrees(math.atan(u01 / sy))
    return np.array([math.degrees(theta), sx, sy, shear, tx, ty])


def classify_matrix(matrix: np.ndarray, tol: float = 1e-9) -> Kind:
    """Narrowest family whose structural predicate the matrix satisfies."""
    m = np.asarray(matrix, dtype=np.float64)
    if abs(m[2, 0]) > tol or abs(m[2, 1]) > tol:
        return Kind.PROJECTIVE
    a = m[:2, :2]
    similar = abs(a[0, 0] - a[1, 1]) <= tol and abs(a[0, 1] + a[1, 0]) <= tol and np.linalg.det(a) > 0
    if not similar:
        return Kind.AFFINE
    if abs(np.linalg.det(a) - 1.0) <= tol:
        return Kind.EUCLIDEAN
    return Kind.SIMILARITY


def is_affine(matrix: np.ndarray) -> bool:
    return matrix[2, 0] == 0 and matrix[2, 1] == 0 and matrix[2, 2] == 1


def is_similarity(matrix: np.ndarray, tol: float = 1e-9) -> bool:
    if not is_affine(matrix):
        return False
    a = matrix[:2, :2]
    s = math.sqrt(abs(np.linalg.det(a)))
    if s == 0 or np.linalg.det(a) < 0:
        return False
    r = a / s
    return bool(np.allclose(r @ r.T, np.eye(2), rtol=0, atol=tol))


def is_euclidean(matrix: np.ndarray, tol: float = 1e-9) -> bool:
    if not is_affine(matrix):
        return False
    a = matrix[:2, :2]
    return bool(np.allclose(a @ a.T, np.eye(2), rtol=0, atol=tol) and abs(np.linalg.det(a) - 1) <= tol)


def make_spatial(kind: Kind, params, strict: bool = True) -> SpatialTransform:
    kind = Kind(kind)
    p = np.asarray(params, dtype=np.float64).copy()
    return SpatialTransform(kind, p, matrix_from_params(kind, p, strict=strict))


def identity(kind: Kind = Kind.EUCLIDEAN) -> SpatialTransform:
    kind = Kind(kind)
    params = {
        Kind.EUCLIDEAN: [0.0, 0.0, 0.0],
        Kind.SIMILARITY: [0.0, 1.0, 0.0, 0.0],
        Kind.AFFINE: [0.0, 1.0, 1.0, 0.0, 0.0, 0.0],
        Kind.PROJECTIVE: [0.0] * 8,
    }[kind]
    return make_spatial(kind, params)


def sample_spatial(kind: Kind, rng: np.random.Generator) -> SpatialTransform:
    """Draw a transform of ``kind`` uniformly over the family's parameter ranges.

    Projective draws that produce a degenerate quadrilateral are redrawn.
    """
    kind = Kind(kind)
    layout = PARAM_LAYOUT[kind]
    lo = np.array([r[0] for _, r in layout])
    hi = np.array([r[1] for _, r in layout])
    while True:
        params = rng.uniform(lo, hi)
        try:
            return SpatialTransform(kind, params, matrix_from_params(kind, params))
        except TransformError:
            continue


def _widest(a: Kind, b: Kind) -> Kind:
    return Kind(min(a, b))


def _from_matrix(kind: Kind, m: np.ndarray) -> SpatialTransform:
    m = m / m[2, 2]
    # Snap the result to the narrowest family that holds it, never wider than kind.
    narrow = classify_matrix(m)
    kind = Kind(max(kind, narrow))
    if kind is not Kind.PROJECTIVE:
        m[2] = [0.0, 0.0, 1.0]
    return SpatialTransform(kind, params_from_matrix(kind, m), m)


def compose(t1: SpatialTransform, t2: SpatialTransform) -> SpatialTransform:
    """Transform equivalent to applying ``t2`` first, then ``t1``."""
    m = t1.matrix @ t2.matrix
    if abs(np.linalg.det(m)) < SINGULAR_TOL:
        raise TransformError("composition is singular")
    return _from_matrix(_widest(t1.kind, t2.kind), m)


def invert(t: SpatialTransform) -> SpatialTransform:
    if abs(np.linalg.det(t.matrix)) < SINGULAR_TOL:
        raise TransformError("matrix is not invertible")
    return _from_matrix(t.kind, np.linalg.inv(t.matrix))


# --------------------------------------------------------------------------
# Regression targets


def _layout_of(t) -> tuple:
    if isinstance(t, PhotometricTransform):
        return CCBS_LAYOUT
    return PARAM_LAYOUT[t.kind]


def _encode(layout, params: np.ndarray) -> np.ndarray:
    _check_ranges(layout, params)
    lo = np.array([r[0] for _, r in layout])
    hi = np.array([r[1] for _, r in layout])
    return 2.0 * (params - lo) / (hi - lo) - 1.0


def _decode(layout, values: np.ndarray) -> np.ndarray:
    lo = np.array([r[0] for _, r in layout])
    hi = np.array([r[1] for _, r in layout])
    return lo + (np.asarray(values, dtype=np.float64) + 1.0) * (hi - lo) / 2.0


def target_vector(t: SpatialTransform | PhotometricTransform) -> np.ndarray:
    """Parameters of ``t`` rescaled affinely from their sampling ranges to [-1, 1].

    Component order follows ``PARAM_LAYOUT`` / ``CCBS_LAYOUT``.
    """
    return _encode(_layout_of(t), np.asarray(t.params, dtype=np.float64))


def spatial_from_target(kind: Kind, values) -> SpatialTransform:
    kind = Kind(kind)
    return make_spatial(kind, _decode(PARAM_LAYOUT[kind], values))


def photometric_from_target(values) -> PhotometricTransform:
    return PhotometricTransform(*_decode(CCBS_LAYOUT, values))


# --------------------------------------------------------------------------
# Application to images


def pixel_grid(height: int, width: int) -> tuple[np.ndarray, np.ndarray]:
    """Normalized (x, y) coordinates of every pixel center."""
    xs = np.linspace(-1.0, 1.0, width) if width > 1 else np.zeros(1)
    ys = np.linspace(-1.0, 1.0, height) if height > 1 else np.zeros(1)
    return np.meshgrid(xs, ys)


def _bilinear(image: np.ndarray, px: np.ndarray, py: np.ndarray) -> np.ndarray:
    h, w = image.shape[:2]
    # Snap float noise so grid-aligned samples hit pixels exactly.
    rx, ry = np.round(px), np.round(py)
    px = np.where(np.abs(px - rx) < 1e-9, rx, px)
    py = np.where(np.abs(py - ry) < 1e-9, ry, py)
    x0 = np.floor(px).astype(np.int64)
    y0 = np.floor(py).astype(np.int64)
    fx = (px - x0)[..., None]
    fy = (py - y0)[..., None]
    out = np.zeros(px.shape + image.shape[2:])
    for dy, wy in ((0, 1.0 - fy), (1, fy)):
        for dx, wx in ((0, 1.0 - fx), (1, fx)):
            xi, yi = x0 + dx, y0 + dy
            valid = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
            vals = image[np.clip(yi, 0, h - 1), np.clip(xi, 0, w - 1)]
            weight = wx * wy
            out += np.where(valid[..., None], vals, 0.0) * np.where(weight == 0, 0.0, weight)
    return out


def warp(image: np.ndarray, t: SpatialTransform | np.ndarray) -> np.ndarray:
    """Warp an ``(H, W, C)`` image by inverse mapping with bilinear sampling.

    Output pixel ``p'`` reads the input at ``H^-1 p'``; samples outside the
    image contribute zero.
    """
    m = t.matrix if isinstance(t, SpatialTransform) else np.asarray(t, dtype=np.float64)
    if abs(np.linalg.det(m)) < SINGULAR_TOL:
        raise TransformError("matrix is not invertible")
    img = np.asarray(image, dtype=np.float64)
    h, w = img.shape[:2]
    gx, gy = pixel_grid(h, w)
    src = apply_homography(np.linalg.inv(m), np.stack([gx, gy], axis=-1))
    px = (src[..., 0] + 1.0) * (w - 1) / 2.0
    py = (src[..., 1] + 1.0) * (h - 1) / 2.0
    return np.clip(_bilinear(img, px, py), 0.0, 1.0)


def warp_batch(images: torch.Tensor, matrices) -> torch.Tensor:
    """Batched ``warp`` for ``(B, C, H, W)`` tensors via ``grid_sample``."""
    b, _, h, w = images.shape
    inv = torch.linalg.inv(torch.as_tensor(np.asarray(matrices), dtype=images.dtype))
    ys = torch.linspace(-1.0, 1.0, h, dtype=images.dtype)
    xs = torch.linspace(-1.0, 1.0, w, dtype=images.dtype)
    gy, gx = torch.meshgrid(ys, xs, indexing="ij")
    pts = torch.stack([gx, gy, torch.ones_like(gx)], dim=-1).reshape(1, -1, 3)
    src = pts @ inv.transpose(1, 2)
    grid = (src[..., :2] / src[..., 2:3]).reshape(b, h, w, 2)
    out = F.grid_sample(images, grid, mode="bilinear", padding_mode="zeros", align_corners=True)
    return out.clamp(0.0, 1.0)


def sample_ccbs(rng: np.random.Generator) -> PhotometricTransform:
    lo, hi = CCBS_RANGE
    return PhotometricTransform(*(float(v) for v in rng.uniform(lo, hi, size=4)))


def _smooth(img: np.ndarray) -> np.ndarray:
    h, w = img.shape[:2]
    if h < 3 or w < 3:
        return img.copy()
    out = img.copy()
    acc = np.zeros_like(img[1:-1, 1:-1])
    for dy in range(3):
        for dx in range(3):
            acc += SMOOTH_KERNEL[dy, dx] * img[dy : dy + h - 2, dx : dx + w - 2]
    out[1:-1, 1:-1] = acc
    return out


def _gray(img: np.ndarray) -> np.ndarray:
    if img.shape[-1] == 1:
        return img[..., 0]
    return img[..., :3] @ LUMA


def _blend(base, v, m):
    # m * v + (1 - m) * base is exact at m == 1, unlike base + m * (v - base)
    return np.clip(m * v + (1.0 - m) * base, 0.0, 1.0)


def apply_ccbs(image: np.ndarray, t: PhotometricTransform) -> np.ndarray:
    """Color, contrast, brightness, then sharpness, each as a blend against a base."""
    img = np.asarray(image, dtype=np.float64)
    img = _blend(_gray(img)[..., None], img, t.color)
    img = _blend(_gray(img).mean(), img, t.contrast)
    img = _blend(0.0, img, t.brightness)
    img = _blend(_smooth(img), img, t.sharpness)
    return img


def ccbs_batch(images: torch.Tensor, magnitudes) -> torch.Tensor:
    """Batched ``apply_ccbs``; ``magnitudes`` is ``(B, 4)``."""
    m = torch.as_tensor(np.asarray(magnitudes), dtype=images.dtype).reshape(-1, 4, 1, 1, 1)
    c = images.shape[1]
    luma = torch.as_tensor(LUMA, dtype=images.dtype).reshape(1, 3, 1, 1)

    def gray(x):
        if c == 1:
            return x
        return (x[:, :3] * luma).sum(dim=1, keepdim=True)

    def blend(base, v, mag):
        return (mag * v + (1.0 - mag) * base).clamp(0.0, 1.0)

    x = blend(gray(images), images, m[:, 0])
    x = blend(gray(x).mean(dim=(1, 2, 3), keepdim=True), x, m[:, 1])
    x = blend(torch.zeros_like(x), x, m[:, 2])
    if x.shape[2] >= 3 and x.shape[3] >= 3:
        kernel = torch.as_tensor(SMOOTH_KERNEL, dtype=x.dtype).expand(c, 1, 3, 3)
        inner = F.conv2d(x, kernel, groups=c)
        smooth = x.clone()
        smooth[:, :, 1:-1, 1:-1] = inner
    else:
        smooth = x
    return blend(smooth, x, m[:, 3])
