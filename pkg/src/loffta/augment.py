"""Spatial and noise augmentations applied directly to cached feature grids.

Grids are treated as low-resolution multi-channel images: geometric operators
move whole d-vectors between cells, never mixing channels. All geometric
operators keep the input (h, w, d) shape; cells whose inverse-mapped source
falls outside the grid are filled with the zero vector.

Conventions, fixed for reproducibility:
  - Nearest-neighbor rounding is round-half-down: nn(x) = ceil(x - 0.5).
  - Trig factors are snapped to 12 decimals so exact angles (0, 45, 90, 180)
    behave as their algebraic identities despite float trig.
  - The continuous spatial center is ((h-1)/2, (w-1)/2).
  - Bilinear resize uses the half-pixel (align-corners-false) convention
    with edge clamping, then center-crops or zero-pads back to (h, w).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidParameter, InvalidValue
from .records import FeatureRecord
from .rng import RngStream


def _snap(x: float) -> float:
    # kill float-trig residue: tan(45 deg) = 0.9999999999999999 etc.
    return round(x, 12)


def _nn_index(x: np.ndarray) -> np.ndarray:
    """Round-half-down to the nearest integer index."""
    return np.ceil(x - 0.5).astype(np.int64)


# -- individual operators ---------------------------------------------------

def flip(grid: np.ndarray, axis: str) -> np.ndarray:
    if axis == "horizontal":
        return np.ascontiguousarray(grid[:, ::-1, :])
    if axis == "vertical":
        return np.ascontiguousarray(grid[::-1, :, :])
    raise InvalidParameter(f"axis must be horizontal or vertical, got {axis!r}")


def _gather(grid: np.ndarray, src_r: np.ndarray, src_c: np.ndarray) -> np.ndarray:
    """Nearest-neighbor gather with zero fill for out-of-range sources."""
    h, w, d = grid.shape
    rr = _nn_index(src_r)
    cc = _nn_index(src_c)
    valid = (rr >= 0) & (rr < h) & (cc >= 0) & (cc < w)
    out = np.zeros_like(grid)
    out[valid] = grid[rr[valid], cc[valid]]
    return out


def rotate(grid: np.ndarray, angle_deg: float) -> np.ndarray:
    """Rotate about the grid center, nearest neighbor, zero fill.

    Positive 90 degrees maps the bottom-left cell to the top-left corner,
    i.e. rotate(g, 90) equals transpose-then-horizontal-flip.
    """
    if not math.isfinite(angle_deg):
        raise InvalidParameter(f"rotation angle must be finite, got {angle_deg}")
    if angle_deg == 0.0:
        return grid
    h, w, _ = grid.shape
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    theta = math.radians(angle_deg)
    cos, sin = _snap(math.cos(theta)), _snap(math.sin(theta))
    rr, cc = np.meshgrid(np.arange(h, dtype=np.float64) - cy,
                         np.arange(w, dtype=np.float64) - cx, indexing="ij")
    src_r = cos * rr - sin * cc + cy
    src_c = sin * rr + cos * cc + cx
    return _gather(grid, src_r, src_c)


def shear(grid: np.ndarray, angle_x_deg: float, angle_y_deg: float) -> np.ndarray:
    """Shear along x (columns slide with row) and y (rows slide with column)."""
    for name, a in (("angle_x", angle_x_deg), ("angle_y", angle_y_deg)):
        if not math.isfinite(a) or abs(a) >= 90.0:
            raise InvalidParameter(f"{name} must satisfy |angle| < 90, got {a}")
    if angle_x_deg == 0.0 and angle_y_deg == 0.0:
        return grid
    h, w, _ = grid.shape
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    tx = _snap(math.tan(math.radians(angle_x_deg)))
    ty = _snap(math.tan(math.radians(angle_y_deg)))
    rr, cc = np.meshgrid(np.arange(h, dtype=np.float64),
                         np.arange(w, dtype=np.float64), indexing="ij")
    src_c = cc - tx * (rr - cy)
    src_r = rr - ty * (cc - cx)
    return _gather(grid, src_r, src_c)


def translate(grid: np.ndarray, dr: int, dc: int) -> np.ndarray:
    """Shift by whole cells: output (r, c) takes input (r - dr, c - dc)."""
    if dr == 0 and dc == 0:
        return grid
    h, w, _ = grid.shape
    out = np.zeros_like(grid)
    src_r0, src_r1 = max(0, -dr), min(h, h - dr)
    src_c0, src_c1 = max(0, -dc), min(w, w - dc)
    if src_r0 < src_r1 and src_c0 < src_c1:
        out[src_r0 + dr:src_r1 + dr, src_c0 + dc:src_c1 + dc] = \
            grid[src_r0:src_r1, src_c0:src_c1]
    return out


def _resample_bilinear(grid: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    h, w, _ = grid.shape
    g = grid.astype(np.float64)

    def axis_coords(n_in, n_out):
        src = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
        lo = np.floor(src).astype(np.int64)
        frac = src - lo
        return np.clip(lo, 0, n_in - 1), np.clip(lo + 1, 0, n_in - 1), frac

    y0, y1, fy = axis_coords(h, out_h)
    x0, x1, fx = axis_coords(w, out_w)
    fy = fy[:, None, None]
    fx = fx[None, :, None]
    top = g[y0][:, x0] * (1 - fx) + g[y0][:, x1] * fx
    bot = g[y1][:, x0] * (1 - fx) + g[y1][:, x1] * fx
    return (top * (1 - fy) + bot * fy).astype(np.float32)


def resize(grid: np.ndarray, scale: float) -> np.ndarray:
    """Bilinear rescale, then center-crop or zero-pad back to the input size."""
    if not math.isfinite(scale) or scale <= 0:
        raise InvalidParameter(f"scale must be positive and finite, got {scale}")
    if scale == 1.0:
        return grid
    h, w, d = grid.shape
    out_h = int(math.floor(h * scale + 0.5))
    out_w = int(math.floor(w * scale + 0.5))
    if out_h < 1 or out_w < 1:
        raise InvalidParameter(
            f"scale {scale} collapses {h}x{w} to {out_h}x{out_w}")
    res = _resample_bilinear(grid, out_h, out_w)
    out = np.zeros((h, w, d), dtype=np.float32)
    # center-crop when larger, symmetric zero-pad (extra cell goes after)
    # when smaller; both axes handled independently
    if out_h >= h:
        r0 = (out_h - h) // 2
        res = res[r0:r0 + h]
        dst_r = slice(0, h)
    else:
        dst_r = slice((h - out_h) // 2, (h - out_h) // 2 + out_h)
    if out_w >= w:
        c0 = (out_w - w) // 2
        res = res[:, c0:c0 + w]
        dst_c = slice(0, w)
    else:
        dst_c = slice((w - out_w) // 2, (w - out_w) // 2 + out_w)
    out[dst_r, dst_c] = res
    return out


def add_noise(grid: np.ndarray, cls: np.ndarray, sigma_rel: float,
              rng: RngStream) -> tuple[np.ndarray, np.ndarray]:
    """Additive zero-mean Gaussian noise on grid and cls.

    sigma is sigma_rel times the std of all values in this record (grid and
    cls pooled together), so one setting is meaningful across providers with
    different feature scales. Grid noise is drawn before cls noise.
    """
    if not math.isfinite(sigma_rel) or sigma_rel < 0:
        raise InvalidParameter(f"sigma_rel must be >= 0, got {sigma_rel}")
    if sigma_rel == 0.0:
        return grid, cls
    sigma = sigma_rel * float(np.std(np.concatenate(
        [grid.reshape(-1), cls.reshape(-1)])))
    noisy_grid = grid + rng.normal(0.0, sigma, size=grid.shape).astype(np.float32)
    noisy_cls = cls + rng.normal(0.0, sigma, size=cls.shape).astype(np.float32)
    return noisy_grid.astype(np.float32), noisy_cls.astype(np.float32)


# -- policy and composition --------------------------------------------------

@dataclass
class AugmentationPolicy:
    """Per-transform probabilities, magnitude ranges, and enable flags."""

    p_flip_h: float = 0.5
    p_flip_v: float = 0.5
    rotate_max_deg: float = 15.0
    shear_max_deg: float = 10.0
    translate_max_frac: float = 0.1
    scale_range: tuple[float, float] = (0.8, 1.25)
    noise_sigma_rel: float = 0.1
    enable_flip_h: bool = True
    enable_flip_v: bool = True
    enable_rotate: bool = True
    enable_shear: bool = True
    enable_scale: bool = True
    enable_translate: bool = True
    enable_noise: bool = True

    def __post_init__(self):
        self.scale_range = (float(self.scale_range[0]), float(self.scale_range[1]))
        for name in ("p_flip_h", "p_flip_v"):
            p = getattr(self, name)
            if not (0.0 <= p <= 1.0):
                raise InvalidValue(f"{name} must be in [0, 1], got {p}")
        if self.rotate_max_deg < 0 or not math.isfinite(self.rotate_max_deg):
            raise InvalidValue(f"rotate_max_deg must be >= 0")
        if not (0.0 <= self.shear_max_deg < 90.0):
            raise InvalidValue(
                f"shear_max_deg must be in [0, 90), got {self.shear_max_deg}")
        if not (0.0 <= self.translate_max_frac < 1.0):
            raise InvalidValue(
                f"translate_max_frac must be in [0, 1), got {self.translate_max_frac}")
        lo, hi = self.scale_range
        if not (0.0 < lo <= 1.0 <= hi) or not math.isfinite(hi):
            raise InvalidValue(
                f"scale_range must satisfy 0 < lo <= 1 <= hi, got {self.scale_range}")
        if self.noise_sigma_rel < 0 or not math.isfinite(self.noise_sigma_rel):
            raise InvalidValue(f"noise_sigma_rel must be >= 0")

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in self.__dataclass_fields__}
        d["scale_range"] = list(self.scale_range)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "AugmentationPolicy":
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        unknown = set(d) - set(known)
        if unknown:
            raise InvalidValue(f"unknown policy fields: {sorted(unknown)}")
        if "scale_range" in known:
            known["scale_range"] = tuple(known["scale_range"])
        return cls(**known)

    @classmethod
    def disabled(cls) -> "AugmentationPolicy":
        """A policy whose every draw is the exact identity."""
        return cls(p_flip_h=0.0, p_flip_v=0.0, rotate_max_deg=0.0,
                   shear_max_deg=0.0, translate_max_frac=0.0,
                   scale_range=(1.0, 1.0), noise_sigma_rel=0.0)


@dataclass(frozen=True)
class TransformParams:
    """One concrete draw from a policy; applying it is fully deterministic."""

    flip_h: bool = False
    flip_v: bool = False
    rotate_deg: float = 0.0
    shear_x_deg: float = 0.0
    shear_y_deg: float = 0.0
    scale: float = 1.0
    dr: int = 0
    dc: int = 0
    noise_sigma_rel: float = 0.0


def draw_params(policy: AugmentationPolicy, rng: RngStream, h: int,
                w: int) -> TransformParams:
    """Sample transform parameters in the fixed composition order.

    Draw order (one rng consumption per enabled transform, skipped when
    disabled): flip_h coin, flip_v coin, rotate angle, shear x, shear y,
    scale, translate dr, translate dc. Noise normals are drawn later, at
    apply time, from the same stream.
    """
    flip_h = policy.enable_flip_h and rng.bernoulli(policy.p_flip_h)
    flip_v = policy.enable_flip_v and rng.bernoulli(policy.p_flip_v)
    rot = rng.uniform(-policy.rotate_max_deg, policy.rotate_max_deg) \
        if policy.enable_rotate else 0.0
    if policy.enable_shear:
        sx = rng.uniform(-policy.shear_max_deg, policy.shear_max_deg)
        sy = rng.uniform(-policy.shear_max_deg, policy.shear_max_deg)
    else:
        sx = sy = 0.0
    scale = rng.uniform(*policy.scale_range) if policy.enable_scale else 1.0
    if policy.enable_translate:
        max_r = int(policy.translate_max_frac * h)
        max_c = int(policy.translate_max_frac * w)
        dr = int(rng.integers(-max_r, max_r))
        dc = int(rng.integers(-max_c, max_c))
    else:
        dr = dc = 0
    sigma = policy.noise_sigma_rel if policy.enable_noise else 0.0
    return TransformParams(flip_h=flip_h, flip_v=flip_v, rotate_deg=float(rot),
                           shear_x_deg=float(sx), shear_y_deg=float(sy),
                           scale=float(scale), dr=dr, dc=dc,
                           noise_sigma_rel=float(sigma))


def apply_geometric(grid: np.ndarray, params: TransformParams) -> np.ndarray:
    """Apply the geometric part of a drawn transform, in the fixed order."""
    g = grid
    if params.flip_h:
        g = flip(g, "horizontal")
    if params.flip_v:
        g = flip(g, "vertical")
    g = rotate(g, params.rotate_deg)
    g = shear(g, params.shear_x_deg, params.shear_y_deg)
    g = resize(g, params.scale)
    g = translate(g, params.dr, params.dc)
    return g


def apply_policy(rec: FeatureRecord, policy: AugmentationPolicy,
                 rng: RngStream) -> FeatureRecord:
    """Draw parameters and apply flips, rotate, shear, resize, translate,
    then noise. Geometric transforms touch the grid only; noise perturbs
    grid and cls. The label always passes through untouched."""
    h, w, _ = rec.grid.shape
    params = draw_params(policy, rng, h, w)
    grid = apply_geometric(rec.grid, params)
    cls = rec.cls
    if params.noise_sigma_rel > 0:
        grid, cls = add_noise(grid, cls, params.noise_sigma_rel, rng)
    return FeatureRecord(label=rec.label, cls=cls.copy(), grid=grid.copy())
