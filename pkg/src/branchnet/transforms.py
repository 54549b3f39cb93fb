"""In-network augmentations: flip, rotation and scale of feature maps.

All transforms keep the feature map's height, width and channels. Rotation
and scale share one bilinear inverse-mapping warp around the spatial centre
((H-1)/2, (W-1)/2); pixel centres sit on integer coordinates and any output
pixel whose source point lands outside [0, H-1] x [0, W-1] is zero.
"""

import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Optional, Sequence, Tuple

import numpy as np

from . import ops
from .tensor import ShapeError, Tensor

KINDS = ("identity", "flip_h", "rotate", "scale")

# float noise below this is snapped to the nearest integer so that lattice
# mappings (0/90/180 degrees, factor 1) sample pixels exactly
_SNAP = 1e-9


@dataclass(frozen=True)
class TransformSpec:
    """One branch variant attached to a spot.

    ``random_range`` makes the angle (rotate) or factor (scale) a uniform draw
    in training mode; with ``sample_in_eval`` the draw also happens in eval.
    """

    kind: str = "identity"
    angle_deg: float = 0.0
    factor: float = 1.0
    random_range: Optional[Tuple[float, float]] = None
    sample_in_eval: bool = False

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown transform kind {self.kind!r}; expected one of {KINDS}")
        if self.kind in ("identity", "flip_h") and (
            self.angle_deg != 0.0 or self.factor != 1.0 or self.random_range is not None
        ):
            raise ValueError(f"{self.kind} takes no parameters")
        if self.factor <= 0:
            raise ValueError(f"scale factor must be > 0, got {self.factor}")
        if self.random_range is not None:
            lo, hi = self.random_range
            if lo > hi:
                raise ValueError(f"random_range lo > hi: {self.random_range}")
            if self.kind == "scale" and lo <= 0:
                raise ValueError("scale random_range must be positive")
            object.__setattr__(self, "random_range", (float(lo), float(hi)))

    def to_dict(self) -> dict:
        d = {"kind": self.kind}
        if self.kind == "rotate":
            d["angle_deg"] = self.angle_deg
        if self.kind == "scale":
            d["factor"] = self.factor
        if self.random_range is not None:
            d["random_range"] = list(self.random_range)
            d["sample_in_eval"] = self.sample_in_eval
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TransformSpec":
        allowed = {"kind", "angle_deg", "factor", "random_range", "sample_in_eval"}
        unknown = set(d) - allowed
        if unknown:
            raise ValueError(f"unknown transform keys {sorted(unknown)}")
        rr = d.get("random_range")
        return cls(
            kind=d.get("kind", "identity"),
            angle_deg=float(d.get("angle_deg", 0.0)),
            factor=float(d.get("factor", 1.0)),
            random_range=tuple(rr) if rr is not None else None,
            sample_in_eval=bool(d.get("sample_in_eval", False)),
        )


IDENTITY = TransformSpec()
FLIP = TransformSpec("flip_h")


def _snap(v: np.ndarray) -> np.ndarray:
    r = np.round(v)
    return np.where(np.abs(v - r) < _SNAP, r, v)


@lru_cache(maxsize=256)
def _table_cached(h: int, w: int, affine: Tuple[float, ...]):
    a = np.asarray(affine, dtype=np.float64).reshape(2, 3)
    ch, cw = (h - 1) / 2.0, (w - 1) / 2.0
    hh, ww = np.meshgrid(np.arange(h, dtype=np.float64) - ch, np.arange(w, dtype=np.float64) - cw, indexing="ij")
    sy = _snap(a[0, 0] * hh + a[0, 1] * ww + a[0, 2] + ch)
    sx = _snap(a[1, 0] * hh + a[1, 1] * ww + a[1, 2] + cw)
    valid = (sy >= 0) & (sy <= h - 1) & (sx >= 0) & (sx <= w - 1)
    y0 = np.clip(np.floor(sy), 0, h - 1).astype(np.int64)
    x0 = np.clip(np.floor(sx), 0, w - 1).astype(np.int64)
    fy = np.where(valid, sy - y0, 0.0)
    fx = np.where(valid, sx - x0, 0.0)
    table = (valid, y0, x0, fy, fx)
    for arr in table:
        arr.setflags(write=False)
    return table


def warp_table(h: int, w: int, affine) -> tuple:
    """Sampling table (valid, y0, x0, fy, fx) for an output-to-source affine map.

    ``affine`` is 2x3 and acts on centred (row, col) output coordinates:
    ``src - centre = affine[:, :2] @ (out - centre) + affine[:, 2]``.
    """
    a = _snap(np.asarray(affine, dtype=np.float64).reshape(2, 3))
    if abs(np.linalg.det(a[:, :2])) < 1e-12:
        raise ValueError("warp affine must be invertible")
    return _table_cached(h, w, tuple(float(v) for v in a.ravel()))


def warp_bilinear(x: Tensor, affine) -> Tensor:
    return ops.warp(x, warp_table(x.height, x.width, affine))


def rotation_affine(angle_deg: float) -> np.ndarray:
    """Output-to-source map that rotates content by ``angle_deg`` about the centre.

    Positive angles turn the content clockwise as seen with row 0 at the top.
    """
    t = math.radians(angle_deg)
    c, s = math.cos(t), math.sin(t)
    # inverse rotation in (row, col) coordinates
    return np.array([[c, -s, 0.0], [s, c, 0.0]])


def scale_affine(factor: float) -> np.ndarray:
    if factor <= 0:
        raise ValueError(f"scale factor must be > 0, got {factor}")
    inv = 1.0 / factor
    return np.array([[inv, 0.0, 0.0], [0.0, inv, 0.0]])


def flip_h(x: Tensor) -> Tensor:
    return ops.flip_h(x)


def rotate(x: Tensor, angle_deg: float) -> Tensor:
    if angle_deg == 0.0:
        return x
    return warp_bilinear(x, rotation_affine(angle_deg))


def scale(x: Tensor, factor: float) -> Tensor:
    """Zoom about the centre; <1 shrinks with a zero border, >1 centre-crops."""
    if factor <= 0:
        raise ValueError(f"scale factor must be > 0, got {factor}")
    if factor == 1.0:
        return x
    return warp_bilinear(x, scale_affine(factor))


def draw_parameter(spec: TransformSpec, rng: Optional[np.random.Generator], training: bool) -> Optional[float]:
    """The angle/factor to use for this forward pass (None for flip/identity)."""
    if spec.kind == "rotate":
        value = spec.angle_deg
    elif spec.kind == "scale":
        value = spec.factor
    else:
        return None
    if spec.random_range is not None and (training or spec.sample_in_eval):
        if rng is None:
            raise ValueError(f"{spec.kind} with random_range needs an rng")
        lo, hi = spec.random_range
        value = float(rng.uniform(lo, hi))
    return value


def apply_spec(x: Tensor, spec: TransformSpec, value: Optional[float] = None) -> Tensor:
    if spec.kind == "identity":
        return x
    if spec.kind == "flip_h":
        return ops.flip_h(x)
    if spec.kind == "rotate":
        return rotate(x, spec.angle_deg if value is None else value)
    return scale(x, spec.factor if value is None else value)


def apply_branching(
    x: Tensor,
    specs: Sequence[TransformSpec],
    rng: Optional[np.random.Generator] = None,
    training: bool = False,
) -> Tensor:
    """Expand ``x`` into ``len(specs)`` variants stacked variant-major.

    Output row ``r * B + b`` is ``specs[r]`` applied to input row ``b``. Random
    parameters are drawn once per variant per call.
    """
    if not specs:
        raise ShapeError("apply_branching: empty transform list")
    variants = [apply_spec(x, s, draw_parameter(s, rng, training)) for s in specs]
    return ops.concat_rows(variants)
