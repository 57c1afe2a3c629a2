"""
Turning feature grids and bursts into token sequences and back.

Spatial orders permute the H*W positions of one frame. Temporal orders build
one length-L sequence per keyframe pixel. Optical-flow serialization (OFS)
samples frame b at the keyframe coordinate minus the flow, with bilinear
weights, without warping the source frames.

Coordinates follow image convention: x is the column (axis W), y is the row
(axis H). A FlowMap holds du (x-displacement) and dv (y-displacement) in LR pixels.
"""

import logging
import math
from dataclasses import dataclass
from enum import Enum
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from src import autodiff as ad
from src.autodiff import Tensor, TensorLike
from src.exceptions import ShapeError, ValidationError

logging.basicConfig(
    level=logging.INFO,
    format='%(asctime)s - %(name)s - %(levelname)s - %(message)s'
)
logger = logging.getLogger(__name__)


class ScanOrder(str, Enum):
    ROW_FWD = "row_fwd"
    ROW_BWD = "row_bwd"
    COL_FWD = "col_fwd"
    COL_BWD = "col_bwd"
    TIME_FWD = "time_fwd"
    TIME_BWD = "time_bwd"

    @property
    def spatial(self) -> bool:
        return self in SPATIAL_ORDERS


SPATIAL_ORDERS = (ScanOrder.ROW_FWD, ScanOrder.ROW_BWD, ScanOrder.COL_FWD, ScanOrder.COL_BWD)


def scan_permutation(order: Union[ScanOrder, str], height: int, width: int) -> np.ndarray:
    """Flat row-major grid index visited at each sequence position."""
    order = ScanOrder(order)
    if not order.spatial:
        raise ValidationError(f"serialize_2d: {order.value} is a temporal order, expected one of "
                              f"{[o.value for o in SPATIAL_ORDERS]}")
    grid = np.arange(height * width).reshape(height, width)
    if order in (ScanOrder.COL_FWD, ScanOrder.COL_BWD):
        grid = grid.T
    perm = grid.reshape(-1)
    if order in (ScanOrder.ROW_BWD, ScanOrder.COL_BWD):
        perm = perm[::-1]
    return np.ascontiguousarray(perm)


def serialize_2d(f: TensorLike, order: Union[ScanOrder, str]) -> Tensor:
    """(..., C, H, W) -> (..., C, H*W) in the given spatial order."""
    f = ad.as_tensor(f)
    if f.ndim < 3:
        raise ShapeError(f"serialize_2d: expected (..., C, H, W), got {f.shape}")
    height, width = f.shape[-2:]
    flat = ad.reshape(f, f.shape[:-2] + (height * width,))
    return ad.gather(flat, scan_permutation(order, height, width), axis=-1)


def deserialize_2d(seq: TensorLike, order: Union[ScanOrder, str], height: int, width: int) -> Tensor:
    """Inverse of serialize_2d."""
    seq = ad.as_tensor(seq)
    if seq.shape[-1] != height * width:
        raise ShapeError(f"deserialize_2d: sequence {seq.shape} does not hold a {height}x{width} grid")
    inverse = np.argsort(scan_permutation(order, height, width))
    grid = ad.gather(seq, inverse, axis=-1)
    return ad.reshape(grid, seq.shape[:-1] + (height, width))


def merge_paths(ys: Sequence[TensorLike]) -> Tensor:
    """Element-wise sum of paths already returned to canonical order."""
    if not ys:
        raise ValidationError("merge_paths: no paths given")
    ys = [ad.as_tensor(y) for y in ys]
    shapes = {y.shape for y in ys}
    if len(shapes) != 1:
        raise ShapeError(f"merge_paths: path shapes differ: {[y.shape for y in ys]}")
    out = ys[0]
    for y in ys[1:]:
        out = out + y
    return out


def time_serialize(frames: TensorLike) -> Tensor:
    """(B, L, C, H, W) -> (B*H*W, L, C): one sequence per pixel, frames in burst order."""
    frames = ad.as_tensor(frames)
    batch, length, channels, height, width = frames.shape
    seq = ad.transpose(frames, (0, 3, 4, 1, 2))
    return ad.reshape(seq, (batch * height * width, length, channels))


def time_deserialize(seq: TensorLike, batch: int, height: int, width: int) -> Tensor:
    seq = ad.as_tensor(seq)
    _, length, channels = seq.shape
    grid = ad.reshape(seq, (batch, height, width, length, channels))
    return ad.transpose(grid, (0, 3, 4, 1, 2))


def reverse_time(seq: TensorLike) -> Tensor:
    """Flip axis 1 of a (P, L, C) token tensor (time_bwd traversal)."""
    return ad.slice_(seq, (slice(None), slice(None, None, -1)))


@dataclass(frozen=True, eq=False)
class FlowMap:
    """Displacement field for one frame: (x^b, y^b) = (x^0, y^0) - (du, dv)."""

    du: np.ndarray
    dv: np.ndarray

    def __post_init__(self):
        if self.du.shape != self.dv.shape or self.du.ndim != 2:
            raise ShapeError(f"FlowMap: du {self.du.shape} and dv {self.dv.shape} must be equal H x W fields")
        if not (np.all(np.isfinite(self.du)) and np.all(np.isfinite(self.dv))):
            raise ValidationError("FlowMap: non-finite displacement")

    @property
    def shape(self) -> Tuple[int, int]:
        return self.du.shape

    @classmethod
    def zeros(cls, height: int, width: int) -> "FlowMap":
        return cls(np.zeros((height, width)), np.zeros((height, width)))

    @classmethod
    def constant(cls, du: float, dv: float, height: int, width: int) -> "FlowMap":
        return cls(np.full((height, width), float(du)), np.full((height, width), float(dv)))

    @classmethod
    def from_array(cls, array: np.ndarray) -> "FlowMap":
        array = np.asarray(array, dtype=np.float64)
        if array.ndim != 3 or array.shape[0] != 2:
            raise ShapeError(f"FlowMap: expected (2, H, W) array, got {array.shape}")
        return cls(array[0], array[1])

    def to_array(self) -> np.ndarray:
        return np.stack([self.du, self.dv]).astype(np.float32)

    def is_zero(self) -> bool:
        return not (np.any(self.du) or np.any(self.dv))


@dataclass(frozen=True)
class BilinearTap:
    """Four neighbours of a real coordinate; weights[i][j] pairs x_i with y_j."""

    x1: int
    x2: int
    y1: int
    y2: int
    weights: Tuple[Tuple[float, float], Tuple[float, float]]
    height: int
    width: int

    def neighbors(self) -> List[Tuple[int, int, float]]:
        """(x, y, weight) with coordinates clamped to the grid (replicate border)."""
        xs = (min(max(self.x1, 0), self.width - 1), min(max(self.x2, 0), self.width - 1))
        ys = (min(max(self.y1, 0), self.height - 1), min(max(self.y2, 0), self.height - 1))
        return [(xs[i], ys[j], self.weights[i][j]) for i in range(2) for j in range(2)]

    def as_dict(self) -> Dict[Tuple[int, int], float]:
        out: Dict[Tuple[int, int], float] = {}
        for x, y, w in self.neighbors():
            out[(x, y)] = out.get((x, y), 0.0) + w
        return out


def bilinear_tap(x: float, y: float, height: int, width: int) -> BilinearTap:
    """Bilinear neighbours of (x, y); clamping happens after the weights are fixed."""
    if math.isnan(x) or math.isnan(y):
        raise ValidationError(f"bilinear_tap: NaN coordinate ({x}, {y})")
    if math.isinf(x) or math.isinf(y):
        raise ValidationError(f"bilinear_tap: infinite coordinate ({x}, {y})")
    x1, y1 = math.floor(x), math.floor(y)
    fx, fy = x - x1, y - y1
    weights = (((1.0 - fx) * (1.0 - fy), (1.0 - fx) * fy),
               (fx * (1.0 - fy), fx * fy))
    return BilinearTap(x1, x1 + 1, y1, y1 + 1, weights, height, width)


@dataclass
class OfsTaps:
    """
    Sampling instructions of one OFS call.

    index: (B, L, H*W, 4) flat row-major pixel index inside frame b
    weights: (B, L, H*W, 4) bilinear weights, ordered (x1,y1), (x2,y1), (x1,y2), (x2,y2)
    """

    index: np.ndarray
    weights: np.ndarray
    height: int
    width: int

    @property
    def batch(self) -> int:
        return self.index.shape[0]

    @property
    def length(self) -> int:
        return self.index.shape[1]

    def global_index(self) -> np.ndarray:
        batch, length, pixels, _ = self.index.shape
        base = np.arange(batch * length).reshape(batch, length, 1, 1) * pixels
        return (self.index + base).reshape(-1)


FlowInput = Union[np.ndarray, Sequence[FlowMap], Sequence[Sequence[FlowMap]]]


def flows_to_array(flows: FlowInput, length: int, height: int, width: int) -> np.ndarray:
    """Normalize flows to a (B, L, 2, H, W) float64 array and validate shapes."""
    if isinstance(flows, np.ndarray):
        array = np.asarray(flows, dtype=np.float64)
    elif len(flows) and isinstance(flows[0], FlowMap):
        array = np.stack([f.to_array().astype(np.float64) for f in flows])
    else:
        array = np.stack([np.stack([f.to_array().astype(np.float64) for f in sample]) for sample in flows])
    if array.ndim == 4:
        array = array[None]
    if array.ndim != 5 or array.shape[1:] != (length, 2, height, width):
        raise ShapeError(f"ofs: flows {array.shape} do not match {length} frames of {height}x{width} "
                         f"(expected (B, L, 2, H, W))")
    if not np.all(np.isfinite(array)):
        raise ValidationError("ofs: non-finite flow values")
    return array


def ofs_taps(flows: FlowInput, length: int, height: int, width: int, mode: str = "bilinear") -> OfsTaps:
    """
    Sampling positions (x^0, y^0) - delta for every frame and keyframe pixel.

    Args:
        flows: Per-frame FlowMaps (or a (B, L, 2, H, W) array); the keyframe flow must be zero
        length: Burst length L
        height: Grid height H
        width: Grid width W
        mode: "bilinear" for subpixel taps, "integer" to round to the nearest pixel

    Returns:
        OfsTaps holding indices and weights
    """
    array = flows_to_array(flows, length, height, width)
    if np.any(array[:, 0]):
        raise ValidationError("ofs: keyframe flow must be identically zero")
    ys, xs = np.meshgrid(np.arange(height, dtype=np.float64), np.arange(width, dtype=np.float64), indexing="ij")
    sample_x = (xs - array[:, :, 0]).reshape(array.shape[0], length, -1)
    sample_y = (ys - array[:, :, 1]).reshape(array.shape[0], length, -1)
    if mode == "integer":
        sample_x = np.floor(sample_x + 0.5)
        sample_y = np.floor(sample_y + 0.5)
    elif mode != "bilinear":
        raise ValidationError(f"ofs: unknown sampling mode {mode!r}")

    x1 = np.floor(sample_x)
    y1 = np.floor(sample_y)
    fx = sample_x - x1
    fy = sample_y - y1
    x1 = x1.astype(np.int64)
    y1 = y1.astype(np.int64)
    cx1, cx2 = np.clip(x1, 0, width - 1), np.clip(x1 + 1, 0, width - 1)
    cy1, cy2 = np.clip(y1, 0, height - 1), np.clip(y1 + 1, 0, height - 1)
    index = np.stack([cy1 * width + cx1, cy1 * width + cx2, cy2 * width + cx1, cy2 * width + cx2], axis=-1)
    weights = np.stack([(1.0 - fx) * (1.0 - fy), fx * (1.0 - fy), (1.0 - fx) * fy, fx * fy], axis=-1)
    return OfsTaps(index=index, weights=weights, height=height, width=width)


def identity_taps(batch: int, length: int, height: int, width: int) -> OfsTaps:
    return ofs_taps(np.zeros((batch, length, 2, height, width)), length, height, width)


def _as_burst(features: TensorLike) -> Tuple[Tensor, bool]:
    features = ad.as_tensor(features)
    if features.ndim == 4:
        return ad.reshape(features, (1,) + features.shape), True
    if features.ndim != 5:
        raise ShapeError(f"ofs: expected (L, C, H, W) or (B, L, C, H, W) features, got {features.shape}")
    return features, False


def ofs_sample(features: TensorLike, taps: OfsTaps) -> Tensor:
    """
    Gather flow-compensated tokens.

    Args:
        features: (B, L, C, H, W) frames in their native view
        taps: Taps from ``ofs_taps``

    Returns:
        (B*H*W, L, C) per-pixel sequences
    """
    features, _ = _as_burst(features)
    batch, length, channels, height, width = features.shape
    if (taps.batch, taps.length, taps.height, taps.width) != (batch, length, height, width):
        raise ShapeError(f"ofs: taps for {(taps.batch, taps.length, taps.height, taps.width)} cannot sample "
                         f"features {features.shape}")
    rows = ad.reshape(ad.transpose(features, (0, 1, 3, 4, 2)), (batch * length * height * width, channels))
    picked = ad.gather(rows, taps.global_index(), axis=0)
    picked = ad.reshape(picked, taps.index.shape + (channels,))
    weights = taps.weights[..., None].astype(features.dtype)
    tokens = ad.sum_(picked * weights, axis=3)
    tokens = ad.transpose(tokens, (0, 2, 1, 3))
    return ad.reshape(tokens, (batch * height * width, length, channels))


def ofs_serialize(burst_features: TensorLike, flows: FlowInput, keyframe: int = 0,
                  mode: str = "bilinear") -> Tuple[Tensor, OfsTaps]:
    """Per-pixel sequences [f^0(p), f^1(p - delta^1), ...] plus the taps needed by the adjoint."""
    if keyframe != 0:
        raise ValidationError(f"ofs: keyframe index is fixed to 0, got {keyframe}")
    features, _ = _as_burst(burst_features)
    _, length, _, height, width = features.shape
    taps = ofs_taps(flows, length, height, width, mode=mode)
    return ofs_sample(features, taps), taps


def ofs_scatter(grad_sequences: TensorLike, taps: OfsTaps) -> Tensor:
    """
    Adjoint of ``ofs_sample``: splat weighted token values back onto native frames.

    Args:
        grad_sequences: (B*H*W, L, C) tensor
        taps: Taps of the matching serialize call

    Returns:
        (B, L, C, H, W) tensor
    """
    grad_sequences = ad.as_tensor(grad_sequences)
    batch, length, height, width = taps.batch, taps.length, taps.height, taps.width
    if grad_sequences.ndim != 3 or grad_sequences.shape[:2] != (batch * height * width, length):
        raise ShapeError(f"ofs_scatter: sequences {grad_sequences.shape} do not match taps for "
                         f"B={batch}, L={length}, {height}x{width}")
    channels = grad_sequences.shape[2]
    seq = ad.reshape(grad_sequences, (batch, height * width, length, channels))
    seq = ad.reshape(ad.transpose(seq, (0, 2, 1, 3)), (batch, length, height * width, 1, channels))
    weighted = seq * taps.weights[..., None].astype(grad_sequences.dtype)
    rows = ad.reshape(weighted, (-1, channels))
    frames = ad.scatter_add(rows, taps.global_index(), batch * length * height * width, axis=0)
    frames = ad.reshape(frames, (batch, length, height, width, channels))
    return ad.transpose(frames, (0, 1, 4, 2, 3))


def prealign_burst(burst: np.ndarray, flows: FlowInput, mode: str = "bilinear") -> np.ndarray:
    """Backward-warp every frame onto the keyframe grid using the same taps as OFS."""
    single = burst.ndim == 4
    frames = burst[None] if single else burst
    batch, length, channels, height, width = frames.shape
    with ad.no_grad():
        taps = ofs_taps(flows, length, height, width, mode=mode)
        tokens = ofs_sample(Tensor(frames), taps)
        warped = time_deserialize(tokens, batch, height, width).data
    return warped[0] if single else warped


def resolve_taps(flows: Optional[FlowInput], alignment: str, batch: int, length: int,
                 height: int, width: int) -> OfsTaps:
    """Taps for a temporal block under the configured alignment variant."""
    if alignment in ("none", "prealign") or flows is None:
        return identity_taps(batch, length, height, width)
    if alignment == "ofs":
        return ofs_taps(flows, length, height, width, mode="bilinear")
    if alignment == "ofs_integer":
        return ofs_taps(flows, length, height, width, mode="integer")
    raise ValidationError(f"unknown alignment {alignment!r}")
