"""
Synthetic bursts with exact ground-truth subpixel flows.

Frame b of a burst is the HR image translated by (dx_b, dy_b) HR pixels,
downsampled x4, optionally noised and mosaicked. Its flow toward the keyframe
is the constant field (dx_b / 4, dy_b / 4): keyframe content at p appears in
frame b at p - delta.
"""

import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage

import config
from src.exceptions import ShapeError, ValidationError
from src.image_io import write_ppm
from src.rng import Rng, derive_seed
from src.serialization import FlowMap
from src.tensor_io import load_array, save_array

logging.basicConfig(
    level=logging.INFO,
    format='%(asctime)s - %(name)s - %(levelname)s - %(message)s'
)
logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.json"
DOWNSAMPLE_MODES = ("box", "bicubic")


@dataclass
class DegradationConfig:
    scale: int = config.SCALE
    shift_max: float = config.SHIFT_MAX
    noise_sigma: float = config.NOISE_SIGMA
    mosaic: bool = config.MOSAIC
    downsample: str = config.DOWNSAMPLE
    frequency: float = config.FREQUENCY

    def __post_init__(self):
        if self.scale != 4:
            raise ValidationError(f"degradation scale must be 4, got {self.scale}")
        if self.shift_max < 0 or self.noise_sigma < 0 or self.frequency < 0:
            raise ValidationError("shift_max, noise_sigma and frequency must be >= 0")
        if self.downsample not in DOWNSAMPLE_MODES:
            raise ValidationError(f"downsample must be one of {DOWNSAMPLE_MODES}, got {self.downsample!r}")

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "DegradationConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ValidationError(f"unknown degradation fields: {unknown}")
        return cls(**data)


@dataclass
class BurstSample:
    lr_burst: np.ndarray
    hr_target: Optional[np.ndarray]
    flows: List[FlowMap]
    shifts: np.ndarray
    seed: int = 0
    metadata: Dict[str, Any] = field(default_factory=dict)

    @property
    def length(self) -> int:
        return self.lr_burst.shape[0]

    def flows_array(self) -> np.ndarray:
        """(L, 2, H, W) float32."""
        return np.stack([f.to_array() for f in self.flows])

    def truncated(self, length: int) -> "BurstSample":
        if not 1 <= length <= self.length:
            raise ValidationError(f"burst length {length} outside 1..{self.length}")
        return BurstSample(self.lr_burst[:length], self.hr_target, self.flows[:length], self.shifts[:length],
                           self.seed, dict(self.metadata))

    def crop(self, top: int, left: int, size: int, scale: int = 4) -> "BurstSample":
        """LR window of ``size`` pixels and the matching HR window."""
        lr = self.lr_burst[:, :, top:top + size, left:left + size]
        hr = self.hr_target[:, scale * top:scale * (top + size), scale * left:scale * (left + size)]
        flows = [FlowMap(f.du[top:top + size, left:left + size], f.dv[top:top + size, left:left + size])
                 for f in self.flows]
        return BurstSample(lr, hr, flows, self.shifts, self.seed, dict(self.metadata))


def checkerboard(height: int, width: int, period: int) -> np.ndarray:
    """(3, H, W) checkerboard with squares of ``period // 2`` pixels."""
    half = max(period // 2, 1)
    ys, xs = np.mgrid[0:height, 0:width]
    board = ((ys // half + xs // half) % 2).astype(np.float32)
    return np.repeat(board[None], 3, axis=0)


def generate_hr(seed: int, height: int, width: int, frequency: Optional[float] = None) -> np.ndarray:
    """
    Procedural HR image of shape (3, 4H, 4W) in [0, 1].

    Mixes oriented sinusoids, a checkerboard and smoothed random blobs per
    channel. ``frequency`` scales all spatial frequencies; 0 gives a constant 0.5 image.
    """
    frequency = config.FREQUENCY if frequency is None else frequency
    hr_h, hr_w = 4 * height, 4 * width
    if frequency == 0:
        return np.full((3, hr_h, hr_w), 0.5, dtype=np.float32)
    rng = Rng(seed, "hr")
    ys, xs = np.mgrid[0:hr_h, 0:hr_w].astype(np.float64)
    image = np.empty((3, hr_h, hr_w))
    for ch in range(3):
        crng = rng.child(ch)
        waves = np.zeros((hr_h, hr_w))
        for k in range(3):
            theta, phase = crng.uniform(2, 0.0, 2.0 * np.pi)
            period = crng.uniform((), 6.0, 24.0) / frequency
            waves += np.sin(2.0 * np.pi * (xs * np.cos(theta) + ys * np.sin(theta)) / period + phase) / 3.0
        board_period = max(2, int(round(float(crng.uniform((), 8.0, 16.0)) / frequency)))
        board = checkerboard(hr_h, hr_w, board_period)[0] * 2.0 - 1.0
        noise = crng.uniform((hr_h, hr_w), -1.0, 1.0)
        blobs = ndimage.gaussian_filter(noise, sigma=max(4.0 / frequency, 0.5), mode="wrap")
        blobs /= max(np.abs(blobs).max(), 1e-12)
        weights = crng.uniform(3, 0.2, 1.0)
        weights /= weights.sum()
        mix = weights[0] * waves + weights[1] * board + weights[2] * blobs
        image[ch] = 0.5 + 0.45 * mix
    return np.clip(image, 0.0, 1.0).astype(np.float32)


def translate(hr: np.ndarray, dx: float, dy: float) -> np.ndarray:
    """out(X, Y) = hr(X + dx, Y + dy), bilinear with replicated borders."""
    if dx == 0 and dy == 0:
        return hr.copy()
    return ndimage.shift(hr, (0.0, -dy, -dx), order=1, mode="nearest")


def downsample(hr: np.ndarray, scale: int = 4, mode: str = "box") -> np.ndarray:
    channels, hr_h, hr_w = hr.shape
    if mode == "box":
        return hr.reshape(channels, hr_h // scale, scale, hr_w // scale, scale).mean(axis=(2, 4))
    lr = ndimage.zoom(hr, (1.0, 1.0 / scale, 1.0 / scale), order=3, mode="nearest")
    return np.clip(lr, 0.0, 1.0)


def mosaic_rggb(rgb: np.ndarray) -> np.ndarray:
    """(3, H, W) -> (1, H, W) Bayer RGGB: R at (even, even), G at the two mixed sites, B at (odd, odd)."""
    rgb = np.asarray(rgb)
    if rgb.ndim != 3 or rgb.shape[0] != 3:
        raise ShapeError(f"mosaic_rggb: expected (3, H, W), got {rgb.shape}")
    if rgb.shape[1] % 2 or rgb.shape[2] % 2:
        raise ValidationError(f"even extents required, got {rgb.shape[1]}x{rgb.shape[2]}")
    out = np.empty((1,) + rgb.shape[1:], dtype=rgb.dtype)
    out[0, 0::2, 0::2] = rgb[0, 0::2, 0::2]
    out[0, 0::2, 1::2] = rgb[1, 0::2, 1::2]
    out[0, 1::2, 0::2] = rgb[1, 1::2, 0::2]
    out[0, 1::2, 1::2] = rgb[2, 1::2, 1::2]
    return out


def synthesize_burst(hr: np.ndarray, cfg: Optional[DegradationConfig] = None, seed: int = 0,
                     length: Optional[int] = None, shifts: Optional[np.ndarray] = None) -> BurstSample:
    """
    Form an LR burst from one HR image.

    Args:
        hr: (3, 4H, 4W) image in [0, 1]
        cfg: Degradation settings
        seed: Seed of the shift and noise draws
        length: Burst length L (ignored when ``shifts`` is given)
        shifts: Optional explicit (L, 2) HR-pixel shifts; row 0 must be (0, 0)

    Returns:
        BurstSample with flows (dx/4, dy/4) per frame
    """
    cfg = cfg or DegradationConfig()
    hr = np.asarray(hr, dtype=np.float32)
    scale = cfg.scale
    if hr.ndim != 3 or hr.shape[0] != 3:
        raise ShapeError(f"synthesize_burst: expected (3, H, W) HR image, got {hr.shape}")
    if hr.shape[1] % (2 * scale) or hr.shape[2] % (2 * scale):
        raise ValidationError(f"even extents required: HR {hr.shape[1]}x{hr.shape[2]} must be divisible by "
                              f"{2 * scale}")
    rng = Rng(seed, "burst")
    if shifts is None:
        length = length or config.BURST_LEN
        shifts = np.zeros((length, 2))
        if length > 1:
            shifts[1:] = rng.child("shifts").uniform((length - 1, 2), -cfg.shift_max, cfg.shift_max)
    shifts = np.asarray(shifts, dtype=np.float64)
    if np.any(shifts[0]):
        raise ValidationError("synthesize_burst: keyframe shift must be (0, 0)")
    lr_h, lr_w = hr.shape[1] // scale, hr.shape[2] // scale
    noise_rng = rng.child("noise")
    frames, flows = [], []
    for b, (dx, dy) in enumerate(shifts):
        frame = downsample(translate(hr, dx, dy), scale, cfg.downsample)
        if cfg.noise_sigma > 0:
            frame = np.clip(frame + noise_rng.normal(frame.shape, std=cfg.noise_sigma), 0.0, 1.0)
        if cfg.mosaic:
            frame = mosaic_rggb(frame)
        frames.append(frame.astype(np.float32))
        flows.append(FlowMap.constant(dx / scale, dy / scale, lr_h, lr_w))
    return BurstSample(np.stack(frames), hr, flows, shifts, seed)


@dataclass
class DatasetManifest:
    seed: int
    count: int
    height: int
    width: int
    length: int
    degradation: DegradationConfig

    def to_dict(self) -> Dict[str, Any]:
        return {"seed": self.seed, "count": self.count, "H": self.height, "W": self.width, "L": self.length,
                "degradation": self.degradation.to_dict()}

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "DatasetManifest":
        missing = [k for k in ("seed", "count", "H", "W", "L", "degradation") if k not in data]
        if missing:
            raise ValidationError(f"invalid dataset manifest: missing {missing}")
        return cls(int(data["seed"]), int(data["count"]), int(data["H"]), int(data["W"]), int(data["L"]),
                   DegradationConfig.from_dict(data["degradation"]))


def sample_seed(manifest_seed: int, index: int) -> int:
    return derive_seed(manifest_seed, "sample", index)


def make_sample(manifest: DatasetManifest, index: int) -> BurstSample:
    seed = sample_seed(manifest.seed, index)
    hr = generate_hr(seed, manifest.height, manifest.width, manifest.degradation.frequency)
    sample = synthesize_burst(hr, manifest.degradation, seed=seed, length=manifest.length)
    sample.metadata["index"] = index
    return sample


def sample_dir(root: str, index: int) -> str:
    return os.path.join(root, f"sample_{index:04d}")


def write_sample(root: str, index: int, sample: BurstSample) -> str:
    path = sample_dir(root, index)
    os.makedirs(path, exist_ok=True)
    save_array(sample.lr_burst, os.path.join(path, "lr_burst.nt"))
    save_array(sample.hr_target, os.path.join(path, "hr.nt"))
    for b, flow in enumerate(sample.flows):
        save_array(flow.to_array(), os.path.join(path, f"flow_{b:02d}.nt"))
    write_ppm(os.path.join(path, "hr.ppm"), sample.hr_target)
    write_ppm(os.path.join(path, "keyframe.ppm"), sample.lr_burst[0])
    return path


def read_sample(path: str, scale: int = 4) -> BurstSample:
    """
    Load one sample directory. flow_XX.nt files that are absent count as zero flow;
    hr.nt is optional and missing targets are left as None.
    """
    burst_path = os.path.join(path, "lr_burst.nt")
    if not os.path.isfile(burst_path):
        raise ValidationError(f"not a burst directory: {burst_path} missing")
    lr = load_array(burst_path)
    if lr.ndim != 4:
        raise ShapeError(f"lr_burst.nt: expected (L, c, H, W), got {lr.shape}")
    height, width = lr.shape[-2:]
    flows = []
    for b in range(lr.shape[0]):
        flow_path = os.path.join(path, f"flow_{b:02d}.nt")
        flows.append(FlowMap.from_array(load_array(flow_path)) if os.path.isfile(flow_path)
                     else FlowMap.zeros(height, width))
    hr_path = os.path.join(path, "hr.nt")
    hr = load_array(hr_path) if os.path.isfile(hr_path) else None
    shifts = np.array([[f.du.mean(), f.dv.mean()] for f in flows]) * scale
    return BurstSample(lr, hr, flows, shifts)


def write_dataset(out_dir: str, count: int, size: Tuple[int, int], length: int,
                  cfg: Optional[DegradationConfig] = None, seed: Optional[int] = None,
                  workers: int = 1) -> DatasetManifest:
    """
    Generate ``count`` bursts into ``out_dir`` with a manifest.

    Args:
        out_dir: Target directory
        count: Number of samples
        size: LR (H, W); both must be even
        length: Burst length L
        cfg: Degradation settings
        seed: Manifest seed; per-sample seeds derive from (seed, index)
        workers: Thread count; output is identical for any value

    Returns:
        The written manifest
    """
    height, width = size
    if height % 2 or width % 2 or height < 2 or width < 2:
        raise ValidationError(f"even extents required, got {height}x{width}")
    if count < 1 or length < 1:
        raise ValidationError(f"count and burst length must be >= 1, got {count} and {length}")
    manifest = DatasetManifest(config.SEED if seed is None else seed, count, height, width, length,
                               cfg or DegradationConfig())
    os.makedirs(out_dir, exist_ok=True)

    def build(index: int) -> str:
        return write_sample(out_dir, index, make_sample(manifest, index))

    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        paths = list(pool.map(build, range(count)))
    with open(os.path.join(out_dir, MANIFEST_NAME), "w", encoding="utf-8") as f:
        json.dump(manifest.to_dict(), f, indent=2, sort_keys=True)
    logger.info(f"Wrote {len(paths)} bursts ({length}x{height}x{width}) to {out_dir}")
    return manifest


class BurstDataset:
    """Read-only view of a generated dataset directory."""

    def __init__(self, root: str):
        self.root = root
        manifest_path = os.path.join(root, MANIFEST_NAME)
        if not os.path.isfile(manifest_path):
            raise ValidationError(f"dataset manifest not found: {manifest_path}")
        with open(manifest_path, "r", encoding="utf-8") as f:
            try:
                self.manifest = DatasetManifest.from_dict(json.load(f))
            except json.JSONDecodeError as e:
                raise ValidationError(f"invalid dataset manifest {manifest_path}: {e}") from e
        if self.manifest.count < 1:
            raise ValidationError(f"dataset {root} is empty")

    def __len__(self) -> int:
        return self.manifest.count

    def __getitem__(self, index: int) -> BurstSample:
        if not 0 <= index < len(self):
            raise IndexError(f"sample {index} outside dataset of {len(self)}")
        sample = read_sample(sample_dir(self.root, index), self.manifest.degradation.scale)
        sample.seed = sample_seed(self.manifest.seed, index)
        sample.metadata["index"] = index
        return sample

    def samples(self, indices: Optional[Sequence[int]] = None) -> List[BurstSample]:
        indices = range(len(self)) if indices is None else indices
        return [self[i] for i in indices]
