"""
BurstMamba model assembly and checkpoint archives.

Shallow conv head -> K stacks of (temporal block, keyframe residual, spatial
block) -> x4 upsampler. Frame 0 is the keyframe.
"""

import hashlib
import json
import logging
import os
from dataclasses import asdict, dataclass, field, fields
from typing import Any, Dict, List, Optional

import numpy as np

import config
from src import autodiff as ad
from src.autodiff import Tensor, TensorLike
from src.exceptions import CheckpointError, ConfigMismatchError, TensorFormatError, ValidationError
from src.layers import Conv2d, Module
from src.network_blocks import SpatialBlock, TemporalBlock, Upsampler
from src.rng import Rng
from src.serialization import FlowInput, prealign_burst, resolve_taps
from src.ssm_kernels import SCAN_METHODS, SsmParams
from src.tensor_io import load_array, save_array

logging.basicConfig(
    level=logging.INFO,
    format='%(asctime)s - %(name)s - %(levelname)s - %(message)s'
)
logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "burstmamba-checkpoint/1"
MANIFEST_NAME = "manifest.json"
TENSOR_DIR = "tensors"
INPUT_MODES = {"rgb3": 3, "rggb1": 1}
ALIGNMENTS = ("ofs", "ofs_integer", "none", "prealign")


@dataclass
class ModelConfig:
    channels: int = config.CHANNELS
    stacks: int = config.STACKS
    state_dim: int = config.STATE_DIM
    scale: int = config.SCALE
    input_mode: str = config.INPUT_MODE
    d_skip: bool = config.D_SKIP
    reduction: int = config.REDUCTION
    psi_dim: int = config.PSI_DIM
    alignment: str = config.ALIGNMENT
    psi_s6: bool = config.PSI_S6
    scan_method: str = "parallel"
    tie_spatial_paths: bool = False
    seed: int = field(default_factory=lambda: config.SEED)

    def __post_init__(self):
        problems = []
        if self.scale != 4:
            problems.append(f"scale must be 4, got {self.scale}")
        if self.stacks < 1:
            problems.append(f"stacks must be >= 1, got {self.stacks}")
        if self.channels < 1 or self.state_dim < 1 or self.psi_dim < 1 or self.reduction < 1:
            problems.append("channels, state_dim, psi_dim and reduction must be positive")
        elif self.channels % self.reduction:
            problems.append(f"channels {self.channels} not divisible by reduction {self.reduction}")
        if self.input_mode not in INPUT_MODES:
            problems.append(f"input_mode must be one of {sorted(INPUT_MODES)}, got {self.input_mode!r}")
        if self.alignment not in ALIGNMENTS:
            problems.append(f"alignment must be one of {ALIGNMENTS}, got {self.alignment!r}")
        if self.scan_method not in SCAN_METHODS:
            problems.append(f"scan_method must be one of {SCAN_METHODS}, got {self.scan_method!r}")
        if problems:
            raise ValidationError("invalid model config: " + "; ".join(problems))

    @property
    def in_channels(self) -> int:
        return INPUT_MODES[self.input_mode]

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ValidationError(f"unknown model config fields: {unknown}")
        return cls(**data)

    def mismatches(self, other: "ModelConfig") -> List[str]:
        """Fields that differ, phrased relative to an archive (self) and a requested config (other)."""
        out = []
        for f in fields(self):
            mine, theirs = getattr(self, f.name), getattr(other, f.name)
            if mine != theirs:
                out.append(f"{f.name}: archive {mine} ≠ config {theirs}")
        return out


class BurstMambaModel(Module):
    """Two-branch burst super-resolution network; parameter count does not depend on burst length."""

    def __init__(self, model_config: Optional[ModelConfig] = None):
        self.config = model_config or ModelConfig()
        cfg = self.config
        rng = Rng(cfg.seed, "init")
        self.head = Conv2d(cfg.in_channels, cfg.channels, 3, rng.child("head"))
        self.temporal = [
            TemporalBlock(cfg.channels, cfg.state_dim, rng.child(f"temporal{k}"), psi_dim=cfg.psi_dim,
                          d_skip=cfg.d_skip, psi_s6=cfg.psi_s6, scan_method=cfg.scan_method)
            for k in range(cfg.stacks)
        ]
        self.spatial = [
            SpatialBlock(cfg.channels, cfg.state_dim, rng.child(f"spatial{k}"), reduction=cfg.reduction,
                         d_skip=cfg.d_skip, tie_paths=cfg.tie_spatial_paths, scan_method=cfg.scan_method)
            for k in range(cfg.stacks)
        ]
        self.upsampler = Upsampler(cfg.channels, rng.child("upsampler"))
        logger.debug(f"Built BurstMamba with {self.num_parameters()} parameters")

    def temporal_parameter_names(self) -> List[str]:
        return [name for name, _ in self.named_parameters() if name.startswith("temporal.")]

    def spatial_path_parameters(self) -> List[Tensor]:
        """Everything except the temporal blocks: the detached single-image path."""
        return [p for name, p in self.named_parameters() if not name.startswith("temporal.")]

    def constrain(self) -> None:
        for module in self.modules():
            if isinstance(module, SsmParams):
                module.constrain()

    def __call__(self, burst: TensorLike, flows: Optional[FlowInput] = None, detached: bool = False) -> Tensor:
        return forward(burst, flows, self, detached=detached)


def forward(burst: TensorLike, flows: Optional[FlowInput], model: BurstMambaModel, detached: bool = False) -> Tensor:
    """
    Super-resolve the keyframe of a burst.

    Args:
        burst: (L, c_in, H, W) or (B, L, c_in, H, W) frames, keyframe first
        flows: Per-frame flow maps toward the keyframe, or None for zero flow
        model: BurstMambaModel
        detached: Skip the temporal branch and consume only frame 0

    Returns:
        (3, 4H, 4W) or (B, 3, 4H, 4W) prediction
    """
    cfg = model.config
    shape = np.shape(burst.data if isinstance(burst, Tensor) else burst)
    if len(shape) not in (4, 5):
        raise ValidationError(f"forward: expected (L, c_in, H, W) or (B, L, c_in, H, W) burst, got {shape}")
    if shape[-4] == 0:
        raise ValidationError("forward: empty burst (L = 0)")
    if shape[-3] != cfg.in_channels:
        raise ValidationError(f"forward: burst has {shape[-3]} channels, input_mode {cfg.input_mode} "
                              f"expects {cfg.in_channels}")
    single = len(shape) == 4
    if cfg.alignment == "prealign" and not detached and flows is not None:
        data = burst.data if isinstance(burst, Tensor) else np.asarray(burst)
        burst = prealign_burst(data, flows)
        flows = None
    burst = ad.as_tensor(burst)
    if single:
        burst = ad.reshape(burst, (1,) + burst.shape)
    batch, length, c_in, height, width = burst.shape

    keyframe = ad.reshape(burst[:, 0], (batch, c_in, height, width))
    s = model.head(keyframe)
    if detached:
        if length > 1:
            logger.warning(f"Detached forward ignores frames 1..{length - 1} of the burst")
        for block in model.spatial:
            s = block(s)
    else:
        feats = model.head(ad.reshape(burst, (batch * length, c_in, height, width)))
        feats = ad.reshape(feats, (batch, length, cfg.channels, height, width))
        taps = resolve_taps(flows, cfg.alignment, batch, length, height, width)
        for temporal, spatial in zip(model.temporal, model.spatial):
            feats, residual = temporal(feats, taps)
            s = s + ad.reshape(residual[:, 0], s.shape)
            s = spatial(s)
    out = model.upsampler(s)
    return ad.reshape(out, out.shape[1:]) if single else out


def save_checkpoint(model: BurstMambaModel, path: str) -> str:
    """
    Write a checkpoint directory: manifest.json plus one ".nt" file per parameter.

    Args:
        model: Model to store
        path: Target directory (created if needed)

    Returns:
        The checkpoint directory
    """
    tensor_dir = os.path.join(path, TENSOR_DIR)
    os.makedirs(tensor_dir, exist_ok=True)
    shapes = {}
    for name, p in model.named_parameters():
        save_array(p.data, os.path.join(tensor_dir, f"{name}.nt"))
        shapes[name] = list(p.shape)
    manifest = {"format": CHECKPOINT_FORMAT, "config": model.config.to_dict(), "tensors": shapes}
    with open(os.path.join(path, MANIFEST_NAME), "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
    logger.info(f"Saved checkpoint with {len(shapes)} tensors to {path}")
    return path


def read_manifest(path: str) -> Dict[str, Any]:
    manifest_path = os.path.join(path, MANIFEST_NAME)
    if not os.path.isfile(manifest_path):
        raise CheckpointError(f"not a checkpoint: {manifest_path} missing")
    try:
        with open(manifest_path, "r", encoding="utf-8") as f:
            manifest = json.load(f)
    except json.JSONDecodeError as e:
        raise CheckpointError(f"corrupt manifest {manifest_path}: {e}") from e
    if manifest.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"unsupported checkpoint format {manifest.get('format')!r}")
    return manifest


def load_checkpoint(path: str, expected: Optional[ModelConfig] = None) -> BurstMambaModel:
    """
    Rebuild a model from a checkpoint directory.

    Args:
        path: Checkpoint directory
        expected: Configuration the caller intends to use; any differing field is an error

    Returns:
        BurstMambaModel with every parameter restored bitwise
    """
    manifest = read_manifest(path)
    archived = ModelConfig.from_dict(manifest["config"])
    if expected is not None:
        mismatches = archived.mismatches(expected)
        if mismatches:
            raise ConfigMismatchError(mismatches)
    model = BurstMambaModel(archived)
    listed = manifest.get("tensors", {})
    state = {}
    for name, p in model.named_parameters():
        tensor_path = os.path.join(path, TENSOR_DIR, f"{name}.nt")
        if name not in listed or not os.path.isfile(tensor_path):
            raise CheckpointError(f"missing tensor: {name}")
        try:
            state[name] = load_array(tensor_path)
        except TensorFormatError as e:
            raise CheckpointError(f"corrupt tensor {name}: {e}") from e
        if list(state[name].shape) != list(listed[name]):
            raise CheckpointError(f"{name}: file shape {state[name].shape} != manifest shape {listed[name]}")
    model.load_state_dict(state)
    logger.info(f"Loaded checkpoint {path} ({len(state)} tensors)")
    return model


def checkpoint_digest(path: str) -> str:
    """sha256 over the manifest and every tensor file, in sorted order."""
    digest = hashlib.sha256()
    with open(os.path.join(path, MANIFEST_NAME), "rb") as f:
        digest.update(f.read())
    tensor_dir = os.path.join(path, TENSOR_DIR)
    for name in sorted(os.listdir(tensor_dir)):
        digest.update(name.encode("utf-8"))
        with open(os.path.join(tensor_dir, name), "rb") as f:
            digest.update(f.read())
    return digest.hexdigest()
