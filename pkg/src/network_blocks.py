"""
Network blocks: spatial SSM block with channel attention, temporal SSM block
over flow-serialized bursts, and the x4 pixel-shuffle upsampler.

Feature maps are channel-first: (B, C, H, W) for single frames and
(B, L, C, H, W) for bursts.
"""

import logging
from typing import List, Optional, Tuple

import numpy as np

import config
from src import autodiff as ad
from src.autodiff import Tensor, TensorLike
from src.exceptions import ShapeError, ValidationError
from src.layers import Conv2d, LayerNorm, Linear, Module
from src.rng import Rng
from src.serialization import (SPATIAL_ORDERS, FlowInput, OfsTaps, deserialize_2d, merge_paths, ofs_sample,
                               ofs_scatter, resolve_taps, reverse_time, serialize_2d)
from src.ssm_kernels import SsmParams, selective_scan
from src.wavelet_psi import PsiHead, psi_selective_scan

logging.basicConfig(
    level=logging.INFO,
    format='%(asctime)s - %(name)s - %(levelname)s - %(message)s'
)
logger = logging.getLogger(__name__)


def channels_last(f: Tensor) -> Tensor:
    axes = tuple(range(f.ndim - 3)) + (f.ndim - 2, f.ndim - 1, f.ndim - 3)
    return ad.transpose(f, axes)


def channels_first(f: Tensor) -> Tensor:
    axes = tuple(range(f.ndim - 3)) + (f.ndim - 1, f.ndim - 3, f.ndim - 2)
    return ad.transpose(f, axes)


class ChannelAttention(Module):
    """Squeeze (global average) -> Linear C/r -> SiLU -> Linear C -> sigmoid gate."""

    def __init__(self, channels: int, rng: Rng, reduction: Optional[int] = None):
        reduction = reduction or config.REDUCTION
        if channels % reduction:
            raise ValidationError(f"channel_attention: {channels} channels not divisible by reduction {reduction}")
        self.squeeze = Linear(channels, channels // reduction, rng.child("squeeze"))
        self.excite = Linear(channels // reduction, channels, rng.child("excite"))

    def __call__(self, f: Tensor) -> Tensor:
        return channel_attention(f, self)


def channel_attention(f: TensorLike, ca: ChannelAttention) -> Tensor:
    f = ad.as_tensor(f)
    if f.ndim != 4 or f.shape[1] != ca.squeeze.in_features:
        raise ShapeError(f"channel_attention: expected (B, {ca.squeeze.in_features}, H, W), got {f.shape}")
    pooled = ad.mean(f, axis=(2, 3))
    scale = ad.sigmoid(ca.excite(ad.silu(ca.squeeze(pooled))))
    return f * ad.reshape(scale, scale.shape + (1, 1))


class SpatialBlock(Module):
    """
    Four-path 2D selective scan over the keyframe features.

    With ``tie_paths`` one SsmParams instance serves all four scan orders.
    """

    def __init__(self, channels: int, state_dim: int, rng: Rng, reduction: Optional[int] = None,
                 d_skip: Optional[bool] = None, tie_paths: bool = False, scan_method: str = "parallel"):
        self.channels = channels
        self.scan_method = scan_method
        self.norm = LayerNorm(channels)
        self.in_proj = Linear(channels, channels, rng.child("in_proj"))
        count = 1 if tie_paths else len(SPATIAL_ORDERS)
        self.paths = [SsmParams(channels, state_dim, rng.child(f"path{i}"), d_skip=d_skip) for i in range(count)]
        self.out_proj = Linear(channels, channels, rng.child("out_proj"))
        self.attention = ChannelAttention(channels, rng.child("attention"), reduction)
        self.gain = ad.parameter(np.ones(1), name="gain")

    def path_params(self, i: int) -> SsmParams:
        return self.paths[min(i, len(self.paths) - 1)]

    def ssm_params(self) -> List[SsmParams]:
        return list(self.paths)

    def __call__(self, f: Tensor) -> Tensor:
        return spatial_block_forward(f, self)


def spatial_block_forward(f: TensorLike, blk: SpatialBlock) -> Tensor:
    """norm -> project -> 4 serialized scans -> merge -> project -> channel attention -> residual."""
    f = ad.as_tensor(f)
    if f.ndim != 4 or f.shape[1] != blk.channels:
        raise ShapeError(f"spatial_block: expected (B, {blk.channels}, H, W), got {f.shape}")
    height, width = f.shape[2:]
    z = channels_first(blk.in_proj(blk.norm(channels_last(f))))
    outputs = []
    for i, order in enumerate(SPATIAL_ORDERS):
        seq = ad.transpose(serialize_2d(z, order), (0, 2, 1))
        y = selective_scan(seq, blk.path_params(i), method=blk.scan_method)
        outputs.append(deserialize_2d(ad.transpose(y, (0, 2, 1)), order, height, width))
    merged = merge_paths(outputs)
    out = blk.attention(channels_first(blk.out_proj(channels_last(merged))))
    return f + blk.gain * out


class TemporalBlock(Module):
    """Bidirectional scan over per-pixel flow-compensated sequences, then two 3x3 convs per frame."""

    def __init__(self, channels: int, state_dim: int, rng: Rng, psi_dim: Optional[int] = None,
                 d_skip: Optional[bool] = None, psi_s6: Optional[bool] = None, scan_method: str = "parallel"):
        psi_s6 = config.PSI_S6 if psi_s6 is None else psi_s6
        self.channels = channels
        self.scan_method = scan_method
        self.norm = LayerNorm(channels)
        self.fwd_ssm = SsmParams(channels, state_dim, rng.child("fwd_ssm"), d_skip=d_skip)
        self.bwd_ssm = SsmParams(channels, state_dim, rng.child("bwd_ssm"), d_skip=d_skip)
        self.fwd_head = PsiHead(channels, state_dim, rng.child("fwd_head"), psi_dim) if psi_s6 else None
        self.bwd_head = PsiHead(channels, state_dim, rng.child("bwd_head"), psi_dim) if psi_s6 else None
        self.conv1 = Conv2d(channels, channels, 3, rng.child("conv1"), padding_mode="replicate")
        self.conv2 = Conv2d(channels, channels, 3, rng.child("conv2"), padding_mode="replicate")
        self.gain = ad.parameter(np.ones(1), name="gain")

    @property
    def psi_s6(self) -> bool:
        return self.fwd_head is not None

    def ssm_params(self) -> List[SsmParams]:
        return [self.fwd_ssm, self.bwd_ssm]

    def __call__(self, f: Tensor, taps: OfsTaps) -> Tuple[Tensor, Tensor]:
        return temporal_block_apply(f, taps, self)


def _direction(tokens: Tensor, frames: Tensor, taps: OfsTaps, ssm: SsmParams, head: Optional[PsiHead],
               reverse: bool, method: str) -> Tensor:
    if head is not None:
        return psi_selective_scan(tokens, frames, head, ssm, taps=taps, reverse=reverse, method=method)
    if reverse:
        return reverse_time(selective_scan(reverse_time(tokens), ssm, method=method))
    return selective_scan(tokens, ssm, method=method)


def temporal_block_apply(f: TensorLike, taps: OfsTaps, blk: TemporalBlock) -> Tuple[Tensor, Tensor]:
    """
    Run one temporal block with precomputed sampling taps.

    Args:
        f: Burst features (B, L, C, H, W)
        taps: OFS taps for this burst
        blk: TemporalBlock

    Returns:
        (f + r, r) where r is the gated residual; r is exactly zero when the gain is zero
    """
    f = ad.as_tensor(f)
    if f.ndim != 5 or f.shape[2] != blk.channels:
        raise ShapeError(f"temporal_block: expected (B, L, {blk.channels}, H, W), got {f.shape}")
    batch, length, channels, height, width = f.shape
    z = channels_first(blk.norm(channels_last(f)))
    tokens = ofs_sample(z, taps)
    forward = _direction(tokens, z, taps, blk.fwd_ssm, blk.fwd_head, False, blk.scan_method)
    backward = _direction(tokens, z, taps, blk.bwd_ssm, blk.bwd_head, True, blk.scan_method)
    frames = ofs_scatter(merge_paths([forward, backward]), taps)
    frames = ad.reshape(frames, (batch * length, channels, height, width))
    conv = blk.conv2(ad.silu(blk.conv1(frames)))
    residual = blk.gain * ad.reshape(conv, f.shape)
    return f + residual, residual


def temporal_block_forward(f: TensorLike, flows: Optional[FlowInput], blk: TemporalBlock,
                           alignment: str = "ofs") -> Tensor:
    """Temporal block on a (L, C, H, W) or (B, L, C, H, W) burst with per-frame flows."""
    f = ad.as_tensor(f)
    single = f.ndim == 4
    if single:
        f = ad.reshape(f, (1,) + f.shape)
    if f.ndim != 5:
        raise ShapeError(f"temporal_block: expected (L, C, H, W) burst, got {f.shape}")
    batch, length, _, height, width = f.shape
    taps = resolve_taps(flows, alignment, batch, length, height, width)
    out, _ = temporal_block_apply(f, taps, blk)
    return ad.reshape(out, out.shape[1:]) if single else out


def pixel_shuffle(x: TensorLike, r: int = 2) -> Tensor:
    """(B, C r^2, H, W) -> (B, C, H r, W r); channel c r^2 + r i + j lands at offset (i, j)."""
    x = ad.as_tensor(x)
    batch, channels, height, width = x.shape
    if channels % (r * r):
        raise ShapeError(f"pixel_shuffle: {channels} channels not divisible by {r * r}")
    out_channels = channels // (r * r)
    x = ad.reshape(x, (batch, out_channels, r, r, height, width))
    x = ad.transpose(x, (0, 1, 4, 2, 5, 3))
    return ad.reshape(x, (batch, out_channels, height * r, width * r))


class Upsampler(Module):
    """Two (conv C -> 4C, pixel shuffle x2) stages, then a conv to RGB."""

    def __init__(self, channels: int, rng: Rng, out_channels: int = 3):
        self.stages = [Conv2d(channels, 4 * channels, 3, rng.child(f"stage{i}")) for i in range(2)]
        self.to_rgb = Conv2d(channels, out_channels, 3, rng.child("to_rgb"))

    def __call__(self, f: Tensor) -> Tensor:
        return upsample_x4(f, self)


def upsample_x4(f: TensorLike, up: Upsampler) -> Tensor:
    f = ad.as_tensor(f)
    for conv in up.stages:
        f = pixel_shuffle(conv(f), 2)
    return up.to_rgb(f)
