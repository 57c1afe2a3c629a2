"""
Single-level orthonormal Haar transform and the wavelet-conditioned scan head.

Over each 2x2 cell [[a, b], [c, d]]:
    LL = (a+b+c+d)/2, LH = (a-b+c-d)/2, HL = (a+b-c-d)/2, HH = (a-b-c+d)/2
"""

import logging
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

import config
from src import autodiff as ad
from src.autodiff import Tensor, TensorLike
from src.exceptions import ShapeError, ValidationError
from src.layers import Conv2d, Linear, Module
from src.rng import Rng
from src.serialization import OfsTaps, identity_taps, ofs_sample, reverse_time
from src.ssm_kernels import SsmParams, selective_scan_core

logging.basicConfig(
    level=logging.INFO,
    format='%(asctime)s - %(name)s - %(levelname)s - %(message)s'
)
logger = logging.getLogger(__name__)


@dataclass
class WaveletFeatures:
    ll: Tensor
    lh: Tensor
    hl: Tensor
    hh: Tensor

    def stacked(self) -> Tensor:
        """Subbands concatenated on the channel axis: (..., 4C, H/2, W/2)."""
        return ad.concat([self.ll, self.lh, self.hl, self.hh], axis=-3)

    def energy(self) -> float:
        return float(sum(np.sum(np.square(b.data, dtype=np.float64)) for b in (self.ll, self.lh, self.hl, self.hh)))


def _check_even(f: Tensor) -> None:
    if f.ndim < 3:
        raise ShapeError(f"dwt_haar: expected (..., C, H, W), got {f.shape}")
    height, width = f.shape[-2:]
    if height % 2 or width % 2:
        raise ValidationError(f"even extents required, got {height}x{width}")


def dwt_haar(f: TensorLike) -> WaveletFeatures:
    f = ad.as_tensor(f)
    _check_even(f)
    a = f[..., 0::2, 0::2]
    b = f[..., 0::2, 1::2]
    c = f[..., 1::2, 0::2]
    d = f[..., 1::2, 1::2]
    return WaveletFeatures(
        ll=(a + b + c + d) * 0.5,
        lh=(a - b + c - d) * 0.5,
        hl=(a + b - c - d) * 0.5,
        hh=(a - b - c + d) * 0.5,
    )


def idwt_haar(w: WaveletFeatures) -> Tensor:
    shapes = {w.ll.shape, w.lh.shape, w.hl.shape, w.hh.shape}
    if len(shapes) != 1:
        raise ShapeError(f"idwt_haar: subband shapes differ: {sorted(shapes)}")
    ll, lh, hl, hh = w.ll, w.lh, w.hl, w.hh
    a = (ll + lh + hl + hh) * 0.5
    b = (ll - lh + hl - hh) * 0.5
    c = (ll + lh - hl - hh) * 0.5
    d = (ll - lh - hl + hh) * 0.5
    lead, (height, width) = ll.shape[:-2], ll.shape[-2:]
    top = ad.reshape(ad.stack([a, b], axis=-1), lead + (height, 2 * width))
    bottom = ad.reshape(ad.stack([c, d], axis=-1), lead + (height, 2 * width))
    return ad.reshape(ad.stack([top, bottom], axis=-2), lead + (2 * height, 2 * width))


def replicate_2x2(x: Tensor) -> Tensor:
    """Nearest 2x upsampling of the last two axes."""
    lead, (height, width) = x.shape[:-2], x.shape[-2:]
    x = ad.reshape(x, lead + (height, 1, width, 1))
    x = ad.broadcast_to(x, lead + (height, 2, width, 2))
    return ad.reshape(x, lead + (2 * height, 2 * width))


class PsiHead(Module):
    """reduce_conv (4C -> d_psi, 3x3) followed by param_linear (d_psi -> D + 2N)."""

    def __init__(self, channels: int, state_dim: int, rng: Rng, psi_dim: Optional[int] = None):
        psi_dim = psi_dim or config.PSI_DIM
        self.channels = channels
        self.state_dim = state_dim
        self.reduce_conv = Conv2d(4 * channels, psi_dim, 3, rng.child("reduce_conv"), padding_mode="replicate")
        self.param_linear = Linear(psi_dim, channels + 2 * state_dim, rng.child("param_linear"))

    @property
    def out_dim(self) -> int:
        return self.channels + 2 * self.state_dim


@dataclass
class PsiParams:
    """Per-token (delta, B, C) fields, each (frames, K, H, W)."""

    delta: Tensor
    b: Tensor
    c: Tensor


def psi_fields(f: TensorLike, head: PsiHead) -> Tensor:
    """
    Parameter fields of every token, computed from the frame's wavelet features.

    Args:
        f: Frames (F, C, H, W) in their native view, H and W even
        head: PsiHead with matching channel count

    Returns:
        (F, D + 2N, H, W): channels [0, D) are softplus step sizes, then B, then C
    """
    f = ad.as_tensor(f)
    if f.ndim != 4 or f.shape[1] != head.channels:
        raise ShapeError(f"psi_params: expected (F, {head.channels}, H, W) frames, got {f.shape}")
    reduced = head.reduce_conv(dwt_haar(f).stacked())
    tokens = ad.transpose(replicate_2x2(reduced), (0, 2, 3, 1))
    logits = ad.transpose(head.param_linear(tokens), (0, 3, 1, 2))
    d = head.channels
    delta = ad.softplus(logits[:, :d])
    return ad.concat([delta, logits[:, d:]], axis=1)


def split_fields(fields: Tensor, channels: int, state_dim: int, axis: int = 1) -> Tuple[Tensor, Tensor, Tensor]:
    index = [slice(None)] * fields.ndim
    parts = []
    for lo, hi in ((0, channels), (channels, channels + state_dim), (channels + state_dim, channels + 2 * state_dim)):
        index[axis] = slice(lo, hi)
        parts.append(fields[tuple(index)])
    return tuple(parts)


def psi_params(f: TensorLike, head: PsiHead) -> PsiParams:
    delta, b, c = split_fields(psi_fields(f, head), head.channels, head.state_dim)
    return PsiParams(delta=delta, b=b, c=c)


def psi_selective_scan(x_seq: TensorLike, f_maps: TensorLike, head: PsiHead, ssm: SsmParams,
                       taps: Optional[OfsTaps] = None, reverse: bool = False,
                       method: str = "sequential") -> Tensor:
    """
    Selective scan whose (delta, B, C) come from wavelet fields instead of the tokens.

    Args:
        x_seq: Tokens (P, L, D) as produced by OFS sampling with ``taps``
        f_maps: Frames (B, L, C, H, W) the fields are computed from
        head: PsiHead for this scan direction
        ssm: SsmParams supplying A and the skip gain
        taps: Sampling taps shared with the tokens; identity (linear temporal order) when None
        reverse: Traverse each sequence from the last frame to the first
        method: Recurrence evaluation method

    Returns:
        (P, L, D) outputs in forward time order
    """
    x_seq, f_maps = ad.as_tensor(x_seq), ad.as_tensor(f_maps)
    if f_maps.ndim != 5:
        raise ShapeError(f"psi_selective_scan: expected (B, L, C, H, W) frames, got {f_maps.shape}")
    batch, length, channels, height, width = f_maps.shape
    if x_seq.shape != (batch * height * width, length, ssm.d_model):
        raise ShapeError(f"psi_selective_scan: tokens {x_seq.shape} do not match frames {f_maps.shape}")
    if taps is None:
        taps = identity_taps(batch, length, height, width)
    fields = psi_fields(ad.reshape(f_maps, (batch * length, channels, height, width)), head)
    fields = ad.reshape(fields, (batch, length, head.out_dim, height, width))
    field_tokens = ofs_sample(fields, taps)
    delta, b, c = split_fields(field_tokens, head.channels, head.state_dim, axis=2)
    if reverse:
        x_seq, delta, b, c = (reverse_time(t) for t in (x_seq, delta, b, c))
    y = selective_scan_core(x_seq, delta, b, c, ssm.a_diag, ssm.d_skip, method)
    return reverse_time(y) if reverse else y
