"""
Tests for the spatial, temporal and upsampling blocks.
"""

import logging
import unittest

import numpy as np
import pytest

from src import autodiff as ad
from src import network_blocks
from src.exceptions import ShapeError, ValidationError
from src.gradcheck import gradcheck
from src.layers import Module
from src.rng import Rng
from src.serialization import FlowMap, ofs_taps
from src.network_blocks import (
    ChannelAttention,
    SpatialBlock,
    TemporalBlock,
    Upsampler,
    channel_attention,
    pixel_shuffle,
    spatial_block_forward,
    temporal_block_forward,
    upsample_x4,
)

logging.basicConfig(
    level=logging.INFO,
    format='%(asctime)s - %(name)s - %(levelname)s - %(message)s'
)
logger = logging.getLogger(__name__)


def randomize(module: Module, rng: Rng, std: float = 0.4) -> None:
    """Replace every parameter except the state matrices with random values."""
    for name, p in module.named_parameters():
        if not name.endswith("a_diag"):
            p.data = (p.data + rng.child(name).normal(p.shape, std=std)).astype(p.dtype)


def softplus(x):
    return np.logaddexp(0.0, x)


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def layer_norm(x, w, prefix, eps=1e-5):
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * w[f"{prefix}.gamma"] + w[f"{prefix}.beta"]


def scan(x, w, prefix):
    """Selective scan of (B, L, D) tokens in a float64 loop."""
    batch, length, dim = x.shape
    a = w[f"{prefix}.a_diag"]
    h = np.zeros((batch, dim, a.size))
    y = np.zeros_like(x)
    for t in range(length):
        dt = softplus(x[:, t] @ w[f"{prefix}.dt_w"] + w[f"{prefix}.dt_b"])
        b = x[:, t] @ w[f"{prefix}.b_w"] + w[f"{prefix}.b_b"]
        c = x[:, t] @ w[f"{prefix}.c_w"] + w[f"{prefix}.c_b"]
        z = dt[..., None] * a
        h = np.exp(z) * h + np.expm1(z) / a * b[:, None, :] * x[:, t, :, None]
        y[:, t] = np.einsum("bdn,bn->bd", h, c) + w[f"{prefix}.d_skip"] * x[:, t]
    return y


def conv3(x, w, prefix, replicate=True):
    """3x3 stride-1 convolution of (N, C, H, W) with same-size output."""
    mode = "edge" if replicate else "constant"
    padded = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)), mode=mode)
    kernel = w[f"{prefix}.weight"]
    out = np.zeros((x.shape[0], kernel.shape[0]) + x.shape[2:])
    for i in range(x.shape[2]):
        for j in range(x.shape[3]):
            out[:, :, i, j] = np.einsum("nchw,ochw->no", padded[:, :, i:i + 3, j:j + 3], kernel)
    return out + w[f"{prefix}.bias"][None, :, None, None]


def attention_gate(x_last, w, prefix):
    """Channel attention on a channels-last (B, H, W, C) array."""
    pooled = x_last.mean(axis=(1, 2))
    hidden = pooled @ w[f"{prefix}.squeeze.weight"] + w[f"{prefix}.squeeze.bias"]
    hidden = hidden * sigmoid(hidden)
    scale = sigmoid(hidden @ w[f"{prefix}.excite.weight"] + w[f"{prefix}.excite.bias"])
    return x_last * scale[:, None, None, :]


def spatial_oracle(f, blk):
    w = {name: p.data.astype(np.float64) for name, p in blk.named_parameters()}
    batch, channels, height, width = f.shape
    x = f.transpose(0, 2, 3, 1)
    z = layer_norm(x, w, "norm") @ w["in_proj.weight"] + w["in_proj.bias"]
    rows = z.reshape(batch, height * width, channels)
    cols = z.transpose(0, 2, 1, 3).reshape(batch, height * width, channels)

    def path(i):
        return f"paths.{min(i, len(blk.paths) - 1)}"

    merged = scan(rows, w, path(0)).reshape(z.shape)
    merged += scan(rows[:, ::-1], w, path(1))[:, ::-1].reshape(z.shape)
    merged += scan(cols, w, path(2)).reshape(batch, width, height, channels).transpose(0, 2, 1, 3)
    merged += scan(cols[:, ::-1], w, path(3))[:, ::-1].reshape(batch, width, height, channels).transpose(0, 2, 1, 3)
    out = attention_gate(merged @ w["out_proj.weight"] + w["out_proj.bias"], w, "attention")
    return f + w["gain"] * out.transpose(0, 3, 1, 2)


def temporal_oracle(f, flows, blk):
    """Scan-only temporal block (no wavelet heads) on one (L, C, H, W) burst."""
    w = {name: p.data.astype(np.float64) for name, p in blk.named_parameters()}
    length, channels, height, width = f.shape
    taps = ofs_taps(flows, length, height, width)
    index, weights = taps.index[0], taps.weights[0]
    z = layer_norm(f.transpose(0, 2, 3, 1), w, "norm").reshape(length, height * width, channels)
    tokens = np.zeros((height * width, length, channels))
    for t in range(length):
        for k in range(4):
            tokens[:, t] += weights[t, :, k, None] * z[t, index[t, :, k]]
    merged = scan(tokens, w, "fwd_ssm") + scan(tokens[:, ::-1], w, "bwd_ssm")[:, ::-1]
    frames = np.zeros((length, height * width, channels))
    for t in range(length):
        for k in range(4):
            np.add.at(frames[t], index[t, :, k], weights[t, :, k, None] * merged[:, t])
    frames = frames.reshape(length, height, width, channels).transpose(0, 3, 1, 2)
    hidden = conv3(frames, w, "conv1")
    hidden = hidden * sigmoid(hidden)
    return f + w["gain"] * conv3(hidden, w, "conv2")


class TestChannelAttention(unittest.TestCase):

    def setUp(self):
        self.rng = Rng(3, "ca")

    def test_zero_weights_halve_input(self):
        """Test sigmoid(0) = 0.5 gating."""
        logger.info("Testing channel attention with zero weights")
        ca = ChannelAttention(8, self.rng, reduction=4)
        for p in ca.parameters():
            p.data = np.zeros_like(p.data)
        f = self.rng.normal((2, 8, 3, 5)).astype(np.float32)
        np.testing.assert_array_equal(channel_attention(f, ca).data, f / 2)

    def test_zeroed_channel_stays_zero(self):
        ca = ChannelAttention(8, self.rng, reduction=4)
        randomize(ca, self.rng)
        f = self.rng.normal((1, 8, 4, 4)).astype(np.float32)
        f[:, 5] = 0.0
        self.assertFalse(np.any(channel_attention(f, ca).data[:, 5]))

    def test_matches_float64_composition(self):
        ca = ChannelAttention(8, self.rng, reduction=4)
        randomize(ca, self.rng.child("w"))
        f = self.rng.normal((2, 8, 3, 4))
        with ad.shadow_precision():
            ca.astype(np.float64)
            out = channel_attention(f, ca).data
        w = {f"attention.{name}": p.data for name, p in ca.named_parameters()}
        expected = attention_gate(f.transpose(0, 2, 3, 1), w, "attention").transpose(0, 3, 1, 2)
        np.testing.assert_allclose(out, expected, rtol=1e-5, atol=1e-10)

    def test_reduction_must_divide_channels(self):
        with self.assertRaises(ValidationError):
            ChannelAttention(6, self.rng, reduction=4)


class TestSpatialBlock(unittest.TestCase):
    """Four-path 2D scan with channel attention."""

    @pytest.fixture(autouse=True)
    def _inject_mocker(self, mocker):
        self.mocker = mocker

    def setUp(self):
        ad.reset_tape()
        self.rng = Rng(6, "spatial-block")

    def make_block(self, channels=4, tie_paths=False, name="blk"):
        blk = SpatialBlock(channels, 3, self.rng.child(name), reduction=2, tie_paths=tie_paths)
        randomize(blk, self.rng.child(f"{name}-w"))
        return blk

    def test_zero_gain_is_identity(self):
        blk = self.make_block()
        blk.gain.data = np.zeros(1, dtype=np.float32)
        f = self.rng.normal((2, 4, 5, 3)).astype(np.float32)
        np.testing.assert_array_equal(spatial_block_forward(f, blk).data, f)

    def test_single_pixel_paths_agree(self):
        """Test that a 1x1 input gives four identical paths to the merger."""
        logger.info("Testing 1x1 spatial input")
        blk = self.make_block(tie_paths=True)
        spy = self.mocker.spy(network_blocks, "merge_paths")
        spatial_block_forward(self.rng.normal((1, 4, 1, 1)), blk)
        paths = spy.call_args[0][0]
        self.assertEqual(len(paths), 4)
        for other in paths[1:]:
            np.testing.assert_array_equal(other.data, paths[0].data)
        np.testing.assert_allclose(spy.spy_return.data, 4 * paths[0].data, rtol=1e-6)

    def test_matches_composition_oracle(self):
        """Test the block against norm/project/scan/merge/attention composed in float64."""
        logger.info("Testing spatial block against a float64 oracle")
        blk = self.make_block()
        f = self.rng.normal((2, 4, 5, 3))
        with ad.shadow_precision():
            blk.astype(np.float64)
            out = spatial_block_forward(f, blk).data
        np.testing.assert_allclose(out, spatial_oracle(f, blk), rtol=1e-5, atol=1e-8)

    def test_shape_contract(self):
        blk = self.make_block()
        for i in range(5):
            r = self.rng.child(f"shape{i}")
            shape = (int(r.integers(1, 3)), 4, int(r.integers(1, 7)), int(r.integers(1, 7)))
            self.assertEqual(spatial_block_forward(r.normal(shape), blk).shape, shape)
        with self.assertRaises(ShapeError):
            spatial_block_forward(np.ones((1, 3, 4, 4)), blk)

    def test_tied_paths_are_equivariant(self):
        """Test transpose and 180-degree rotation with one shared SsmParams."""
        logger.info("Testing spatial block equivariance")
        blk = self.make_block(tie_paths=True)
        self.assertEqual(len(blk.ssm_params()), 1)
        f = self.rng.normal((1, 4, 5, 3))
        with ad.shadow_precision():
            blk.astype(np.float64)
            base = spatial_block_forward(f, blk).data
            rotated = spatial_block_forward(np.ascontiguousarray(f[..., ::-1, ::-1]), blk).data
            transposed = spatial_block_forward(np.ascontiguousarray(f.transpose(0, 1, 3, 2)), blk).data
        np.testing.assert_allclose(rotated, base[..., ::-1, ::-1], rtol=1e-5, atol=1e-10)
        np.testing.assert_allclose(transposed, base.transpose(0, 1, 3, 2), rtol=1e-5, atol=1e-10)

    def test_gradients(self):
        blk = self.make_block()
        f = ad.parameter(self.rng.uniform((1, 4, 3, 3), -1.0, 1.0), name="f")
        cotangent = self.rng.normal((1, 4, 3, 3))
        result = gradcheck(lambda: ad.sum_(spatial_block_forward(f, blk) * cotangent), [f] + blk.parameters(),
                           max_entries=4)
        self.assertLess(result.max_rel_error, 1e-4, str(result.per_tensor))


class TestTemporalBlock(unittest.TestCase):
    """Bidirectional scan over flow-compensated per-pixel sequences."""

    def setUp(self):
        ad.reset_tape()
        self.rng = Rng(14, "temporal-block")

    def flows(self, length, height, width):
        out = [FlowMap.zeros(height, width)]
        for b in range(1, length):
            r = self.rng.child(f"flow{b}")
            out.append(FlowMap(r.uniform((height, width), -1.5, 1.5), r.uniform((height, width), -1.5, 1.5)))
        return out

    def test_matches_composition_oracle(self):
        """Test the scan-only block against a float64 oracle for L=1 and L=3."""
        logger.info("Testing temporal block against a float64 oracle")
        blk = TemporalBlock(3, 2, self.rng.child("blk"), psi_s6=False)
        randomize(blk, self.rng.child("w"), std=0.3)
        for length in (1, 3):
            f = self.rng.child(f"f{length}").normal((length, 3, 8, 8))
            flows = self.flows(length, 8, 8)
            with ad.shadow_precision():
                blk.astype(np.float64)
                out = temporal_block_forward(f, flows, blk).data
            with self.subTest(length=length):
                np.testing.assert_allclose(out, temporal_oracle(f, flows, blk), rtol=1e-5, atol=1e-8)

    def test_length_agnostic(self):
        """Test one instance on L in {1, 2, 5, 14}."""
        logger.info("Testing temporal block over several burst lengths")
        blk = TemporalBlock(2, 2, self.rng.child("blk"), psi_dim=2)
        count = blk.num_parameters()
        for length in (1, 2, 5, 14):
            f = self.rng.child(length).normal((length, 2, 4, 4))
            self.assertEqual(temporal_block_forward(f, self.flows(length, 4, 4), blk).shape, (length, 2, 4, 4))
        self.assertEqual(blk.num_parameters(), count)

    def test_constant_frames_stay_constant(self):
        blk = TemporalBlock(2, 2, self.rng.child("blk"), psi_dim=2)
        randomize(blk, self.rng.child("w"), std=0.2)
        f = np.broadcast_to(self.rng.normal((3, 2, 1, 1)), (3, 2, 4, 6)).astype(np.float32)
        out = temporal_block_forward(f, [FlowMap.zeros(4, 6)] * 3, blk).data
        spread = out - out[..., :1, :1]
        self.assertLess(np.max(np.abs(spread)), 1e-5)

    def test_flow_count_must_match(self):
        blk = TemporalBlock(2, 2, self.rng.child("blk"), psi_dim=2)
        with self.assertRaises(ShapeError):
            temporal_block_forward(np.ones((3, 2, 4, 4)), self.flows(2, 4, 4), blk)
        with self.assertRaises(ShapeError):
            temporal_block_forward(np.ones((3, 5, 4, 4)), self.flows(3, 4, 4), blk)

    def test_gradients_with_wavelet_heads(self):
        logger.info("Testing temporal block gradients")
        blk = TemporalBlock(2, 2, self.rng.child("blk"), psi_dim=2)
        randomize(blk, self.rng.child("w"), std=0.2)
        f = ad.parameter(self.rng.uniform((2, 2, 4, 4), -1.0, 1.0), name="f")
        flows = self.flows(2, 4, 4)
        cotangent = self.rng.normal((2, 2, 4, 4))
        result = gradcheck(lambda: ad.sum_(temporal_block_forward(f, flows, blk) * cotangent),
                           [f] + blk.parameters(), max_entries=3)
        self.assertLess(result.max_rel_error, 1e-4, str(result.per_tensor))


class TestUpsampler(unittest.TestCase):

    def setUp(self):
        self.rng = Rng(1, "up")

    def test_pixel_shuffle_tiling(self):
        """Test that constant channels (1, 2, 3, 4) tile as [[1, 2], [3, 4]]."""
        logger.info("Testing pixel shuffle tiling")
        x = np.broadcast_to(np.arange(1.0, 5.0)[None, :, None, None], (1, 4, 2, 3))
        out = pixel_shuffle(x, 2).data[0, 0]
        np.testing.assert_array_equal(out, np.tile([[1.0, 2.0], [3.0, 4.0]], (2, 3)))

    def test_pixel_shuffle_index_arithmetic(self):
        x = self.rng.normal((2, 12, 3, 2)).astype(np.float32)
        out = pixel_shuffle(x, 2).data
        expected = np.empty((2, 3, 6, 4), dtype=np.float32)
        for c in range(3):
            for i in range(2):
                for j in range(2):
                    expected[:, c, i::2, j::2] = x[:, c * 4 + 2 * i + j]
        np.testing.assert_array_equal(out, expected)
        with self.assertRaises(ShapeError):
            pixel_shuffle(np.ones((1, 6, 2, 2)), 2)

    def test_upsample_shapes_and_zero_input(self):
        up = Upsampler(4, self.rng)
        out = upsample_x4(np.zeros((1, 4, 3, 5)), up)
        self.assertEqual(out.shape, (1, 3, 12, 20))
        self.assertFalse(np.any(out.data))
        self.assertEqual(up(self.rng.normal((2, 4, 2, 2))).shape, (2, 3, 8, 8))


if __name__ == "__main__":
    unittest.main()
