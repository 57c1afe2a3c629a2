"""
Tests for the tensor, tape, RNG and ".nt" format layer.
"""

import logging
import os
import shutil
import struct
import tempfile
import unittest

import numpy as np

from src import autodiff as ad
from src.autodiff import Tensor
from src.exceptions import BurstMambaError, NonFiniteError, ShapeError, TensorFormatError
from src.gradcheck import gradcheck
from src.rng import Rng, derive_seed, mix64
from src.tensor_io import decode_array, encode_array, load_tensor, save_tensor

logging.basicConfig(
    level=logging.INFO,
    format='%(asctime)s - %(name)s - %(levelname)s - %(message)s'
)
logger = logging.getLogger(__name__)


class TestPrimitives(unittest.TestCase):
    """Forward values and error reporting of the primitive set."""

    def setUp(self):
        self.rng = Rng(11, "test")

    def test_identity_cases(self):
        """Test exp(0), matmul with the identity and gather/scatter of a permutation."""
        logger.info("Testing primitive identity cases")
        self.assertEqual(ad.exp(Tensor(0.0)).item(), 1.0)

        m = self.rng.normal((3, 3))
        np.testing.assert_allclose(ad.matmul(np.eye(3), m).data, m.astype(np.float32))

        x = Tensor(self.rng.normal((6, 2)))
        perm = self.rng.permutation(6)
        back = ad.scatter_add(ad.gather(x, perm), perm, 6)
        np.testing.assert_array_equal(back.data, x.data)

    def test_shape_errors_name_operation(self):
        """Test that shape errors name the operation and both shapes."""
        logger.info("Testing shape error messages")
        with self.assertRaises(ShapeError) as ctx:
            ad.add(np.ones((2, 3)), np.ones((4, 3)))
        self.assertIn("add", str(ctx.exception))
        self.assertIn("(2, 3)", str(ctx.exception))
        self.assertIn("(4, 3)", str(ctx.exception))

        with self.assertRaises(ShapeError) as ctx:
            ad.matmul(np.ones((2, 3)), np.ones((2, 3)))
        self.assertIn("matmul", str(ctx.exception))

        with self.assertRaises(ShapeError):
            ad.conv2d(np.ones((1, 2, 5, 5)), np.ones((4, 3, 3, 3)))

    def test_non_finite_output_raises(self):
        """Test that overflow is reported instead of propagated."""
        logger.info("Testing non-finite detection")
        with self.assertRaises(NonFiniteError):
            ad.exp(Tensor([1000.0]))
        with self.assertRaises(NonFiniteError):
            ad.div(Tensor([1.0]), Tensor([0.0]))

    def test_zero_extent_rejected(self):
        with self.assertRaises(ShapeError):
            Tensor(np.zeros((0, 3)))

    def test_conv2d_matches_direct_loops(self):
        """Test im2col convolution against a direct 64-bit loop."""
        logger.info("Testing conv2d against loops")
        x = self.rng.normal((2, 3, 6, 5))
        w = self.rng.normal((4, 3, 3, 3))
        b = self.rng.normal(4)
        with ad.shadow_precision():
            out = ad.conv2d(x, w, b, stride=2, padding=1).data
        xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
        expected = np.zeros((2, 4, 3, 3))
        for i in range(3):
            for j in range(3):
                patch = xp[:, :, 2 * i:2 * i + 3, 2 * j:2 * j + 3]
                expected[:, :, i, j] = np.einsum("bchw,ochw->bo", patch, w) + b
        np.testing.assert_allclose(out, expected, rtol=1e-10, atol=1e-10)

    def test_gather_scatter_adjoint(self):
        """Test <gather(x, P), y> == <x, scatter_add(y, P)> with repeated indices."""
        logger.info("Testing gather/scatter adjointness")
        with ad.shadow_precision():
            x = self.rng.normal((7, 3))
            index = self.rng.integers(0, 7, 11)
            y = self.rng.normal((11, 3))
            lhs = float(np.sum(ad.gather(x, index).data * y))
            rhs = float(np.sum(x * ad.scatter_add(y, index, 7).data))
        self.assertAlmostEqual(lhs, rhs, delta=1e-6 * max(abs(lhs), 1.0))


class TestBackward(unittest.TestCase):
    """Tape-based reverse mode."""

    def setUp(self):
        ad.reset_tape()
        self.rng = Rng(5, "backward")

    def test_linear_and_quadratic_gradients(self):
        """Test the analytic examples: sum(x) and sum(x*x)."""
        logger.info("Testing analytic gradients")
        x = ad.parameter(self.rng.normal((2, 2)))
        ad.backward(ad.sum_(x))
        np.testing.assert_array_equal(x.grad, np.ones((2, 2)))

        y = ad.parameter([3.0])
        ad.backward(ad.sum_(y * y))
        np.testing.assert_allclose(y.grad, [6.0])

    def test_repeated_backward_accumulates(self):
        x = ad.parameter([1.0, 2.0])
        ad.backward(ad.sum_(x * 2.0))
        ad.backward(ad.sum_(x * 2.0))
        np.testing.assert_allclose(x.grad, [4.0, 4.0])
        x.zero_grad()
        self.assertIsNone(x.grad)

    def test_backward_errors(self):
        """Test non-scalar, detached and released-tape losses."""
        logger.info("Testing backward preconditions")
        x = ad.parameter(self.rng.normal(3))
        with self.assertRaises(ShapeError):
            ad.backward(x * 2.0)
        with self.assertRaises(BurstMambaError):
            ad.backward(ad.sum_(Tensor([1.0, 2.0])))
        loss = ad.sum_(x * x)
        ad.backward(loss)
        with self.assertRaises(BurstMambaError):
            ad.backward(loss)

    def test_no_grad_records_nothing(self):
        x = ad.parameter([1.0, 2.0])
        with ad.no_grad():
            y = ad.sum_(x * x)
        self.assertFalse(y.requires_grad)
        self.assertEqual(len(ad.current_tape()), 0)

    def test_float32_storage_with_64_bit_reductions(self):
        values = np.full(100000, 0.1, dtype=np.float32)
        total = ad.sum_(Tensor(values))
        self.assertEqual(total.dtype, np.float32)
        self.assertEqual(total.item(), float(np.float32(np.sum(values, dtype=np.float64))))

    def test_primitive_gradients_match_finite_differences(self):
        """Test every differentiable primitive on random 5-element inputs."""
        logger.info("Testing primitive gradients against central differences")
        a = ad.parameter(self.rng.uniform(5, -2.0, 2.0), name="a")
        b = ad.parameter(self.rng.uniform(5, 0.5, 2.0), name="b")
        m = ad.parameter(self.rng.uniform((5, 5), -2.0, 2.0), name="m")
        index = np.array([4, 0, 0, 2, 3, 1])
        cases = {
            "add_mul": lambda: ad.sum_((a + b) * a),
            "div": lambda: ad.sum_(a / b),
            "matmul": lambda: ad.sum_(ad.matmul(m, ad.reshape(a, (5, 1))) * 0.3),
            "exp": lambda: ad.sum_(ad.exp(a)),
            "softplus": lambda: ad.sum_(ad.softplus(a) * b),
            "sigmoid": lambda: ad.sum_(ad.sigmoid(a) * b),
            "silu": lambda: ad.sum_(ad.silu(a) * b),
            "mean": lambda: ad.mean(a * a * b),
            "pad_slice": lambda: ad.sum_(ad.pad(a, [(2, 1)])[1:6] * ad.pad(b, [(1, 2)])[2:7]),
            "reshape_transpose": lambda: ad.sum_(ad.transpose(ad.reshape(m, (25, 1)), (1, 0)) *
                                                 ad.reshape(ad.concat([a] * 5), (1, 25))),
            "gather": lambda: ad.sum_(ad.gather(a, index) * ad.gather(b, index[::-1].copy())),
            "scatter_add": lambda: ad.sum_(ad.scatter_add(ad.gather(a * b, index), index, 5) * a),
            "sqrt": lambda: ad.sum_(ad.sqrt(b) * a),
        }
        for name, loss_fn in cases.items():
            with self.subTest(primitive=name):
                result = gradcheck(loss_fn, [a, b, m])
                self.assertLess(result.max_rel_error, 1e-4, f"{name}: {result.per_tensor}")

    def test_conv2d_gradient(self):
        x = ad.parameter(self.rng.uniform((1, 2, 4, 5), -2.0, 2.0), name="x")
        w = ad.parameter(self.rng.uniform((3, 2, 3, 3), -2.0, 2.0), name="w")
        bias = ad.parameter(self.rng.uniform(3, -2.0, 2.0), name="bias")
        cotangent = self.rng.normal((1, 3, 2, 3))
        result = gradcheck(lambda: ad.sum_(ad.conv2d(x, w, bias, stride=2, padding=1) * cotangent), [x, w, bias])
        self.assertLess(result.max_rel_error, 1e-4)


class TestRng(unittest.TestCase):

    def test_same_seed_same_sequence(self):
        """Test that streams are reproducible and independent by name."""
        logger.info("Testing RNG determinism")
        first = Rng(42, "init").uniform(16)
        second = Rng(42, "init").uniform(16)
        np.testing.assert_array_equal(first, second)
        self.assertFalse(np.array_equal(first, Rng(42, "data").uniform(16)))
        self.assertNotEqual(derive_seed(1, "sample", 0), derive_seed(1, "sample", 1))

    def test_stream_matches_scalar_splitmix(self):
        rng = Rng(0, "default")
        expected = [mix64((rng.state + k * 0x9E3779B97F4A7C15) & ((1 << 64) - 1)) for k in (1, 2, 3)]
        self.assertEqual([int(v) for v in rng.next_u64(3)], expected)

    def test_integers_in_range(self):
        values = Rng(3).integers(2, 9, 1000)
        self.assertGreaterEqual(values.min(), 2)
        self.assertLess(values.max(), 9)


class TestTensorFormat(unittest.TestCase):
    """The ".nt" codec."""

    def setUp(self):
        self.tmp = tempfile.mkdtemp()
        self.rng = Rng(9, "nt")

    def tearDown(self):
        shutil.rmtree(self.tmp, ignore_errors=True)

    def test_round_trip_bit_exact(self):
        """Test save/load of a random (3, 4, 5) tensor and of a scalar."""
        logger.info("Testing .nt round trip")
        t = Tensor(self.rng.normal((3, 4, 5)))
        path = save_tensor(t, os.path.join(self.tmp, "t.nt"))
        self.assertEqual(load_tensor(path).data.tobytes(), t.data.tobytes())

        scalar = Tensor(np.float32(-2.5))
        path = save_tensor(scalar, os.path.join(self.tmp, "s.nt"))
        loaded = load_tensor(path)
        self.assertEqual(loaded.shape, ())
        self.assertEqual(loaded.item(), -2.5)

    def test_layout(self):
        blob = encode_array(np.arange(6, dtype=np.float32).reshape(2, 3))
        self.assertEqual(blob[:4], b"NT01")
        self.assertEqual(struct.unpack("<3I", blob[4:16]), (2, 2, 3))
        self.assertEqual(len(blob), 16 + 24)

    def test_parse_errors_carry_offsets(self):
        """Test truncated payload, bad magic, bad extent and trailing bytes."""
        logger.info("Testing .nt parse errors")
        blob = encode_array(self.rng.normal((3, 4)))
        with self.assertRaises(TensorFormatError) as ctx:
            decode_array(blob[:-5])
        self.assertIn("payload short: expected 48 bytes", str(ctx.exception))

        with self.assertRaises(TensorFormatError) as ctx:
            decode_array(b"XT01" + blob[4:])
        self.assertEqual(ctx.exception.offset, 0)

        bad_extent = b"NT01" + struct.pack("<3I", 2, 3, 0)
        with self.assertRaises(TensorFormatError) as ctx:
            decode_array(bad_extent)
        self.assertEqual(ctx.exception.offset, 12)

        with self.assertRaises(TensorFormatError):
            decode_array(blob + b"\x00")


if __name__ == "__main__":
    unittest.main()
