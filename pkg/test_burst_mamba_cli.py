"""
End-to-end tests for the burst_mamba command line.
"""

import contextlib
import io
import json
import logging
import os
import shutil
import tempfile
import unittest

import numpy as np
import pytest

import burst_mamba
from src import autodiff as ad
from src.exceptions import (
    CheckpointError,
    ConfigMismatchError,
    NonFiniteError,
    ShapeError,
    TrainingAborted,
    ValidationError,
)
from src.image_io import read_ppm
from src.metrics import psnr
from src.model import BurstMambaModel, ModelConfig, checkpoint_digest, load_checkpoint
from src.selfcheck import run_selfcheck as real_selfcheck
from src.synthetic_data import read_sample, sample_dir
from src.tensor_io import load_array

logging.basicConfig(
    level=logging.INFO,
    format='%(asctime)s - %(name)s - %(levelname)s - %(message)s'
)
logger = logging.getLogger(__name__)

SMALL_MODEL = {"channels": 4, "stacks": 1, "state_dim": 2, "psi_dim": 2, "reduction": 2}
SMALL_TRAIN = {"batch_size": 1, "burst_len": 3, "patch_stage1": 4, "patch_stage2": 4,
               "val_every": 5, "val_samples": 1, "log_every": 5}


class CliTestCase(unittest.TestCase):
    """Temp workspace plus a helper that runs main() with the log file inside it."""

    @pytest.fixture(autouse=True)
    def _inject_mocker(self, mocker):
        self.mocker = mocker

    def setUp(self):
        ad.reset_tape()
        self.tmp = tempfile.mkdtemp()
        self.log_file = os.path.join(self.tmp, "run.log")

    def tearDown(self):
        root = logging.getLogger()
        for handler in root.handlers[:]:
            if isinstance(handler, logging.FileHandler):
                handler.close()
                root.removeHandler(handler)
        shutil.rmtree(self.tmp, ignore_errors=True)

    def path(self, *parts: str) -> str:
        return os.path.join(self.tmp, *parts)

    def run_cli(self, *argv: str) -> int:
        return burst_mamba.main(["--log-file", self.log_file, *argv])

    def gen_data(self, name: str = "data", *extra: str) -> str:
        out = self.path(name)
        code = self.run_cli("gen-data", "--out", out, "--count", "2", "--size", "8", "8", "--burst", "3",
                            "--seed", "4", *extra)
        self.assertEqual(code, burst_mamba.EXIT_OK)
        return out

    def write_config(self, model=None, train=None, name: str = "cfg.json") -> str:
        path = self.path(name)
        with open(path, "w") as f:
            json.dump({"model": dict(SMALL_MODEL, **(model or {})), "train": dict(SMALL_TRAIN, **(train or {}))}, f)
        return path

    def train(self, data: str, *extra: str, name: str = "ckpt") -> str:
        out = self.path(name)
        code = self.run_cli("train", "--data", data, "--out", out, "--config", self.write_config(), *extra)
        self.assertEqual(code, burst_mamba.EXIT_OK)
        return out


class TestGenDataAndTrain(CliTestCase):

    def test_gen_data_is_deterministic(self):
        """Test that two runs with the same seed write identical files, whatever the thread count."""
        logger.info("Testing gen-data determinism")
        first = self.gen_data("a")
        second = self.gen_data("b", "--workers", "2")
        for index in range(2):
            for name in ("lr_burst.nt", "hr.nt", "flow_01.nt"):
                with open(os.path.join(sample_dir(first, index), name), "rb") as f:
                    expected = f.read()
                with open(os.path.join(sample_dir(second, index), name), "rb") as f:
                    self.assertEqual(f.read(), expected, f"sample {index} {name}")
        self.assertTrue(os.path.isfile(self.log_file))

    def test_gen_data_rejects_odd_size(self):
        code = self.run_cli("gen-data", "--out", self.path("odd"), "--size", "15", "16")
        self.assertEqual(code, burst_mamba.EXIT_USAGE)

    def test_smoke_training(self):
        """Test 10 + 10 steps on two bursts: metrics rows, checkpoint and record."""
        logger.info("Testing CLI training")
        data = self.gen_data()
        ckpt = self.train(data, "--stage1", "10", "--stage2", "10")
        with open(os.path.join(ckpt, "metrics.csv")) as f:
            lines = f.read().splitlines()
        self.assertEqual(lines[0], "step,stage,loss,val_psnr_db,val_ssim")
        self.assertEqual(len(lines), 21)
        self.assertEqual([line.split(",")[1] for line in lines[1:]], ["1"] * 10 + ["2"] * 10)
        with open(os.path.join(ckpt, "experiment.json")) as f:
            record = json.load(f)
        self.assertEqual(record["train"]["stage1_steps"], 10)
        self.assertEqual(load_checkpoint(ckpt).config.channels, 4)

    def test_stage_one_only(self):
        """Test that --stage2 0 leaves every temporal parameter at its initial value."""
        data = self.gen_data()
        ckpt = self.train(data, "--stage1", "3", "--stage2", "0")
        with open(os.path.join(ckpt, "metrics.csv")) as f:
            rows = f.read().splitlines()[1:]
        self.assertEqual([row.split(",")[1] for row in rows], ["1", "1", "1"])
        trained = load_checkpoint(ckpt).state_dict()
        initial = BurstMambaModel(ModelConfig.from_dict(SMALL_MODEL)).state_dict()
        for name in initial:
            if name.startswith("temporal."):
                np.testing.assert_array_equal(trained[name], initial[name], err_msg=name)

    def test_rerun_gives_identical_checkpoint(self):
        data = self.gen_data()
        first = self.train(data, "--stage1", "2", "--stage2", "2", name="first")
        second = self.train(data, "--stage1", "2", "--stage2", "2", name="second")
        self.assertEqual(checkpoint_digest(first), checkpoint_digest(second))

    def test_zero_shift_gives_zero_flows(self):
        data = self.gen_data("still", "--shift-max", "0")
        for index in range(2):
            sample = read_sample(sample_dir(data, index))
            for flow in sample.flows:
                self.assertTrue(flow.is_zero())

    def test_mosaicked_dataset_switches_input_mode(self):
        data = self.gen_data("raw", "--mosaic")
        ckpt = self.train(data, "--stage1", "1", "--stage2", "1")
        self.assertEqual(load_checkpoint(ckpt).config.input_mode, "rggb1")

    def test_missing_or_empty_dataset(self):
        """Test usage errors for a directory without a manifest and a zero-count manifest."""
        code = self.run_cli("train", "--data", self.path("nowhere"), "--out", self.path("ckpt"))
        self.assertEqual(code, burst_mamba.EXIT_USAGE)
        data = self.gen_data()
        manifest_path = os.path.join(data, "manifest.json")
        with open(manifest_path) as f:
            manifest = json.load(f)
        manifest["count"] = 0
        with open(manifest_path, "w") as f:
            json.dump(manifest, f)
        code = self.run_cli("train", "--data", data, "--out", self.path("ckpt"), "--config", self.write_config())
        self.assertEqual(code, burst_mamba.EXIT_USAGE)

    def test_unknown_config_section(self):
        data = self.gen_data()
        path = self.path("bad.json")
        with open(path, "w") as f:
            json.dump({"model": SMALL_MODEL, "optimizer": {}}, f)
        code = self.run_cli("train", "--data", data, "--out", self.path("ckpt"), "--config", path)
        self.assertEqual(code, burst_mamba.EXIT_USAGE)

    def test_non_finite_loss_exits_numerical(self):
        logger.info("Testing the numerical exit code")
        data = self.gen_data()
        self.mocker.patch("src.trainer.l1_loss", return_value=ad.Tensor(np.nan))
        code = self.run_cli("train", "--data", data, "--out", self.path("ckpt"), "--config", self.write_config(),
                            "--stage1", "2", "--stage2", "0")
        self.assertEqual(code, burst_mamba.EXIT_NUMERICAL)


class TestInferAndEval(CliTestCase):

    def setUp(self):
        super().setUp()
        self.data = self.gen_data()
        self.ckpt = self.train(self.data, "--stage1", "1", "--stage2", "1")

    def test_infer_writes_image_and_tensor(self):
        """Test the PPM, the raw tensor and the comparison reports."""
        logger.info("Testing CLI inference")
        out = self.path("out", "pred.ppm")
        os.makedirs(os.path.dirname(out))
        code = self.run_cli("infer", "--ckpt", self.ckpt, "--burst", sample_dir(self.data, 0), "--out", out,
                            "--compare-length", "2")
        self.assertEqual(code, burst_mamba.EXIT_OK)
        raw = load_array(self.path("out", "pred.nt"))
        self.assertEqual(raw.shape, (3, 32, 32))
        self.assertTrue(np.all((raw >= 0.0) & (raw <= 1.0)))
        self.assertEqual(read_ppm(out).shape, (3, 32, 32))
        for stem in ("pred_vs_L2", "pred_vs_detached"):
            self.assertTrue(os.path.isfile(self.path("out", f"{stem}.ppm")), stem)
            self.assertTrue(os.path.isfile(self.path("out", f"{stem}.txt")), stem)

    def test_detached_infer_uses_keyframe_only(self):
        first, second = self.path("a.ppm"), self.path("b.ppm")
        self.assertEqual(self.run_cli("infer", "--ckpt", self.ckpt, "--burst", sample_dir(self.data, 0),
                                      "--out", first, "--detached"), 0)
        self.assertEqual(self.run_cli("infer", "--ckpt", self.ckpt, "--burst", sample_dir(self.data, 0),
                                      "--out", second, "--detached", "--length", "1"), 0)
        np.testing.assert_array_equal(load_array(self.path("a.nt")), load_array(self.path("b.nt")))

    def test_infer_config_mismatch_and_corruption(self):
        """Test that a mismatched expected config and a damaged tensor are usage errors."""
        out = self.path("x.ppm")
        mismatched = self.write_config(model={"channels": 8}, name="wide.json")
        code = self.run_cli("infer", "--ckpt", self.ckpt, "--burst", sample_dir(self.data, 0), "--out", out,
                            "--config", mismatched)
        self.assertEqual(code, burst_mamba.EXIT_USAGE)
        with open(os.path.join(self.ckpt, "tensors", "head.weight.nt"), "wb") as f:
            f.write(b"NT01garbage")
        code = self.run_cli("infer", "--ckpt", self.ckpt, "--burst", sample_dir(self.data, 0), "--out", out)
        self.assertEqual(code, burst_mamba.EXIT_USAGE)
        self.assertFalse(os.path.exists(out))

    def test_eval_sweep_csv(self):
        logger.info("Testing CLI evaluation")
        out = self.path("eval.csv")
        code = self.run_cli("eval", "--ckpt", self.ckpt, "--data", self.data, "--lengths", "0,1,3", "--out", out,
                            "--zero-flows")
        self.assertEqual(code, burst_mamba.EXIT_OK)
        with open(out) as f:
            lines = f.read().splitlines()
        self.assertEqual(lines[0], "length,psnr_db,ssim")
        self.assertEqual([line.split(",")[0] for line in lines[1:]], ["0", "1", "3"])

    def test_eval_writes_per_sample_metrics(self):
        """Test one sample,psnr_db,ssim file per length with a row per burst."""
        logger.info("Testing per-sample evaluation CSVs")
        out = self.path("eval.csv")
        self.assertEqual(self.run_cli("eval", "--ckpt", self.ckpt, "--data", self.data, "--lengths", "0,3",
                                      "--out", out), 0)
        with open(out) as f:
            means = {line.split(",")[0]: float(line.split(",")[1]) for line in f.read().splitlines()[1:]}
        for length in ("0", "3"):
            with open(self.path(f"eval_samples_L{length}.csv")) as f:
                lines = f.read().splitlines()
            self.assertEqual(lines[0], "sample,psnr_db,ssim")
            self.assertEqual([line.split(",")[0] for line in lines[1:]], ["0", "1"])
            per_sample = [float(line.split(",")[1]) for line in lines[1:]]
            self.assertAlmostEqual(float(np.mean(per_sample)), means[length], places=5)

    def test_eval_length_beyond_burst(self):
        code = self.run_cli("eval", "--ckpt", self.ckpt, "--data", self.data, "--out", self.path("eval.csv"))
        self.assertEqual(code, burst_mamba.EXIT_USAGE)

    def test_eval_agrees_with_infer(self):
        """Test that a single-length sweep equals the mean PSNR of infer outputs."""
        out = self.path("eval.csv")
        self.assertEqual(self.run_cli("eval", "--ckpt", self.ckpt, "--data", self.data, "--lengths", "3",
                                      "--out", out), 0)
        with open(out) as f:
            swept = float(f.read().splitlines()[1].split(",")[1])
        values = []
        for index in range(2):
            ppm = self.path(f"pred{index}.ppm")
            self.assertEqual(self.run_cli("infer", "--ckpt", self.ckpt, "--burst", sample_dir(self.data, index),
                                          "--out", ppm), 0)
            target = read_sample(sample_dir(self.data, index)).hr_target
            values.append(psnr(load_array(self.path(f"pred{index}.nt")), target))
        self.assertAlmostEqual(swept, float(np.mean(values)), places=5)

    def test_missing_tensor_is_named_in_log(self):
        os.remove(os.path.join(self.ckpt, "tensors", "upsampler.to_rgb.bias.nt"))
        code = self.run_cli("infer", "--ckpt", self.ckpt, "--burst", sample_dir(self.data, 0),
                            "--out", self.path("x.ppm"))
        self.assertEqual(code, burst_mamba.EXIT_USAGE)
        with open(self.log_file) as f:
            self.assertIn("missing tensor: upsampler.to_rgb.bias", f.read())


class TestBenchSelfcheckAndParsing(CliTestCase):

    def test_bench_single_repetition_is_flagged(self):
        logger.info("Testing CLI bench")
        out = self.path("bench.csv")
        code = self.run_cli("bench", "--lengths", "16,32", "--reps", "1", "--channels", "2", "--out", out)
        self.assertEqual(code, burst_mamba.EXIT_OK)
        with open(out) as f:
            lines = f.read().splitlines()
        self.assertEqual(lines[0], "kernel,length,median_us")
        self.assertEqual(len(lines), 6)
        self.assertEqual(lines[-1], "# noisy: single repetition")

    def test_bench_rejects_zero_reps(self):
        code = self.run_cli("bench", "--lengths", "16", "--reps", "0", "--out", self.path("bench.csv"))
        self.assertEqual(code, burst_mamba.EXIT_USAGE)

    def test_selfcheck_exit_codes(self):
        """Test exit 0 on a passing check and exit 1 when the ZOH series region is widened."""
        logger.info("Testing CLI selfcheck")
        self.mocker.patch.object(burst_mamba, "run_selfcheck",
                                 side_effect=lambda seed: real_selfcheck(seed, names=["zoh discretization"]))
        printed = self.mocker.patch("builtins.print")
        self.assertEqual(self.run_cli("selfcheck"), burst_mamba.EXIT_OK)
        self.assertIn("PASS", printed.call_args[0][0])

        self.mocker.patch("src.ssm_kernels.ZOH_SERIES_THRESHOLD", 10.0)
        self.assertEqual(self.run_cli("selfcheck", "--seed", "1"), burst_mamba.EXIT_RUNTIME)
        self.assertIn("FAIL", printed.call_args[0][0])
        self.assertTrue(printed.call_args[0][0].endswith("0 passed, 1 failed"))

    def test_version_and_bad_arguments(self):
        stdout, stderr = io.StringIO(), io.StringIO()
        with contextlib.redirect_stdout(stdout), contextlib.redirect_stderr(stderr):
            self.assertEqual(burst_mamba.main(["--version"]), 0)
            self.assertEqual(burst_mamba.main(["--log-file", self.log_file, "bench", "--frobnicate"]), 2)
            self.assertEqual(burst_mamba.main([]), 2)
        self.assertTrue(stdout.getvalue().startswith("burstmamba-"))
        self.assertEqual(burst_mamba.int_list("1, 2,8"), [1, 2, 8])

    def test_exit_code_mapping(self):
        self.assertEqual(burst_mamba.exit_code_for(TrainingAborted("nan", "ckpt")), 3)
        self.assertEqual(burst_mamba.exit_code_for(NonFiniteError("nan")), 3)
        for error in (ValidationError("x"), ShapeError("x"), CheckpointError("x"), ConfigMismatchError(["a"])):
            self.assertEqual(burst_mamba.exit_code_for(error), 2, type(error).__name__)
        self.assertEqual(burst_mamba.exit_code_for(OSError("disk")), 1)


if __name__ == "__main__":
    unittest.main()
