"""
Two-stage L1 training with AdamW, evaluation sweeps and experiment records.

Stage 1 trains the detached single-image path (head, spatial blocks,
upsampler). Stage 2 adds the temporal blocks and trains the whole model.
"""

import logging
import os
from dataclasses import asdict, dataclass, field, fields
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

import config
from src import __version__, build_id
from src import autodiff as ad
from src.autodiff import Tensor
from src.exceptions import NonFiniteError, ShapeError, TrainingAborted, ValidationError
from src.metrics import psnr, ssim
from src.model import BurstMambaModel, checkpoint_digest, forward, save_checkpoint
from src.report_generator import ReportGenerator
from src.rng import Rng
from src.synthetic_data import BurstDataset, BurstSample

logging.basicConfig(
    level=logging.INFO,
    format='%(asctime)s - %(name)s - %(levelname)s - %(message)s'
)
logger = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    stage1_steps: int = config.STAGE1_STEPS
    stage2_steps: int = config.STAGE2_STEPS
    batch_size: int = config.BATCH_SIZE
    burst_len: int = config.BURST_LEN
    learning_rate: float = config.LEARNING_RATE
    weight_decay: float = config.WEIGHT_DECAY
    betas: Tuple[float, float] = config.BETAS
    adam_eps: float = config.ADAM_EPS
    patch_stage1: int = config.PATCH_STAGE1
    patch_stage2: int = config.PATCH_STAGE2
    val_every: int = config.VAL_EVERY
    val_samples: int = config.VAL_SAMPLES
    checkpoint_every: int = config.CHECKPOINT_EVERY
    log_every: int = config.LOG_EVERY
    seed: int = field(default_factory=lambda: config.SEED)

    def __post_init__(self):
        self.betas = tuple(float(b) for b in self.betas)
        problems = []
        if self.stage1_steps < 0 or self.stage2_steps < 0:
            problems.append("stage steps must be >= 0")
        for name in ("batch_size", "burst_len", "patch_stage1", "patch_stage2", "val_every", "val_samples",
                     "checkpoint_every", "log_every"):
            if getattr(self, name) < 1:
                problems.append(f"{name} must be positive")
        if self.patch_stage1 % 2 or self.patch_stage2 % 2:
            problems.append(f"patch sizes must be even, got {self.patch_stage1} and {self.patch_stage2}")
        if self.learning_rate < 0 or self.weight_decay < 0 or self.adam_eps <= 0:
            problems.append("learning_rate and weight_decay must be >= 0, adam_eps > 0")
        if len(self.betas) != 2 or not all(0 <= b < 1 for b in self.betas):
            problems.append(f"betas must be two values in [0, 1), got {self.betas}")
        if problems:
            raise ValidationError("invalid train config: " + "; ".join(problems))

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data["betas"] = list(self.betas)
        return data

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ValidationError(f"unknown train config fields: {unknown}")
        return cls(**data)


@dataclass
class OptimizerState:
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def adamw_step(params: Sequence[Tuple[str, Tensor]], grads: Dict[str, Optional[np.ndarray]],
               state: OptimizerState, cfg: TrainConfig) -> OptimizerState:
    """
    One decoupled-weight-decay Adam update, computed in 64-bit.

    Args:
        params: (name, tensor) pairs to update in place
        grads: Gradient per name; a missing or None gradient counts as zero
        state: Moment buffers and step counter, updated in place
        cfg: Supplies learning_rate, betas, adam_eps and weight_decay

    Returns:
        The updated state
    """
    checked = {}
    for name, p in params:
        g = grads.get(name)
        g = np.zeros(p.shape) if g is None else np.asarray(g, dtype=np.float64)
        if g.shape != p.shape:
            raise ShapeError(f"adamw_step: gradient {g.shape} does not match parameter {name} {p.shape}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"adamw_step: non-finite gradient for parameter {name}")
        checked[name] = g

    state.step += 1
    beta1, beta2 = cfg.betas
    lr, eps, wd = cfg.learning_rate, cfg.adam_eps, cfg.weight_decay
    correction1 = 1.0 - beta1 ** state.step
    correction2 = 1.0 - beta2 ** state.step
    for name, p in params:
        g = checked[name]
        m = beta1 * state.m.get(name, np.zeros(p.shape)) + (1.0 - beta1) * g
        v = beta2 * state.v.get(name, np.zeros(p.shape)) + (1.0 - beta2) * g * g
        state.m[name], state.v[name] = m, v
        theta = p.data.astype(np.float64)
        theta = theta - lr * ((m / correction1) / (np.sqrt(v / correction2) + eps) + wd * theta)
        p.data = theta.astype(p.dtype)
    return state


def l1_loss(prediction: Tensor, target: Tensor) -> Tensor:
    return ad.mean(ad.abs_(prediction - target))


def stack_batch(samples: Sequence[BurstSample]) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    lr = np.stack([s.lr_burst for s in samples])
    hr = np.stack([s.hr_target for s in samples])
    flows = np.stack([s.flows_array() for s in samples])
    return lr, hr, flows


def predict(model: BurstMambaModel, sample: BurstSample, length: Optional[int] = None, detached: bool = False,
            zero_flows: bool = False) -> np.ndarray:
    """Clipped (3, 4H, 4W) prediction for one burst, without recording a tape."""
    burst = sample.truncated(length or sample.length)
    flows = None if zero_flows else burst.flows_array()
    with ad.no_grad():
        out = forward(burst.lr_burst, flows, model, detached=detached)
    return np.clip(out.data, 0.0, 1.0)


def evaluate_length(model: BurstMambaModel, samples: Sequence[BurstSample], length: int,
                    zero_flows: bool = False) -> Dict[str, Any]:
    """
    Mean PSNR/SSIM with bursts truncated to ``length``; 0 means detached keyframe-only.

    Returns:
        {"length", "psnr_db", "ssim", "samples": per-sample rows}
    """
    if not samples:
        raise ValidationError("evaluate: empty dataset")
    available = min(s.length for s in samples)
    if length > available:
        raise ValidationError(f"evaluate: length {length} exceeds the {available} frames available")
    if length < 0:
        raise ValidationError(f"evaluate: length must be >= 0, got {length}")
    rows = []
    for i, sample in enumerate(samples):
        pred = predict(model, sample, length=max(length, 1), detached=length == 0, zero_flows=zero_flows)
        rows.append({"sample": sample.metadata.get("index", i), "psnr_db": psnr(pred, sample.hr_target),
                     "ssim": ssim(pred, sample.hr_target)})
    return {
        "length": length,
        "psnr_db": float(np.mean([r["psnr_db"] for r in rows])),
        "ssim": float(np.mean([r["ssim"] for r in rows])),
        "samples": rows,
    }


def evaluate(model: BurstMambaModel, dataset: BurstDataset, lengths: Sequence[int],
             zero_flows: bool = False) -> List[Dict[str, Any]]:
    samples = dataset.samples()
    results = []
    for length in lengths:
        result = evaluate_length(model, samples, length, zero_flows=zero_flows)
        logger.info(f"L={length}: PSNR {result['psnr_db']:.3f} dB, SSIM {result['ssim']:.4f}")
        results.append(result)
    return results


@dataclass
class TrainResult:
    checkpoint: str
    metrics_path: str
    record_path: str
    digest: str
    rows: List[Dict[str, Any]]


class Trainer:
    """Class that runs the two-stage schedule on a generated dataset."""

    def __init__(self, model: BurstMambaModel, dataset: BurstDataset, train_config: Optional[TrainConfig] = None,
                 degradation: Optional[Dict[str, Any]] = None):
        """
        Initialize the trainer.

        Args:
            model: Model to train in place
            dataset: Training data; the last ``val_samples`` bursts form the validation set
            train_config: Schedule and optimizer settings
            degradation: Dataset degradation settings, copied into the experiment record
        """
        self.model = model
        self.dataset = dataset
        self.config = train_config or TrainConfig()
        self.degradation = degradation or dataset.manifest.degradation.to_dict()
        self.rng = Rng(self.config.seed, "data")

        samples = dataset.samples()
        val_count = min(self.config.val_samples, len(samples))
        self.val_samples = samples[len(samples) - val_count:]
        self.train_samples = samples[:len(samples) - val_count] or samples
        if min(s.length for s in samples) < 1:
            raise ValidationError("trainer: dataset has empty bursts")

    def _batch(self, patch: int) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        picks = self.rng.integers(0, len(self.train_samples), self.config.batch_size)
        crops = []
        for index in picks:
            sample = self.train_samples[int(index)]
            sample = sample.truncated(min(self.config.burst_len, sample.length))
            height, width = sample.lr_burst.shape[-2:]
            size = min(patch, height, width)
            top = int(self.rng.integers(0, height - size + 1))
            left = int(self.rng.integers(0, width - size + 1))
            if sample.lr_burst.shape[1] == 1:
                # keep the RGGB phase
                top, left = top - top % 2, left - left % 2
            crops.append(sample.crop(top, left, size))
        return stack_batch(crops)

    def _validate(self, detached: bool) -> Tuple[float, float]:
        length = 0 if detached else min(self.config.burst_len, min(s.length for s in self.val_samples))
        result = evaluate_length(self.model, self.val_samples, length)
        return result["psnr_db"], result["ssim"]

    def train(self, checkpoint_path: str) -> TrainResult:
        """
        Run stage 1 then stage 2 and write the checkpoint, metrics log and experiment record.

        Args:
            checkpoint_path: Checkpoint directory; it always holds the last good parameters

        Returns:
            TrainResult

        Raises:
            TrainingAborted: On a non-finite loss or gradient
        """
        cfg = self.config
        report = ReportGenerator(checkpoint_path)
        save_checkpoint(self.model, checkpoint_path)
        rows: List[Dict[str, Any]] = []
        total = cfg.stage1_steps + cfg.stage2_steps
        step = 0
        logger.info(f"Training {self.model.num_parameters()} parameters for {total} steps "
                    f"({cfg.stage1_steps} detached + {cfg.stage2_steps} full)")

        for stage, steps, patch in ((1, cfg.stage1_steps, cfg.patch_stage1), (2, cfg.stage2_steps, cfg.patch_stage2)):
            detached = stage == 1
            temporal = set(self.model.temporal_parameter_names())
            params = [(n, p) for n, p in self.model.named_parameters() if not (detached and n in temporal)]
            state = OptimizerState()
            for _ in range(steps):
                step += 1
                lr, hr, flows = self._batch(patch)
                try:
                    prediction = forward(lr, flows, self.model, detached=detached)
                    loss = l1_loss(prediction, Tensor(hr))
                    loss_value = loss.item()
                    if not np.isfinite(loss_value):
                        raise NonFiniteError(f"loss is {loss_value}")
                    ad.backward(loss)
                    adamw_step(params, {n: p.grad for n, p in params}, state, cfg)
                except NonFiniteError as e:
                    ad.reset_tape()
                    report.write_training_log(rows)
                    logger.error(f"Stage {stage} step {step}: {e}; last good checkpoint kept at {checkpoint_path}")
                    raise TrainingAborted(f"non-finite value at step {step}: {e}", checkpoint=checkpoint_path) from e
                finally:
                    self.model.zero_grad()
                self.model.constrain()

                row = {"step": step, "stage": stage, "loss": loss_value, "val_psnr_db": None, "val_ssim": None}
                if step % cfg.val_every == 0 or step == total:
                    row["val_psnr_db"], row["val_ssim"] = self._validate(detached)
                rows.append(row)
                if step % cfg.log_every == 0 or step == total:
                    logger.info(f"stage {stage} step {step}/{total}: loss {loss_value:.6f}")
                if step % cfg.checkpoint_every == 0:
                    save_checkpoint(self.model, checkpoint_path)

        save_checkpoint(self.model, checkpoint_path)
        digest = checkpoint_digest(checkpoint_path)
        metrics_path = report.write_training_log(rows)
        record_path = report.write_experiment_record(self.experiment_record(digest))
        logger.info(f"Training finished: checkpoint {checkpoint_path} (sha256 {digest[:16]})")
        return TrainResult(checkpoint_path, metrics_path, record_path, digest, rows)

    def experiment_record(self, digest: str) -> Dict[str, Any]:
        return {
            "build": build_id(),
            "version": __version__,
            "seed": self.config.seed,
            "model": self.model.config.to_dict(),
            "train": self.config.to_dict(),
            "degradation": self.degradation,
            "dataset": {"root": os.path.abspath(self.dataset.root), "manifest": self.dataset.manifest.to_dict()},
            "checkpoint_sha256": digest,
        }
