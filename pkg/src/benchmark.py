"""
Wall-clock comparison of the selective scan against quadratic self-attention.
"""

import logging
import time
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

import config
from src import autodiff as ad
from src.exceptions import ValidationError
from src.rng import Rng
from src.ssm_kernels import SsmParams, selective_scan

logging.basicConfig(
    level=logging.INFO,
    format='%(asctime)s - %(name)s - %(levelname)s - %(message)s'
)
logger = logging.getLogger(__name__)

ATTENTION_BLOCK_ROWS = 1024


def naive_attention(x: np.ndarray, block_rows: int = ATTENTION_BLOCK_ROWS) -> np.ndarray:
    """
    Full softmax(x x^T / sqrt(D)) x over an (L, D) sequence.

    Rows are processed in blocks so memory stays O(block x L); the work is still O(L^2 D).
    """
    length, dim = x.shape
    out = np.empty_like(x)
    scale = 1.0 / np.sqrt(dim)
    for start in range(0, length, block_rows):
        scores = (x[start:start + block_rows] @ x.T) * scale
        scores -= scores.max(axis=1, keepdims=True)
        np.exp(scores, out=scores)
        scores /= scores.sum(axis=1, keepdims=True)
        out[start:start + block_rows] = scores @ x
    return out


def time_call(fn: Callable[[], object], reps: int) -> float:
    """Median wall time of ``fn`` in microseconds over ``reps`` calls (after one warm-up)."""
    fn()
    samples = []
    for _ in range(reps):
        start = time.perf_counter()
        fn()
        samples.append(time.perf_counter() - start)
    return float(np.median(samples)) * 1e6


def run_benchmark(lengths: Optional[Sequence[int]] = None, reps: Optional[int] = None,
                  channels: Optional[int] = None, state_dim: Optional[int] = None,
                  seed: Optional[int] = None) -> List[Dict[str, object]]:
    """
    Time both kernels at every length.

    Args:
        lengths: Sequence lengths
        reps: Timed repetitions per (kernel, length); 1 is allowed but noisy
        channels: Token width D
        state_dim: SSM state size N
        seed: Seed for the inputs and parameters

    Returns:
        Rows {"kernel", "length", "median_us"} ordered by kernel then length
    """
    lengths = list(lengths or config.BENCH_LENGTHS)
    reps = config.BENCH_REPS if reps is None else reps
    channels = channels or config.BENCH_CHANNELS
    state_dim = state_dim or config.STATE_DIM
    seed = config.SEED if seed is None else seed
    if reps < 1 or not lengths or min(lengths) < 1:
        raise ValidationError(f"bench: reps must be >= 1 and lengths positive, got reps={reps}, lengths={lengths}")

    rng = Rng(seed, "bench")
    params = SsmParams(channels, state_dim, rng.child("params"))
    inputs = {n: rng.child(n).normal((n, channels)).astype(np.float32) for n in lengths}

    def scan(n: int) -> Callable[[], object]:
        def call():
            with ad.no_grad():
                return selective_scan(inputs[n], params, method="sequential")
        return call

    rows = []
    for kernel, make in (("selective_scan", scan), ("attention", lambda n: lambda: naive_attention(inputs[n]))):
        for n in lengths:
            median = time_call(make(n), reps)
            logger.info(f"{kernel} L={n}: median {median:.1f} us over {reps} reps")
            rows.append({"kernel": kernel, "length": n, "median_us": median})
    for kernel in ("selective_scan", "attention"):
        ratios = doubling_ratios(rows, kernel)
        if ratios:
            logger.info(f"{kernel} time ratios between consecutive lengths: "
                        f"{', '.join(f'{r:.2f}' for r in ratios)}")
    return rows


def doubling_ratios(rows: Sequence[Dict[str, object]], kernel: str) -> List[float]:
    """Time ratios between consecutive lengths of one kernel."""
    times = [float(r["median_us"]) for r in sorted((r for r in rows if r["kernel"] == kernel),
                                                   key=lambda r: r["length"])]
    return [b / a for a, b in zip(times, times[1:])]
