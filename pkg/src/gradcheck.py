"""
Central finite-difference oracle for tape gradients.
"""

import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, Optional, Sequence

import numpy as np

from src import autodiff as ad
from src.autodiff import Tensor
from src.rng import Rng

logging.basicConfig(
    level=logging.INFO,
    format='%(asctime)s - %(name)s - %(levelname)s - %(message)s'
)
logger = logging.getLogger(__name__)

DEFAULT_STEP = 1e-3


@dataclass
class GradcheckResult:
    max_rel_error: float
    per_tensor: Dict[str, float] = field(default_factory=dict)
    entries_checked: int = 0

    def passed(self, tolerance: float = 1e-4) -> bool:
        return self.max_rel_error < tolerance


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Normwise ||a - n|| / max(||a||, ||n||), with a floor for all-zero gradients."""
    diff = np.linalg.norm(analytic - numeric)
    scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric), 1e-12)
    return float(diff / scale)


def gradcheck(loss_fn: Callable[[], Tensor], tensors: Sequence[Tensor], h: float = DEFAULT_STEP,
              max_entries: Optional[int] = None, seed: int = 0) -> GradcheckResult:
    """
    Compare tape gradients of ``loss_fn`` with central differences in 64-bit.

    Args:
        loss_fn: Closure that rebuilds the scalar loss from the current tensor values
        tensors: Leaves to differentiate against; they are promoted to float64 for
            the duration of the check and restored afterwards
        h: Finite-difference step
        max_entries: Per-tensor cap on perturbed entries; larger tensors are checked
            on a deterministic subset
        seed: Seed of the subset selection

    Returns:
        GradcheckResult with the worst normwise relative error
    """
    original = [(t.data, t.requires_grad, t.grad) for t in tensors]
    picker = Rng(seed, "gradcheck")
    result = GradcheckResult(max_rel_error=0.0)
    try:
        with ad.shadow_precision():
            for t in tensors:
                t.data = t.data.astype(np.float64)
                t.requires_grad = True
                t.grad = None
            loss = loss_fn()
            ad.backward(loss)
            analytic = [np.zeros(t.shape) if t.grad is None else np.array(t.grad, dtype=np.float64)
                        for t in tensors]

            for i, t in enumerate(tensors):
                flat = t.data.reshape(-1)
                index = np.arange(flat.size)
                if max_entries is not None and flat.size > max_entries:
                    index = np.sort(picker.child(i).permutation(flat.size)[:max_entries])
                numeric = np.empty(index.size)
                with ad.no_grad():
                    for k, j in enumerate(index):
                        saved = flat[j]
                        flat[j] = saved + h
                        plus = float(loss_fn().data)
                        flat[j] = saved - h
                        minus = float(loss_fn().data)
                        flat[j] = saved
                        numeric[k] = (plus - minus) / (2.0 * h)
                err = relative_error(analytic[i].reshape(-1)[index], numeric)
                label = t.name or f"tensor{i}"
                result.per_tensor[f"{i}:{label}"] = err
                result.max_rel_error = max(result.max_rel_error, err)
                result.entries_checked += index.size
    finally:
        ad.reset_tape()
        for t, (data, requires_grad, grad) in zip(tensors, original):
            t.data = data
            t.requires_grad = requires_grad
            t.grad = grad
    logger.debug(f"gradcheck over {result.entries_checked} entries: max rel err {result.max_rel_error:.3e}")
    return result
