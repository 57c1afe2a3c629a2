"""
Invariant suite behind the ``selfcheck`` command.

Every check builds its own seeded inputs and returns a CheckResult; the suite
never raises for a failed invariant, only for a crash inside a check, which is
itself reported as a failure.
"""

import logging
import os
import tempfile
import time
from dataclasses import dataclass
from decimal import Decimal, getcontext
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from src import autodiff as ad
from src import ssm_kernels
from src.gradcheck import gradcheck
from src.model import BurstMambaModel, ModelConfig, forward
from src.rng import Rng
from src.serialization import (
    FlowMap,
    ofs_scatter,
    ofs_serialize,
    time_serialize,
)
from src.ssm_kernels import SsmParams, discretize_zoh, scan_convolutional, scan_recurrent, selective_scan
from src.tensor_io import decode_array, encode_array
from src.wavelet_psi import dwt_haar, idwt_haar

logging.basicConfig(
    level=logging.INFO,
    format='%(asctime)s - %(name)s - %(levelname)s - %(message)s'
)
logger = logging.getLogger(__name__)

SCAN_INSTANCES = 100
WAVELET_INSTANCES = 100
MODEL_GRAD_ENTRIES = 6


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str
    seconds: float = 0.0


def _max_rel(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-12))


def check_scan_equivalence(seed: int) -> Tuple[bool, str]:
    """Recurrent vs convolutional form, and sequential vs parallel selective scan."""
    rng = Rng(seed, "selfcheck/scan")
    worst_conv = worst_par = 0.0
    with ad.shadow_precision(), ad.no_grad():
        for i in range(SCAN_INSTANCES):
            r = rng.child(i)
            length = int(r.integers(1, 65))
            dim = int(r.integers(1, 9))
            state = int(r.integers(1, 17))
            x = r.normal((2, length, dim))
            lti = SsmParams(dim, state, r.child("lti"), time_invariant=True)
            worst_conv = max(worst_conv, _max_rel(scan_recurrent(x, lti).data, scan_convolutional(x, lti).data))
            s6 = SsmParams(dim, state, r.child("s6"))
            worst_par = max(worst_par, _max_rel(selective_scan(x, s6, method="parallel").data,
                                                selective_scan(x, s6, method="sequential").data))
    ok = worst_conv < 1e-5 and worst_par < 1e-5
    return ok, f"recurrent/conv {worst_conv:.2e}, sequential/parallel {worst_par:.2e}"


def zoh_reference(a: float, dt: float, digits: int = 50) -> Tuple[Decimal, Decimal]:
    """exp(dt a) and (exp(dt a) - 1) / a in extended precision."""
    getcontext().prec = digits
    z = Decimal(dt) * Decimal(a)
    e = z.exp()
    return e, (e - 1) / Decimal(a)


def check_zoh(seed: int) -> Tuple[bool, str]:
    worst = 0.0
    for dt in np.logspace(-6, 0, 13):
        for a in -np.logspace(-8, 1, 19):
            a_bar, b_bar = discretize_zoh(float(a), 1.0, float(dt))
            ref_a, ref_b = zoh_reference(float(a), float(dt))
            worst = max(worst, abs(a_bar - float(ref_a)) / float(ref_a),
                        abs(b_bar - float(ref_b)) / abs(float(ref_b)))
    return worst < 1e-10, f"max rel error {worst:.2e} (series below |dt a| = {ssm_kernels.ZOH_SERIES_THRESHOLD:g})"


def check_wavelet(seed: int) -> Tuple[bool, str]:
    rng = Rng(seed, "selfcheck/wavelet")
    worst_recon = worst_energy = 0.0
    with ad.shadow_precision(), ad.no_grad():
        for i in range(WAVELET_INSTANCES):
            r = rng.child(i)
            height, width = 2 * int(r.integers(1, 9)), 2 * int(r.integers(1, 9))
            f = r.uniform((3, height, width), -1.0, 1.0)
            w = dwt_haar(f)
            worst_recon = max(worst_recon, float(np.max(np.abs(idwt_haar(w).data - f))))
            energy = float(np.sum(f * f))
            worst_energy = max(worst_energy, abs(w.energy() - energy) / energy)
    return worst_recon < 1e-6 and worst_energy < 1e-5, \
        f"reconstruction {worst_recon:.2e}, energy {worst_energy:.2e}"


def check_ofs(seed: int) -> Tuple[bool, str]:
    """Zero-flow reduction, affine exactness and the sample/scatter adjoint identity."""
    rng = Rng(seed, "selfcheck/ofs")
    length, channels, height, width = 4, 3, 8, 10
    burst = rng.child("burst").normal((1, length, channels, height, width)).astype(np.float32)
    zero = [FlowMap.zeros(height, width) for _ in range(length)]
    with ad.no_grad():
        tokens, _ = ofs_serialize(burst, zero)
        bitwise = np.array_equal(tokens.data, time_serialize(burst).data)

    with ad.shadow_precision(), ad.no_grad():
        ys, xs = np.mgrid[0:height, 0:width].astype(np.float64)
        alpha, beta, gamma = 0.3, -0.2, 0.7
        plane = np.broadcast_to(alpha * xs + beta * ys + gamma, (1, length, 1, height, width)).copy()
        shifts = rng.child("shifts").uniform((length, 2), -0.9, 0.9)
        shifts[0] = 0.0
        flows = [FlowMap.constant(du, dv, height, width) for du, dv in shifts]
        sampled, taps = ofs_serialize(plane, flows)
        sampled = sampled.data.reshape(height, width, length)
        inner = (slice(1, height - 1), slice(1, width - 1))
        expected = np.stack([alpha * (xs - du) + beta * (ys - dv) + gamma for du, dv in shifts], axis=-1)
        affine = float(np.max(np.abs(sampled[inner] - expected[inner])))

        x = rng.child("x").normal((1, length, channels, height, width))
        y = rng.child("y").normal((height * width, length, channels))
        signed = [FlowMap(rng.child(f"du{b}").uniform((height, width), -2.5, 2.5) * (b > 0),
                          rng.child(f"dv{b}").uniform((height, width), -2.5, 2.5) * (b > 0)) for b in range(length)]
        forward_tokens, taps = ofs_serialize(x, signed)
        lhs = float(np.sum(forward_tokens.data * y))
        rhs = float(np.sum(x * ofs_scatter(y, taps).data))
        adjoint = abs(lhs - rhs) / max(abs(lhs), 1e-12)
    ok = bitwise and affine < 1e-5 and adjoint < 1e-5
    return ok, f"zero-flow bitwise {bitwise}, affine {affine:.2e}, adjoint {adjoint:.2e}"


def toy_config(seed: int) -> ModelConfig:
    return ModelConfig(channels=4, stacks=1, state_dim=2, psi_dim=2, reduction=2, seed=seed)


def check_gradients(seed: int) -> Tuple[bool, str]:
    """Finite differences on a selective scan and on the full toy model."""
    rng = Rng(seed, "selfcheck/grad")
    with ad.shadow_precision():
        params = SsmParams(2, 3, rng.child("ssm"))
    x = ad.parameter(rng.child("x").uniform((5, 2), -2.0, 2.0), name="x")
    weights = rng.child("w").normal((5, 2))
    scan_result = gradcheck(lambda: ad.sum_(selective_scan(x, params) * weights),
                            [x] + params.parameters())

    model = BurstMambaModel(toy_config(seed))
    burst = ad.parameter(rng.child("burst").uniform((3, 3, 4, 4)), name="burst")
    flows = np.zeros((3, 2, 4, 4))
    flows[1:] = rng.child("flows").uniform((2, 2, 1, 1), -0.8, 0.8)
    cotangent = rng.child("cotangent").normal((3, 16, 16))
    model_result = gradcheck(lambda: ad.sum_(forward(burst, flows, model) * cotangent),
                             [burst] + model.parameters(), max_entries=MODEL_GRAD_ENTRIES, seed=seed)
    worst = max(scan_result.max_rel_error, model_result.max_rel_error)
    return worst < 1e-4, (f"selective scan {scan_result.max_rel_error:.2e}, "
                          f"toy model {model_result.max_rel_error:.2e} over {model_result.entries_checked} entries")


def check_detached(seed: int) -> Tuple[bool, str]:
    """Detached output ignores every non-key frame."""
    rng = Rng(seed, "selfcheck/detached")
    model = BurstMambaModel(toy_config(seed))
    first = rng.child("a").uniform((3, 3, 6, 6)).astype(np.float32)
    second = rng.child("b").uniform((3, 3, 6, 6)).astype(np.float32)
    second[0] = first[0]
    with ad.no_grad():
        a = forward(first, None, model, detached=True).data
        b = forward(second, None, model, detached=True).data
        single = forward(first[:1], None, model, detached=True).data
    ok = np.array_equal(a, b) and np.array_equal(a, single)
    return ok, f"bitwise equal across bursts {np.array_equal(a, b)}, vs L=1 {np.array_equal(a, single)}"


def check_tensor_format(seed: int) -> Tuple[bool, str]:
    rng = Rng(seed, "selfcheck/nt")
    array = rng.normal((3, 4, 5)).astype(np.float32)
    scalar = np.array(1.25, dtype=np.float32)
    ok = all(np.array_equal(decode_array(encode_array(a)), a) for a in (array, scalar))
    with tempfile.TemporaryDirectory() as tmp:
        path = os.path.join(tmp, "roundtrip.nt")
        with open(path, "wb") as f:
            f.write(encode_array(array))
        with open(path, "rb") as f:
            ok = ok and decode_array(f.read()).tobytes() == array.tobytes()
    return ok, "bit-exact round trip" if ok else "round trip changed data"


CHECKS: List[Tuple[str, Callable[[int], Tuple[bool, str]]]] = [
    ("scan equivalence", check_scan_equivalence),
    ("zoh discretization", check_zoh),
    ("haar reconstruction", check_wavelet),
    ("ofs identities", check_ofs),
    ("gradient suite", check_gradients),
    ("detachability", check_detached),
    ("tensor format", check_tensor_format),
]


def run_selfcheck(seed: int = 0, names: Optional[Sequence[str]] = None) -> List[CheckResult]:
    """
    Run the invariant suite.

    Args:
        seed: Seed of every generated input
        names: Optional subset of check names

    Returns:
        One CheckResult per check, in suite order
    """
    results = []
    for name, check in CHECKS:
        if names is not None and name not in names:
            continue
        start = time.perf_counter()
        try:
            passed, detail = check(seed)
        except Exception as e:
            logger.error(f"Check {name} crashed: {e}", exc_info=True)
            passed, detail = False, f"crashed: {e}"
        finally:
            ad.reset_tape()
        elapsed = time.perf_counter() - start
        results.append(CheckResult(name, bool(passed), detail, elapsed))
        logger.info(f"{name}: {'PASS' if passed else 'FAIL'} ({detail})")
    return results


def format_table(results: Sequence[CheckResult]) -> str:
    width = max([len(r.name) for r in results] + [5])
    lines = [f"{'check':<{width}}  status  detail", f"{'-' * width}  ------  ------"]
    for r in results:
        lines.append(f"{r.name:<{width}}  {'PASS' if r.passed else 'FAIL':<6}  {r.detail}")
    failed = sum(not r.passed for r in results)
    lines.append(f"{len(results) - failed} passed, {failed} failed")
    return "\n".join(lines)
