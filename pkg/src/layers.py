"""
Parameter containers shared by the network blocks.
"""

import logging
from typing import Dict, Iterator, List, Optional, Tuple

import numpy as np

from src import autodiff as ad
from src.autodiff import Tensor
from src.exceptions import CheckpointError, ShapeError
from src.rng import Rng

logging.basicConfig(
    level=logging.INFO,
    format='%(asctime)s - %(name)s - %(levelname)s - %(message)s'
)
logger = logging.getLogger(__name__)


class Module:
    """Base class: every Tensor attribute is a trainable parameter, sub-modules nest."""

    def _children(self) -> Iterator[Tuple[str, object]]:
        for key, value in vars(self).items():
            if key.startswith("_"):
                continue
            if isinstance(value, (Tensor, Module)):
                yield key, value
            elif isinstance(value, (list, tuple)) and value and all(isinstance(v, Module) for v in value):
                for i, item in enumerate(value):
                    yield f"{key}.{i}", item

    def named_parameters(self, prefix: str = "") -> List[Tuple[str, Tensor]]:
        """Deterministic (name, tensor) pairs in attribute-definition order."""
        out = []
        for key, value in self._children():
            name = f"{prefix}{key}"
            if isinstance(value, Tensor):
                out.append((name, value))
            else:
                out.extend(value.named_parameters(prefix=f"{name}."))
        return out

    def modules(self) -> Iterator["Module"]:
        yield self
        for _, value in self._children():
            if isinstance(value, Module):
                yield from value.modules()

    def parameters(self) -> List[Tensor]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def astype(self, dtype) -> "Module":
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        return self

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        for name, p in self.named_parameters():
            if name not in state:
                raise CheckpointError(f"missing tensor: {name}")
            value = np.asarray(state[name])
            if value.shape != p.shape:
                raise CheckpointError(f"{name}: archive shape {value.shape} != model shape {p.shape}")
            p.data = value.astype(p.dtype)
            p.grad = None


def init_parameter(rng: Rng, shape: Tuple[int, ...], fan_in: int, name: Optional[str] = None) -> Tensor:
    std = 1.0 / np.sqrt(max(fan_in, 1))
    return ad.parameter(rng.normal(shape, std=std), name=name)


class Linear(Module):
    """y = x @ weight + bias over the last axis."""

    def __init__(self, in_features: int, out_features: int, rng: Rng, bias: bool = True):
        self.in_features = in_features
        self.out_features = out_features
        self.weight = init_parameter(rng, (in_features, out_features), in_features, name="weight")
        self.bias = ad.parameter(np.zeros(out_features), name="bias") if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.in_features:
            raise ShapeError(f"linear: input {x.shape} does not end in {self.in_features} features")
        y = ad.matmul(x, self.weight)
        return y + self.bias if self.bias is not None else y


def replicate_pad(x: Tensor, width: int) -> Tensor:
    """Pad the last two axes by repeating border pixels."""
    if width == 0:
        return x
    height, cols = x.shape[-2:]
    rows = np.clip(np.arange(-width, height + width), 0, height - 1)
    columns = np.clip(np.arange(-width, cols + width), 0, cols - 1)
    return ad.gather(ad.gather(x, rows, axis=-2), columns, axis=-1)


class Conv2d(Module):
    """Square-kernel convolution; ``padding_mode`` is "zeros" or "replicate"."""

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int, rng: Rng,
                 stride: int = 1, padding: Optional[int] = None, padding_mode: str = "zeros"):
        if padding_mode not in ("zeros", "replicate"):
            raise ValueError(f"unknown padding mode {padding_mode!r}")
        self.stride = stride
        self.padding = kernel_size // 2 if padding is None else padding
        self.padding_mode = padding_mode
        fan_in = in_channels * kernel_size * kernel_size
        self.weight = init_parameter(rng, (out_channels, in_channels, kernel_size, kernel_size), fan_in,
                                     name="weight")
        self.bias = ad.parameter(np.zeros(out_channels), name="bias")

    def __call__(self, x: Tensor) -> Tensor:
        if self.padding_mode == "replicate":
            return ad.conv2d(replicate_pad(x, self.padding), self.weight, self.bias, stride=self.stride)
        return ad.conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)


class LayerNorm(Module):
    """Normalizes the last axis, then applies a per-feature affine map."""

    def __init__(self, dim: int, eps: float = 1e-5):
        self.eps = eps
        self.gamma = ad.parameter(np.ones(dim), name="gamma")
        self.beta = ad.parameter(np.zeros(dim), name="beta")

    def __call__(self, x: Tensor) -> Tensor:
        centered = x - ad.mean(x, axis=-1, keepdims=True)
        var = ad.mean(centered * centered, axis=-1, keepdims=True)
        return centered / ad.sqrt(var + self.eps) * self.gamma + self.beta
