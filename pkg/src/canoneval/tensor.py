"""Dense float32 tensor type and layer parameter records.

Tensors are stored as contiguous float32 arrays (the on-disk dtype).
Numeric kernels upcast to float64 internally and round back to float32
only at public boundaries, so stored values stay reproducible while
reductions keep enough headroom for conservation-style checks.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class ShapeError(ValueError):
    """Operand shapes are inconsistent with an operation's contract."""


class NonFiniteError(ValueError):
    """A tensor contains NaN or Inf where finite values are required."""


class Tensor:
    """Dense n-dimensional float32 array, C-contiguous.

    Treated as immutable everywhere: kernels never write into a Tensor,
    so the float64 view handed to the numeric kernels is cached.
    """

    __slots__ = ("array", "_f64")

    def __init__(self, array) -> None:
        self.array = np.ascontiguousarray(array, dtype=np.float32)
        self._f64 = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.array.shape

    @property
    def size(self) -> int:
        return int(self.array.size)

    def astype64(self) -> np.ndarray:
        if self._f64 is None:
            self._f64 = self.array.astype(np.float64)
        return self._f64

    def check_finite(self, what: str = "tensor") -> "Tensor":
        if not np.all(np.isfinite(self.array)):
            raise NonFiniteError(f"{what} contains non-finite values")
        return self

    def tobytes(self) -> bytes:
        """Raw little-endian float32 bytes, row-major."""
        return self.array.astype("<f4").tobytes()

    @classmethod
    def frombytes(cls, data: bytes, shape) -> "Tensor":
        arr = np.frombuffer(data, dtype="<f4")
        expected = int(np.prod(shape)) if len(shape) else 1
        if arr.size != expected:
            raise ShapeError(
                f"byte payload holds {arr.size} floats, shape {tuple(shape)} needs {expected}"
            )
        return cls(arr.reshape(shape))

    def __array__(self, dtype=None, copy=None):
        if dtype is None:
            return self.array
        return self.array.astype(dtype)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape})"


def as_array64(x) -> np.ndarray:
    """Coerce a Tensor or array-like to a float64 ndarray."""
    if isinstance(x, Tensor):
        return x.astype64()
    return np.asarray(x, dtype=np.float64)


@dataclass
class ConvParams:
    """2-D convolution: weight [out_ch, in_ch, kH, kW], bias [out_ch]."""

    weight: Tensor
    bias: Tensor
    stride: tuple[int, int] = (1, 1)
    padding: tuple[int, int] = (0, 0)

    def __post_init__(self) -> None:
        if len(self.weight.shape) != 4:
            raise ShapeError(f"conv weight must be rank 4, got {self.weight.shape}")
        if self.bias.shape != (self.weight.shape[0],):
            raise ShapeError(
                f"conv bias shape {self.bias.shape} != (out_ch,)={self.weight.shape[0]}"
            )
        if min(self.stride) < 1:
            raise ValueError(f"stride must be positive, got {self.stride}")
        if min(self.padding) < 0:
            raise ValueError(f"padding must be non-negative, got {self.padding}")

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]


@dataclass
class DenseParams:
    """Fully-connected layer: weight [out, in], bias [out]."""

    weight: Tensor
    bias: Tensor

    def __post_init__(self) -> None:
        if len(self.weight.shape) != 2:
            raise ShapeError(f"dense weight must be rank 2, got {self.weight.shape}")
        if self.bias.shape != (self.weight.shape[0],):
            raise ShapeError(
                f"dense bias shape {self.bias.shape} != (out,)={self.weight.shape[0]}"
            )

    @property
    def out_features(self) -> int:
        return self.weight.shape[0]


@dataclass
class BnParams:
    """Inference-mode batch normalization with fixed running statistics.

    The per-channel transform is gamma * (x - running_mean) / s + beta
    with s = sqrt(running_var + epsilon).
    """

    gamma: Tensor
    beta: Tensor
    running_mean: Tensor
    running_var: Tensor
    epsilon: float = 1e-5

    def __post_init__(self) -> None:
        n = self.gamma.shape
        if len(n) != 1:
            raise ShapeError(f"bn parameters must be rank 1, got {n}")
        for name in ("beta", "running_mean", "running_var"):
            t = getattr(self, name)
            if t.shape != n:
                raise ShapeError(f"bn {name} shape {t.shape} != gamma shape {n}")
        if np.any(self.running_var.array < 0):
            raise ValueError("bn running_var must be non-negative")
        if not self.epsilon > 0:
            raise ValueError(f"bn epsilon must be positive, got {self.epsilon}")

    @property
    def channels(self) -> int:
        return self.gamma.shape[0]

    def scale(self) -> np.ndarray:
        """Per-channel slope gamma / sqrt(var + eps), in float64."""
        return self.gamma.astype64() / np.sqrt(
            self.running_var.astype64() + np.float64(np.float32(self.epsilon))
        )

    def shift(self) -> np.ndarray:
        """Per-channel offset beta - scale * mean, in float64."""
        return self.beta.astype64() - self.scale() * self.running_mean.astype64()


@dataclass
class PoolParams:
    """Spatial pooling window geometry."""

    kernel: tuple[int, int]
    stride: tuple[int, int] = field(default=None)  # type: ignore[assignment]
    padding: tuple[int, int] = (0, 0)

    def __post_init__(self) -> None:
        if self.stride is None:
            self.stride = tuple(self.kernel)
        if min(self.kernel) < 1 or min(self.stride) < 1:
            raise ValueError("pool kernel and stride must be positive")
        if min(self.padding) < 0:
            raise ValueError("pool padding must be non-negative")
        if self.padding[0] >= self.kernel[0] or self.padding[1] >= self.kernel[1]:
            raise ValueError("pool padding must be smaller than the kernel")
