"""Named parameter storage partitioned by training role."""
from __future__ import annotations

from collections.abc import Iterator

import numpy as np

from .errors import ConfigurationError
from .tensor import Tensor

ROLES = ("encoder", "decoder", "discriminator")


class ParamSet:
    """Leaf tensors keyed by name, each tagged with exactly one role.

    encoder = variational parameters, decoder = generation parameters,
    discriminator = the domain classifier's own weights.
    """

    def __init__(self):
        self._tensors: dict[str, Tensor] = {}
        self._roles: dict[str, str] = {}

    def add(self, name: str, value: np.ndarray, role: str) -> Tensor:
        if role not in ROLES:
            raise ConfigurationError(f"unknown parameter role {role!r}")
        if name in self._tensors:
            raise ConfigurationError(f"duplicate parameter {name!r}")
        t = Tensor(value, requires_grad=True, dtype=value.dtype, name=name)
        self._tensors[name] = t
        self._roles[name] = role
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self._tensors

    def __iter__(self) -> Iterator[str]:
        return iter(self._tensors)

    def __len__(self) -> int:
        return len(self._tensors)

    def items(self):
        return self._tensors.items()

    def role(self, name: str) -> str:
        return self._roles[name]

    def names(self, role: str | None = None) -> list[str]:
        if role is None:
            return list(self._tensors)
        return [n for n, r in self._roles.items() if r == role]

    def partition(self, role: str) -> dict[str, Tensor]:
        return {n: self._tensors[n] for n in self.names(role)}

    def zero_grad(self) -> None:
        for t in self._tensors.values():
            t.grad = None

    def grads(self, role: str) -> dict[str, np.ndarray]:
        """Current gradients for one partition; missing gradients read as zero."""
        out = {}
        for n, t in self.partition(role).items():
            out[n] = t.grad if t.grad is not None else np.zeros_like(t.data)
        return out

    def state_dict(self) -> dict[str, np.ndarray]:
        return {n: t.data.copy() for n, t in self._tensors.items()}

    def load_state_dict(self, arrays: dict[str, np.ndarray]) -> None:
        missing = set(self._tensors) - set(arrays)
        extra = set(arrays) - set(self._tensors)
        if missing or extra:
            raise ConfigurationError(f"parameter mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for n, arr in arrays.items():
            t = self._tensors[n]
            if arr.shape != t.shape:
                raise ConfigurationError(f"parameter {n!r}: shape {arr.shape} != {t.shape}")
            t.data = np.array(arr, dtype=t.dtype, copy=True)

    def astype(self, dtype) -> None:
        for t in self._tensors.values():
            t.data = t.data.astype(dtype)
            t.grad = None


def fan_in_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int,
                   gain: float = 1.0, dtype=np.float32) -> np.ndarray:
    """Uniform(-b, b) with b = gain * sqrt(3 / fan_in), i.e. variance gain**2 / fan_in."""
    bound = gain * np.sqrt(3.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)
