"""Layer and parameter-container abstractions on top of the tensor engine."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .errors import ConfigError
from .tensor import Tensor


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    """Normal(0, std) samples with values beyond two deviations redrawn."""
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2.0 * std
    while np.any(bad):
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2.0 * std
    return out.astype(np.float32)


class Module:
    """Base class: children and parameters discovered by attribute walking."""

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def named_parameters(self, prefix: str = "") -> list[tuple[str, Tensor]]:
        found: list[tuple[str, Tensor]] = []
        for name, value in vars(self).items():
            path = f"{prefix}{name}"
            if isinstance(value, Tensor):
                if value.requires_grad:
                    found.append((path, value))
            elif isinstance(value, Module):
                found.extend(value.named_parameters(f"{path}."))
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        found.extend(item.named_parameters(f"{path}.{i}."))
                    elif isinstance(item, Tensor) and item.requires_grad:
                        found.append((f"{path}.{i}", item))
        return found

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self.named_parameters()}

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = sorted(set(own) - set(arrays))
        extra = sorted(set(arrays) - set(own))
        if missing or extra:
            raise ConfigError(
                f"parameter name mismatch; missing={missing[:4]} extra={extra[:4]}"
            )
        for name, p in own.items():
            arr = arrays[name]
            if arr.shape != p.data.shape:
                raise ConfigError(
                    f"parameter {name}: stored shape {arr.shape} != model shape {p.data.shape}"
                )
            p.data = arr.astype(p.data.dtype, copy=False)

    def count_parameters(self) -> int:
        return sum(p.size for p in self.parameters())


class Dense(Module):
    """Affine layer with optional activation applied after the bias."""

    def __init__(
        self,
        rng: np.random.Generator,
        in_dim: int,
        out_dim: int,
        activation: str | None = None,
        bias: bool = True,
    ):
        self.weight = Tensor(trunc_normal(rng, (in_dim, out_dim)), requires_grad=True)
        self.bias = (
            Tensor(np.zeros(out_dim, dtype=np.float32), requires_grad=True) if bias else None
        )
        if activation not in (None, "gelu", "silu", "relu"):
            raise ConfigError(f"unknown activation {activation!r}")
        self.activation = activation

    def __call__(self, x) -> Tensor:
        out = T.linear(x, self.weight, self.bias)
        if self.activation == "gelu":
            out = T.gelu(out)
        elif self.activation == "silu":
            out = T.silu(out)
        elif self.activation == "relu":
            out = T.maximum(out, 0.0)
        return out


class MLP(Module):
    """Stack of Dense layers; hidden layers share one activation.

    ``activate_last`` keeps the activation on the final layer too, which the
    per-point feature stages rely on.
    """

    def __init__(
        self,
        rng: np.random.Generator,
        dims: list[int],
        activation: str = "gelu",
        activate_last: bool = True,
    ):
        if len(dims) < 2:
            raise ConfigError(f"MLP needs at least [in, out] dims, got {dims}")
        self.layers = [
            Dense(
                rng,
                dims[i],
                dims[i + 1],
                activation=activation if (activate_last or i < len(dims) - 2) else None,
            )
            for i in range(len(dims) - 1)
        ]

    def __call__(self, x) -> Tensor:
        for layer in self.layers:
            x = layer(x)
        return x


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        self.gain = Tensor(np.ones(dim, dtype=np.float32), requires_grad=True)
        self.bias = Tensor(np.zeros(dim, dtype=np.float32), requires_grad=True)
        self.eps = eps

    def __call__(self, x) -> Tensor:
        return T.layer_norm(x, self.gain, self.bias, eps=self.eps)


class RMSNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        self.gain = Tensor(np.ones(dim, dtype=np.float32), requires_grad=True)
        self.eps = eps

    def __call__(self, x) -> Tensor:
        return T.rms_norm(x, self.gain, eps=self.eps)


class EmbeddingTable(Module):
    def __init__(self, rng: np.random.Generator, count: int, dim: int):
        self.table = Tensor(trunc_normal(rng, (count, dim)), requires_grad=True)

    def __call__(self, indices) -> Tensor:
        return T.embedding_lookup(self.table, indices)
