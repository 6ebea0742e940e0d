"""Feed-forward network built from a small set of layer descriptors.

The layer vocabulary is deliberately tiny: dense, 2-D convolution, 2x2 max
pooling and pointwise nonlinearities.  Weights initialize uniformly in
+-sqrt(6 / (fan_in + fan_out)) unless a caller overwrites them.
"""

from __future__ import annotations

import json
from typing import Sequence

import numpy as np

from .tensor import Tensor, conv2d, maxpool2d

FORMAT_VERSION = 1


class LayerError(ValueError):
    """Shape or usage error, tagged with the offending layer."""

    def __init__(self, layer_index: int, kind: str, message: str):
        super().__init__(f"layer {layer_index} ({kind}): {message}")
        self.layer_index = layer_index
        self.kind = kind


def _glorot(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int, fan_out: int) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


class Dense:
    """Affine map on the trailing axis; inputs with more dims are flattened to (batch, features)."""

    kind = "dense"

    def __init__(self, in_dim: int, out_dim: int, bias: bool = True, rng: np.random.Generator | None = None):
        if rng is None:
            rng = np.random.default_rng()
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.weight = Tensor(_glorot(rng, (in_dim, out_dim), in_dim, out_dim), requires_grad=True)
        self.bias = Tensor(np.zeros(out_dim), requires_grad=True) if bias else None

    def parameters(self) -> list[Tensor]:
        return [self.weight] + ([self.bias] if self.bias is not None else [])

    def forward(self, x: Tensor) -> Tensor:
        if x.data.ndim > 2:
            x = x.reshape(x.shape[0], -1)
        if x.shape[-1] != self.in_dim:
            raise ValueError(f"expected {self.in_dim} input features, got {x.shape[-1]}")
        out = x @ self.weight
        if self.bias is not None:
            out = out + self.bias
        return out

    def config(self) -> dict:
        return {"kind": self.kind, "in": self.in_dim, "out": self.out_dim, "bias": self.bias is not None}


class Conv2d:
    """3x3 cross-correlation, valid padding, stride 1, on (batch, channels, H, W)."""

    kind = "conv2d"

    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        kernel: int = 3,
        bias: bool = True,
        rng: np.random.Generator | None = None,
    ):
        if rng is None:
            rng = np.random.default_rng()
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel = kernel
        fan_in = in_channels * kernel * kernel
        fan_out = out_channels * kernel * kernel
        self.weight = Tensor(
            _glorot(rng, (out_channels, in_channels, kernel, kernel), fan_in, fan_out),
            requires_grad=True,
        )
        self.bias = Tensor(np.zeros(out_channels), requires_grad=True) if bias else None

    def parameters(self) -> list[Tensor]:
        return [self.weight] + ([self.bias] if self.bias is not None else [])

    def forward(self, x: Tensor) -> Tensor:
        if x.data.ndim != 4:
            raise ValueError(f"expected (batch, channels, H, W) input, got shape {x.shape}")
        if x.shape[1] != self.in_channels:
            raise ValueError(f"expected {self.in_channels} input channels, got {x.shape[1]}")
        if x.shape[2] < self.kernel or x.shape[3] < self.kernel:
            raise ValueError(f"spatial dims {x.shape[2]}x{x.shape[3]} smaller than kernel {self.kernel}")
        return conv2d(x, self.weight, self.bias)

    def config(self) -> dict:
        return {
            "kind": self.kind,
            "in_channels": self.in_channels,
            "out_channels": self.out_channels,
            "kernel": self.kernel,
            "bias": self.bias is not None,
        }


class MaxPool2d:
    kind = "maxpool2d"

    def __init__(self, size: int = 2):
        self.size = size

    def parameters(self) -> list[Tensor]:
        return []

    def forward(self, x: Tensor) -> Tensor:
        if x.data.ndim != 4:
            raise ValueError(f"expected (batch, channels, H, W) input, got shape {x.shape}")
        return maxpool2d(x, self.size)

    def config(self) -> dict:
        return {"kind": self.kind, "size": self.size}


class Activation:
    """Pointwise nonlinearity: sigmoid, tanh or relu."""

    KINDS = ("sigmoid", "tanh", "relu")

    def __init__(self, kind: str):
        if kind not in self.KINDS:
            raise ValueError(f"unknown activation {kind!r}, expected one of {self.KINDS}")
        self.kind = kind

    def parameters(self) -> list[Tensor]:
        return []

    def forward(self, x: Tensor) -> Tensor:
        return getattr(x, self.kind)()

    def config(self) -> dict:
        return {"kind": self.kind}


Layer = Dense | Conv2d | MaxPool2d | Activation


class Network:
    """An ordered stack of layers behaving as one differentiable function."""

    def __init__(self, layers: Sequence[Layer]):
        self.layers = list(layers)
        self._last_output: Tensor | None = None

    # ------------------------------------------------------------------
    def parameters(self) -> list[Tensor]:
        params: list[Tensor] = []
        for layer in self.layers:
            params.extend(layer.parameters())
        return params

    def parameter_count(self) -> int:
        return sum(p.size for p in self.parameters())

    def forward(self, x) -> Tensor:
        """Run the stack; the returned Tensor carries the recorded graph."""
        out = x if isinstance(x, Tensor) else Tensor(x)
        for i, layer in enumerate(self.layers):
            try:
                out = layer.forward(out)
            except ValueError as exc:
                raise LayerError(i, layer.kind, str(exc)) from exc
        self._last_output = out
        return out

    __call__ = forward

    def backward(self, loss_grad) -> list[np.ndarray]:
        """Backpropagate ``d(loss)/d(output)`` through the last forward pass."""
        if self._last_output is None:
            raise RuntimeError("backward called before forward")
        for p in self.parameters():
            p.zero_grad()
        self._last_output.backward(seed=np.asarray(loss_grad, dtype=np.float64))
        return [np.zeros_like(p.data) if p.grad is None else p.grad for p in self.parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    # ------------------------------------------------------------------
    def state_vector(self) -> np.ndarray:
        """All parameters flattened in layer order (row-major within each)."""
        parts = [p.data.ravel() for p in self.parameters()]
        return np.concatenate(parts) if parts else np.empty(0)

    def load_state_vector(self, vec: np.ndarray) -> None:
        vec = np.asarray(vec, dtype=np.float64)
        offset = 0
        for p in self.parameters():
            n = p.size
            p.data = vec[offset : offset + n].reshape(p.data.shape).copy()
            offset += n
        if offset != vec.size:
            raise ValueError(f"state vector has {vec.size} entries, network needs {offset}")

    def copy(self) -> "Network":
        clone = network_from_config([layer.config() for layer in self.layers])
        clone.load_state_vector(self.state_vector())
        return clone

    # ------------------------------------------------------------------
    def to_json(self) -> str:
        doc = {
            "version": FORMAT_VERSION,
            "layers": [layer.config() for layer in self.layers],
            "params": [
                [p.data.ravel().tolist() for p in layer.parameters()] for layer in self.layers
            ],
        }
        return json.dumps(doc)

    @classmethod
    def from_json(cls, text: str) -> "Network":
        doc = json.loads(text)
        if doc.get("version") != FORMAT_VERSION:
            raise ValueError(f"unsupported network format version {doc.get('version')!r}")
        net = network_from_config(doc["layers"])
        for layer, flats in zip(net.layers, doc["params"]):
            for p, flat in zip(layer.parameters(), flats):
                p.data = np.asarray(flat, dtype=np.float64).reshape(p.data.shape)
        return net


def network_from_config(configs: Sequence[dict], rng: np.random.Generator | None = None) -> Network:
    """Instantiate a Network from layer config dicts (weights random unless loaded after)."""
    layers: list[Layer] = []
    for cfg in configs:
        kind = cfg["kind"]
        if kind == "dense":
            layers.append(Dense(cfg["in"], cfg["out"], bias=cfg.get("bias", True), rng=rng))
        elif kind == "conv2d":
            layers.append(
                Conv2d(
                    cfg["in_channels"],
                    cfg["out_channels"],
                    kernel=cfg.get("kernel", 3),
                    bias=cfg.get("bias", True),
                    rng=rng,
                )
            )
        elif kind == "maxpool2d":
            layers.append(MaxPool2d(cfg.get("size", 2)))
        elif kind in Activation.KINDS:
            layers.append(Activation(kind))
        else:
            raise ValueError(f"unknown layer kind {kind!r}")
    return Network(layers)
