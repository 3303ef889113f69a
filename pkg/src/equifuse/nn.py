"""Two-layer perceptrons, SGD, and the named-array checkpoint format."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Dict, Iterable, List, Tuple

import numpy as np

from . import autodiff as ad
from .errors import ContractError

CHECKPOINT_FORMAT = "equifuse-named-arrays"
CHECKPOINT_VERSION = 1


class Linear:
    """Affine map with weight (d_in, d_out) and bias (1, d_out)."""

    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator):
        self.w = ad.Tensor(rng.normal(0.0, 1.0 / np.sqrt(d_in), size=(d_in, d_out)))
        self.b = ad.Tensor(np.zeros((1, d_out)))

    def __call__(self, x: ad.Tensor) -> ad.Tensor:
        return ad.add_bias(ad.matmul(x, self.w), self.b)

    def named_params(self, prefix: str) -> List[Tuple[str, ad.Tensor]]:
        return [(f"{prefix}.w", self.w), (f"{prefix}.b", self.b)]


class TwoLayerMlp:
    """Perceptron with one tanh hidden layer and a linear output layer."""

    def __init__(self, d_in: int, d_hidden: int, d_out: int, rng: np.random.Generator):
        self.hidden = Linear(d_in, d_hidden, rng)
        self.out = Linear(d_hidden, d_out, rng)

    def __call__(self, x: ad.Tensor) -> ad.Tensor:
        return self.out(ad.tanh(self.hidden(x)))

    def hidden_activation(self, x: ad.Tensor) -> ad.Tensor:
        return ad.tanh(self.hidden(x))

    def named_params(self, prefix: str) -> List[Tuple[str, ad.Tensor]]:
        return self.hidden.named_params(f"{prefix}.hidden") + self.out.named_params(
            f"{prefix}.out"
        )


class Sgd:
    """Plain SGD with optional momentum over a fixed parameter list."""

    def __init__(self, params: Iterable[ad.Tensor], lr: float, momentum: float = 0.0):
        self.params = list(params)
        self.lr = float(lr)
        self.momentum = float(momentum)
        self._velocity = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        for p, v in zip(self.params, self._velocity):
            if p.grad is None:
                continue
            if self.momentum:
                v *= self.momentum
                v += p.grad
                p.data -= self.lr * v
            else:
                p.data -= self.lr * p.grad

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


def save_named_arrays(path, arrays: Dict[str, np.ndarray], meta: dict) -> None:
    """Write named float64 arrays with shape headers as versioned JSON.

    json round-trips float64 exactly (repr is shortest-exact), so a
    save/load cycle is bit-identical.
    """
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "meta": meta,
        "arrays": {
            name: {"shape": list(arr.shape), "data": arr.reshape(-1).tolist()}
            for name, arr in sorted(arrays.items())
        },
    }
    Path(path).write_text(json.dumps(payload))


def load_named_arrays(path) -> Tuple[Dict[str, np.ndarray], dict]:
    payload = json.loads(Path(path).read_text())
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise ContractError(f"not a checkpoint file: {path}")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise ContractError(f"unsupported checkpoint version {payload.get('version')}")
    arrays = {
        name: np.asarray(entry["data"], dtype=np.float64).reshape(entry["shape"])
        for name, entry in payload["arrays"].items()
    }
    return arrays, payload.get("meta", {})
