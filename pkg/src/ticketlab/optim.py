"""SGD-with-momentum and Adam over explicit parameter groups.

Weight decay is a per-group setting so that mask parameters, which already
carry an L1 gate penalty, can opt out. A ``CompositeOptimizer`` lets one run
drive different optimizer kinds for the weight group and the mask group
(e.g. Adam on weights, plain SGD with a large rate on mask logits).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import GradientError, Tensor


@dataclass
class OptimizerConfig:
    kind: str = "sgd"  # "sgd" | "adam"
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def validate(self) -> None:
        if self.kind not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer kind {self.kind!r}")
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")
        if self.weight_decay < 0:
            raise ValueError("weight decay must be non-negative")

    def build(self, params: list[Tensor]) -> "Optimizer":
        self.validate()
        if self.kind == "sgd":
            return SGD(params, lr=self.lr, momentum=self.momentum,
                       weight_decay=self.weight_decay)
        return Adam(params, lr=self.lr, beta1=self.beta1, beta2=self.beta2,
                    eps=self.eps, weight_decay=self.weight_decay)


class Optimizer:
    """Base: owns a flat parameter list plus per-parameter state slots."""

    def __init__(self, params: list[Tensor], lr: float, weight_decay: float):
        self.params = list(params)
        self.lr = float(lr)
        self.weight_decay = float(weight_decay)

    def _require_grads(self) -> None:
        for p in self.params:
            if p.grad is None:
                raise GradientError("optimizer step with a missing gradient")

    def _clear_grads(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        raise NotImplementedError

    def state_arrays(self) -> dict[str, np.ndarray]:
        """Slot buffers keyed by stable names, for checkpointing."""
        raise NotImplementedError

    def load_state(self, arrays: dict[str, np.ndarray], meta: dict) -> None:
        raise NotImplementedError

    def state_meta(self) -> dict:
        return {}


class SGD(Optimizer):
    def __init__(self, params, lr=0.1, momentum=0.0, weight_decay=0.0):
        super().__init__(params, lr, weight_decay)
        self.momentum = float(momentum)
        self.buffers = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        self._require_grads()
        for p, buf in zip(self.params, self.buffers):
            g = p.grad
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            if self.momentum:
                buf *= self.momentum
                buf += g
                d = buf
            else:
                d = g
            p.data -= self.lr * d
        self._clear_grads()

    def state_arrays(self):
        return {f"buf{i}": b for i, b in enumerate(self.buffers)}

    def load_state(self, arrays, meta):
        for i, b in enumerate(self.buffers):
            b[...] = arrays[f"buf{i}"]


class Adam(Optimizer):
    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8,
                 weight_decay=0.0):
        super().__init__(params, lr, weight_decay)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        self._require_grads()
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)
        self._clear_grads()

    def state_arrays(self):
        out = {}
        for i, (m, v) in enumerate(zip(self.m, self.v)):
            out[f"m{i}"] = m
            out[f"v{i}"] = v
        return out

    def state_meta(self):
        return {"t": self.t}

    def load_state(self, arrays, meta):
        self.t = int(meta["t"])
        for i in range(len(self.m)):
            self.m[i][...] = arrays[f"m{i}"]
            self.v[i][...] = arrays[f"v{i}"]


class CompositeOptimizer:
    """Steps several member optimizers as one (weights + masks, typically)."""

    def __init__(self, members: list[Optimizer]):
        self.members = [m for m in members if m is not None and m.params]

    @property
    def params(self):
        return [p for m in self.members for p in m.params]

    def step(self) -> None:
        for m in self.members:
            m.step()

    def state_arrays(self):
        out = {}
        for i, m in enumerate(self.members):
            for k, a in m.state_arrays().items():
                out[f"opt{i}.{k}"] = a
        return out

    def state_meta(self):
        return {str(i): m.state_meta() for i, m in enumerate(self.members)}

    def load_state(self, arrays, meta):
        for i, m in enumerate(self.members):
            sub = {k.split(".", 1)[1]: a for k, a in arrays.items()
                   if k.startswith(f"opt{i}.")}
            m.load_state(sub, meta.get(str(i), {}))

    def scale_lr(self, factor: float) -> None:
        for m in self.members:
            m.lr *= factor
