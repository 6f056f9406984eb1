"""Adam with bias correction and a step-decay learning-rate schedule."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import NonFiniteError, ShapeError, Tensor


@dataclass
class LrSchedule:
    base_lr: float = 1e-3
    drop_factor: float = 0.1
    drop_every: int = 40

    def lr_at(self, epoch: int) -> float:
        if epoch < 0:
            raise ValueError("epoch must be >= 0")
        return self.base_lr * self.drop_factor ** (epoch // self.drop_every)

    @classmethod
    def parse(cls, spec: str, base_lr: float) -> "LrSchedule":
        """Parse ``step:<every>:<factor>`` (``none`` keeps the rate constant)."""
        if spec == "none":
            return cls(base_lr, 1.0, 1)
        parts = spec.split(":")
        if len(parts) != 3 or parts[0] != "step":
            raise ValueError(f"schedule must look like step:40:0.1, got {spec!r}")
        every, factor = int(parts[1]), float(parts[2])
        if every < 1 or factor <= 0:
            raise ValueError(f"invalid schedule {spec!r}")
        return cls(base_lr, factor, every)


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.5
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


class Adam:
    """Adam over a fixed, named set of parameters."""

    def __init__(self, params: dict[str, Tensor], lr: float = 1e-3,
                 beta1: float = 0.5, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.state = AdamState(lr, beta1, beta2, eps)
        for name, p in params.items():
            self.state.m[name] = np.zeros_like(p.data)
            self.state.v[name] = np.zeros_like(p.data)

    @property
    def lr(self) -> float:
        return self.state.lr

    @lr.setter
    def lr(self, value: float) -> None:
        self.state.lr = value

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self) -> None:
        st = self.state
        grads = {}
        for name, p in self.params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            if g.shape != p.shape:
                raise ShapeError(f"gradient for {name} has shape {g.shape}, expected {p.shape}")
            if not np.isfinite(g).all():
                raise NonFiniteError(f"non-finite gradient for {name}")
            grads[name] = g
        st.t += 1
        bc1 = 1.0 - st.beta1 ** st.t
        bc2 = 1.0 - st.beta2 ** st.t
        for name, p in self.params.items():
            g = grads[name]
            m, v = st.m[name], st.v[name]
            m *= st.beta1
            m += (1.0 - st.beta1) * g
            v *= st.beta2
            v += (1.0 - st.beta2) * g * g
            m_hat = m / bc1
            v_hat = v / bc2
            p.data -= (st.lr * m_hat / (np.sqrt(v_hat) + st.eps)).astype(p.dtype)
            if not np.isfinite(p.data).all():
                raise NonFiniteError(f"update made {name} non-finite")

    def state_tensors(self) -> dict[str, np.ndarray]:
        out = {}
        for name in self.params:
            out[f"adam.m.{name}"] = self.state.m[name]
            out[f"adam.v.{name}"] = self.state.v[name]
        out["adam.t"] = np.array([self.state.t], dtype=np.int64)
        return out

    def load_state_tensors(self, tensors: dict[str, np.ndarray]) -> None:
        for name, p in self.params.items():
            for kind, store in (("m", self.state.m), ("v", self.state.v)):
                arr = tensors[f"adam.{kind}.{name}"]
                if arr.shape != p.shape:
                    raise ShapeError(f"adam.{kind}.{name} has shape {arr.shape}, expected {p.shape}")
                store[name] = arr.astype(p.dtype).copy()
        self.state.t = int(tensors["adam.t"].reshape(-1)[0])


def adam_step(params: dict[str, Tensor], opt: Adam) -> None:
    """Apply one Adam update using the gradients stored on ``params``."""
    if params is not opt.params and set(params) != set(opt.params):
        raise ValueError("parameters do not match the optimizer's")
    opt.step()
