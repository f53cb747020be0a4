"""AdamW and Lion optimizers plus the cosine-with-warmup LR schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from tinyvitlab.tensor import Tensor

_NO_DECAY_MARKERS = ("bias", ".b1", ".b2", "gamma", "beta", "cls_token", "pos_embed")


def excluded_from_decay(path: str) -> bool:
    """Layer-norm affines, biases, CLS tokens, and positional tables skip
    weight decay."""
    return any(m in path for m in _NO_DECAY_MARKERS)


@dataclass
class OptimState:
    """Per-parameter moment buffers and step counter for one optimizer run."""

    kind: str                       # adamw | lion
    lr_peak: float = 0.002
    weight_decay: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    decay_exclusions: bool = True
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def to_arrays(self) -> dict[str, np.ndarray]:
        out = {f"m.{k}": a for k, a in self.m.items()}
        out.update({f"v.{k}": a for k, a in self.v.items()})
        return out

    def meta(self) -> dict:
        return {"kind": self.kind, "lr_peak": self.lr_peak,
                "weight_decay": self.weight_decay, "beta1": self.beta1,
                "beta2": self.beta2, "eps": self.eps,
                "decay_exclusions": self.decay_exclusions, "t": self.t}

    @classmethod
    def from_meta(cls, meta: dict, arrays: dict[str, np.ndarray]) -> "OptimState":
        state = cls(**meta)
        for key, arr in arrays.items():
            kind, path = key.split(".", 1)
            (state.m if kind == "m" else state.v)[path] = arr
        return state


def init_optim(kind: str, params: dict[str, Tensor], lr_peak: float = 0.002,
               weight_decay: float = 0.05, betas: tuple[float, float] | None = None,
               eps: float = 1e-8, decay_exclusions: bool = True) -> OptimState:
    if kind not in ("adamw", "lion"):
        raise ValueError(f"unknown optimizer {kind!r}")
    if betas is None:
        betas = (0.9, 0.999) if kind == "adamw" else (0.9, 0.99)
    state = OptimState(kind=kind, lr_peak=lr_peak, weight_decay=weight_decay,
                       beta1=betas[0], beta2=betas[1], eps=eps,
                       decay_exclusions=decay_exclusions)
    for path in sorted(params):
        state.m[path] = np.zeros_like(params[path].data)
        if kind == "adamw":
            state.v[path] = np.zeros_like(params[path].data)
    return state


def _wd(state: OptimState, path: str) -> float:
    if state.decay_exclusions and excluded_from_decay(path):
        return 0.0
    return state.weight_decay


def adamw_step(params: dict[str, Tensor], grads: dict[str, np.ndarray],
               state: OptimState, lr: float) -> None:
    """Decoupled-decay Adam update, in place, over sorted parameter paths."""
    if lr < 0:
        raise ValueError("lr must be >= 0")
    state.t += 1
    t = state.t
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for path in sorted(params):
        p = params[path]
        g = grads[path]
        if g.shape != p.data.shape:
            raise ValueError(f"grad shape {g.shape} != param shape {p.data.shape} at {path}")
        m = state.m[path]
        v = state.v[path]
        m += (1.0 - state.beta1) * (g - m)
        v += (1.0 - state.beta2) * (g * g - v)
        mhat = m / bc1
        vhat = v / bc2
        wd = _wd(state, path)
        # decay is decoupled and computed from the pre-step parameter
        decay = lr * wd * p.data if wd else 0.0
        p.data -= lr * mhat / (np.sqrt(vhat) + state.eps)
        if wd:
            p.data -= decay


def lion_step(params: dict[str, Tensor], grads: dict[str, np.ndarray],
              state: OptimState, lr: float) -> None:
    """Sign-of-interpolated-momentum update; moment refreshed after the step."""
    if lr < 0:
        raise ValueError("lr must be >= 0")
    state.t += 1
    for path in sorted(params):
        p = params[path]
        g = grads[path]
        if g.shape != p.data.shape:
            raise ValueError(f"grad shape {g.shape} != param shape {p.data.shape} at {path}")
        m = state.m[path]
        update = np.sign(state.beta1 * m + (1.0 - state.beta1) * g)
        wd = _wd(state, path)
        decay = lr * wd * p.data if wd else 0.0
        p.data -= lr * update
        if wd:
            p.data -= decay
        m += (1.0 - state.beta2) * (g - m)


def step(params: dict[str, Tensor], grads: dict[str, np.ndarray],
         state: OptimState, lr: float) -> None:
    if state.kind == "adamw":
        adamw_step(params, grads, state, lr)
    else:
        lion_step(params, grads, state, lr)


def lr_schedule(step_idx: int, total_steps: int, warmup_steps: int,
                lr_peak: float, lr_min: float = 1e-5) -> float:
    """Linear warmup from 0 to lr_peak, then half-cosine decay to lr_min."""
    if not (0 <= step_idx <= total_steps):
        raise ValueError(f"step {step_idx} outside [0, {total_steps}]")
    if warmup_steps >= total_steps:
        raise ValueError("warmup_steps must be < total_steps")
    if step_idx < warmup_steps:
        return lr_peak * step_idx / warmup_steps
    progress = (step_idx - warmup_steps) / (total_steps - warmup_steps)
    return lr_min + 0.5 * (lr_peak - lr_min) * (1.0 + math.cos(math.pi * progress))
