"""Decoupled-weight-decay Adam, linear warmup/decay schedule, gradient clipping."""

from __future__ import annotations

import numpy as np

from . import kernels


class AdamW:
    """Moment-tracking optimizer over a dict of named arrays.

    Weight decay is decoupled and applied only to matrices (ndim >= 2);
    biases and layer-norm parameters are exempt.
    """

    def __init__(
        self,
        params: dict[str, np.ndarray],
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
        weight_decay: float = 0.0,
    ):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray], lr: float) -> None:
        self.t += 1
        for k in sorted(params):
            wd = self.weight_decay if params[k].ndim >= 2 else 0.0
            kernels.adamw_update(
                params[k], grads[k], self.m[k], self.v[k],
                lr, self.beta1, self.beta2, self.eps, wd, self.t,
            )

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for k, v in self.m.items():
            out[f"m.{k}"] = v
        for k, v in self.v.items():
            out[f"v.{k}"] = v
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray], t: int) -> None:
        self.t = t
        for k in self.m:
            self.m[k] = arrays[f"m.{k}"]
            self.v[k] = arrays[f"v.{k}"]


def lr_at(step: int, total_steps: int, warmup_ratio: float, peak_lr: float) -> float:
    """Linear warmup for ``warmup_ratio`` of steps, then linear decay to 0.

    ``step`` is 1-based; the peak is reached exactly at the last warmup step.
    """
    warmup = max(1, int(round(warmup_ratio * total_steps)))
    if step <= warmup:
        return peak_lr * step / warmup
    if total_steps <= warmup:
        return peak_lr
    return peak_lr * max(0.0, (total_steps - step) / (total_steps - warmup))


def clip_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """Scale all grads so the global L2 norm is at most ``max_norm``."""
    total = 0.0
    for k in sorted(grads):
        g = grads[k]
        total += float((g * g).sum())
    norm = float(np.sqrt(total))
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for k in grads:
            grads[k] *= scale
    return norm
