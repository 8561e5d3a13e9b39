"""SGD with momentum and the step learning-rate schedule."""

import bisect
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .config import TrainConfig
from .errors import CongruenceError
from .model import ParamSet


@dataclass
class VelocityState:
    """One momentum buffer per ParamSet entry, in entry order."""

    buffers: list[np.ndarray]

    @classmethod
    def zeros_like(cls, params: ParamSet) -> "VelocityState":
        return cls([np.zeros_like(e.value) for e in params])

    def __len__(self) -> int:
        return len(self.buffers)


def lr_at(epoch: int, config: TrainConfig) -> float:
    """lr0 · decay_factor^(number of milestones ≤ epoch)."""
    passed = bisect.bisect_right(list(config.milestones), epoch)
    return config.lr0 * config.decay_factor**passed


def sgd_step(
    params: ParamSet,
    grads: ParamSet,
    velocity: VelocityState,
    lr: float,
    momentum: float,
    mask=None,
    weight_decay: float = 0.0,
) -> tuple[ParamSet, VelocityState]:
    """One momentum SGD update: v ← momentum·v + g + weight_decay·w, w ← w − lr·v.

    When `mask` is given, gradients, velocity and weights at masked-out positions are
    forced to exactly zero before and after the update, so nothing leaks into pruned
    coordinates.
    """
    if len(velocity) != len(params):
        raise CongruenceError(f"velocity has {len(velocity)} buffers for {len(params)} entries")
    params.check_congruent(grads)
    keep = mask.as_dict() if mask is not None else {}
    new_values, new_velocity = [], []
    for entry, g_entry, v in zip(params, grads, velocity.buffers):
        if v.shape != entry.value.shape:
            raise CongruenceError(f"velocity for {entry.name} has shape {v.shape}, expected {entry.value.shape}")
        w, g = entry.value, g_entry.value
        m: Optional[np.ndarray] = keep.get(entry.name)
        dtype = w.dtype.type
        if m is not None:
            g = g * m
            v = v * m
            w = w * m
        if weight_decay:
            g = g + dtype(weight_decay) * w
        v = dtype(momentum) * v + g
        w = w - dtype(lr) * v
        if m is not None:
            v = v * m
            w = w * m
        new_values.append(w.astype(entry.value.dtype, copy=False))
        new_velocity.append(v.astype(entry.value.dtype, copy=False))
    return params.with_values(new_values), VelocityState(new_velocity)
