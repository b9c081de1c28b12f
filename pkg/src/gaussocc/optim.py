"""Adam with per-group learning rates and cosine decay."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


@dataclass
class AdamConfig:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    lr_geometry: float = 1e-2  # positions, offsets, scales, rotations, velocities
    lr_logits: float = 1e-1  # opacity, class and colour logits
    total_steps: int = 1000
    final_lr_fraction: float = 0.05


def cosine_factor(step: int, total: int, final_fraction: float) -> float:
    """Multiplier on the base rate: 1 at step 0, `final_fraction` at `total`."""
    if total <= 0:
        return 1.0
    p = min(step, total) / total
    return final_fraction + (1.0 - final_fraction) * 0.5 * (1.0 + math.cos(math.pi * p))


@dataclass
class OptimizerState:
    """Bias-corrected Adam moments, keyed by parameter name."""

    cfg: AdamConfig
    lrs: dict  # name -> base learning rate
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0

    def lr(self, name: str) -> float:
        return self.lrs[name] * cosine_factor(self.step, self.cfg.total_steps, self.cfg.final_lr_fraction)

    def update(self, params: dict, grads: dict) -> None:
        """In-place Adam step on every array in `params` that has a gradient."""
        self.step += 1
        b1, b2 = self.cfg.beta1, self.cfg.beta2
        c1 = 1.0 - b1**self.step
        c2 = 1.0 - b2**self.step
        # the schedule uses the pre-increment step so the first update runs at full rate
        sched = cosine_factor(self.step - 1, self.cfg.total_steps, self.cfg.final_lr_fraction)
        for name, g in grads.items():
            if name not in params or params[name] is None or name not in self.lrs:
                continue
            g = np.asarray(g, dtype=np.float64)
            if not np.all(np.isfinite(g)):
                raise FloatingPointError(f"non-finite gradient for {name}")
            m = self.m.get(name)
            if m is None or m.shape != g.shape:
                m = np.zeros_like(g)
                self.v[name] = np.zeros_like(g)
            v = self.v[name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            self.m[name] = m
            params[name] -= (self.lrs[name] * sched) * (m / c1) / (np.sqrt(v / c2) + self.cfg.eps)

    def reset(self, name: str, index=None):
        """Forget the moments of `name` (optionally only rows `index`)."""
        if name not in self.m:
            return
        if index is None:
            del self.m[name]
            del self.v[name]
        else:
            self.m[name][index] = 0.0
            self.v[name][index] = 0.0


def make_optimizer(cfg: AdamConfig, names, logit_names=("opacity_logits", "class_logits", "child_opacity_logits", "child_color_logits"), overrides=None) -> OptimizerState:
    lrs = {n: (cfg.lr_logits if n in logit_names else cfg.lr_geometry) for n in names}
    lrs.update(overrides or {})
    return OptimizerState(cfg, lrs)
