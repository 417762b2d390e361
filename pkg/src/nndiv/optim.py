"""Optimizer and learning-rate schedule for critic training.

Adam with beta1=0, beta2=0.9 (the usual gradient-penalty critic settings)
and either a constant or a linear-decay-to-zero schedule. TrainSpec is the
single serialized description of one training run; its JSON form is strict
so that two studies can never silently diverge on a hyperparameter.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields

import numpy as np

from .nn import ConfigError, CriticParams

LR_SCHEDULES = ("constant", "linear_decay_to_zero")


@dataclass(frozen=True)
class TrainSpec:
    """Hyperparameters of one divergence-estimation run."""

    iterations: int = 100_000
    batch_size: int = 256
    base_lr: float = 2e-4
    lr_schedule: str = "linear_decay_to_zero"
    adam_beta1: float = 0.0
    adam_beta2: float = 0.9
    adam_eps: float = 1e-8
    gp_lambda: float = 10.0
    ema_coefficient: float = 0.999
    seed: int = 0

    def __post_init__(self):
        if self.iterations < 1:
            raise ConfigError(f"iterations must be positive, got {self.iterations}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be positive, got {self.batch_size}")
        if self.lr_schedule not in LR_SCHEDULES:
            raise ConfigError(f"lr_schedule must be one of {LR_SCHEDULES}, got {self.lr_schedule!r}")
        if not (0.0 <= self.adam_beta1 < 1.0 and 0.0 <= self.adam_beta2 < 1.0):
            raise ConfigError(f"adam betas must lie in [0,1): {self.adam_beta1}, {self.adam_beta2}")
        if self.adam_eps <= 0.0:
            raise ConfigError(f"adam_eps must be positive, got {self.adam_eps}")
        if self.gp_lambda < 0.0:
            raise ConfigError(f"gp_lambda must be nonnegative, got {self.gp_lambda}")
        if not 0.0 < self.ema_coefficient < 1.0:
            raise ConfigError(f"ema_coefficient must be in (0,1), got {self.ema_coefficient}")

    def to_json(self) -> dict:
        return {
            "iterations": self.iterations,
            "batch_size": self.batch_size,
            "base_lr": self.base_lr,
            "lr_schedule": self.lr_schedule,
            "adam_beta1": self.adam_beta1,
            "adam_beta2": self.adam_beta2,
            "adam_eps": self.adam_eps,
            "gp_lambda": self.gp_lambda,
            "ema_coefficient": self.ema_coefficient,
            "seed": self.seed,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "TrainSpec":
        required = {f.name for f in fields(cls)}
        keys = set(obj)
        if keys != required:
            unknown = sorted(keys - required)
            missing = sorted(required - keys)
            raise ConfigError(f"train_spec keys: unknown {unknown}, missing {missing}")
        return cls(iterations=int(obj["iterations"]), batch_size=int(obj["batch_size"]),
                   base_lr=float(obj["base_lr"]), lr_schedule=obj["lr_schedule"],
                   adam_beta1=float(obj["adam_beta1"]), adam_beta2=float(obj["adam_beta2"]),
                   adam_eps=float(obj["adam_eps"]), gp_lambda=float(obj["gp_lambda"]),
                   ema_coefficient=float(obj["ema_coefficient"]), seed=int(obj["seed"]))


def lr_at(spec: TrainSpec, iteration: int) -> float:
    if not 0 <= iteration < spec.iterations:
        raise ConfigError(f"iteration {iteration} outside [0, {spec.iterations})")
    if spec.lr_schedule == "constant":
        return spec.base_lr
    return spec.base_lr * (1.0 - iteration / spec.iterations)


@dataclass
class AdamState:
    """First/second-moment accumulators plus the step counter."""

    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0

    @classmethod
    def init(cls, params) -> "AdamState":
        state = cls()
        tensors = params.tensors if isinstance(params, CriticParams) else params
        for name, t in tensors.items():
            state.m[name] = np.zeros_like(t.data)
            state.v[name] = np.zeros_like(t.data)
        return state


def adam_step(state: AdamState, params,
              grads: dict[str, np.ndarray], lr: float, spec: TrainSpec) -> None:
    """One bias-corrected update, in place on params and state.

    `params` is a CriticParams or any dict of named parameter tensors.
    """
    if lr < 0.0:
        raise ConfigError(f"learning rate must be nonnegative, got {lr}")
    tensors = params.tensors if isinstance(params, CriticParams) else params
    b1, b2 = np.float32(spec.adam_beta1), np.float32(spec.adam_beta2)
    state.step += 1
    t = state.step
    corr1 = 1.0 - spec.adam_beta1 ** t
    corr2 = 1.0 - spec.adam_beta2 ** t
    for name, p in tensors.items():
        g = grads[name]
        if g.shape != p.data.shape:
            raise ConfigError(f"gradient {name}: shape {g.shape} != {p.data.shape}")
        m, v = state.m[name], state.v[name]
        np.multiply(m, b1, out=m)
        m += (1.0 - b1) * g
        np.multiply(v, b2, out=v)
        v += (1.0 - b2) * (g * g)
        m_hat = m / np.float32(corr1)
        v_hat = v / np.float32(corr2)
        p.data -= np.float32(lr) * m_hat / (np.sqrt(v_hat) + np.float32(spec.adam_eps))
