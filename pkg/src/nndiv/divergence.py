"""Neural-network divergence between two sample sets.

Trains a critic to tell the two sets apart under the gradient-penalty
Wasserstein objective and reports the resulting separation. The reported
value is the difference of critic means (penalty excluded; a variant with
the penalty subtracted is recorded alongside), evaluated with the
exponential moving average of the critic weights over one full pass of
each input set.
"""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import dataclass, field

import numpy as np

from . import rng
from . import tensor as T
from .data import SampleSet
from .nn import (ConfigError, CriticParams, CriticSpec, EmaState, build_critic,
                 critic_forward, ema_update)
from .optim import AdamState, TrainSpec, adam_step, lr_at
from .tensor import Tensor, UsageError

REPORT_FORMAT_VERSION = 1
LOG_STRIDE = 100

OBJECTIVE_KINDS = ("wgan_gp",)


class NumericalError(ArithmeticError):
    """Training produced a non-finite loss; carries the iteration index."""

    def __init__(self, message: str, iteration: int):
        super().__init__(message)
        self.iteration = iteration


@dataclass(frozen=True)
class Objective:
    """Critic objective selector (extension point for other losses)."""

    kind: str = "wgan_gp"

    def __post_init__(self):
        if self.kind not in OBJECTIVE_KINDS:
            raise ConfigError(f"objective kind must be one of {OBJECTIVE_KINDS}, got {self.kind!r}")

    def to_json(self) -> dict:
        return {"kind": self.kind}

    @classmethod
    def from_json(cls, obj: dict) -> "Objective":
        if set(obj) != {"kind"}:
            raise ConfigError(f"objective keys must be exactly ['kind'], got {sorted(obj)}")
        return cls(kind=obj["kind"])


def canonical_json_bytes(obj) -> bytes:
    """Key-sorted, whitespace-free JSON; the byte form behind every digest."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def config_hash(critic: CriticSpec, train: TrainSpec, objective: Objective) -> str:
    payload = {
        "format_version": REPORT_FORMAT_VERSION,
        "critic_spec": critic.to_json(),
        "train_spec": train.to_json(),
        "objective": objective.to_json(),
    }
    return hashlib.sha256(canonical_json_bytes(payload)).hexdigest()


@dataclass
class DivergenceReport:
    """Scalar estimate plus everything needed to reproduce it."""

    value: float
    value_with_penalty: float
    critic_spec: CriticSpec
    train_spec: TrainSpec
    objective: Objective
    seed: int
    config_hash: str
    loss_curve: list[tuple[int, float]] = field(default_factory=list)
    wall_time: float = 0.0
    sample_fingerprints: dict[str, str] = field(default_factory=dict)
    sample_provenance: dict[str, str] = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "format_version": REPORT_FORMAT_VERSION,
            "value": self.value,
            "value_with_penalty": self.value_with_penalty,
            "critic_spec": self.critic_spec.to_json(),
            "train_spec": self.train_spec.to_json(),
            "objective": self.objective.to_json(),
            "seed": self.seed,
            "config_hash": self.config_hash,
            "loss_curve": [[int(i), float(v)] for i, v in self.loss_curve],
            "wall_time": self.wall_time,
            "sample_fingerprints": dict(self.sample_fingerprints),
            "sample_provenance": dict(self.sample_provenance),
        }

    def canonical_bytes(self) -> bytes:
        """Deterministic byte form; wall_time is measurement, not content."""
        obj = self.to_json()
        del obj["wall_time"]
        return canonical_json_bytes(obj)

    @classmethod
    def from_json(cls, obj: dict) -> "DivergenceReport":
        if obj.get("format_version") != REPORT_FORMAT_VERSION:
            raise ConfigError(f"report format_version {obj.get('format_version')} unsupported")
        return cls(
            value=float(obj["value"]),
            value_with_penalty=float(obj["value_with_penalty"]),
            critic_spec=CriticSpec.from_json(obj["critic_spec"]),
            train_spec=TrainSpec.from_json(obj["train_spec"]),
            objective=Objective.from_json(obj["objective"]),
            seed=int(obj["seed"]),
            config_hash=obj["config_hash"],
            loss_curve=[(int(i), float(v)) for i, v in obj["loss_curve"]],
            wall_time=float(obj.get("wall_time", 0.0)),
            sample_fingerprints=dict(obj["sample_fingerprints"]),
            sample_provenance=dict(obj.get("sample_provenance", {})),
        )


def gradient_penalty(params: CriticParams, real_batch: np.ndarray,
                     model_batch: np.ndarray, seed: int) -> Tensor:
    """Mean squared excess of the critic's input-gradient norm over 1.

    Interpolates each real/model pair at a per-example uniform epsilon
    (shared across all pixels of the example) and penalizes
    (||grad_x f(x_hat)|| - 1)^2. Differentiable w.r.t. the parameters,
    which requires differentiating through the backward pass.
    """
    real_batch = np.asarray(real_batch, dtype=np.float32)
    model_batch = np.asarray(model_batch, dtype=np.float32)
    if real_batch.shape != model_batch.shape:
        raise T.ShapeError(f"gradient_penalty: real {real_batch.shape} vs "
                           f"model {model_batch.shape}")
    n = real_batch.shape[0]
    eps = rng.uniform(rng.derive_key(seed, "gp_eps"), np.arange(n)).astype(np.float32)
    eps = eps.reshape((n,) + (1,) * (real_batch.ndim - 1))
    x_hat = Tensor(eps * real_batch + (1.0 - eps) * model_batch, requires_grad=True)
    f = critic_forward(params, x_hat)
    (gx,) = T.grad(T.reduce_sum(f), [x_hat], create_graph=True)
    norms = T.l2_norm_rows(gx)
    return T.mean(T.square(T.sub(norms, T.const(1.0))))


def training_step(params: CriticParams, ema: EmaState, adam: AdamState,
                  real_batch: np.ndarray, model_batch: np.ndarray,
                  train: TrainSpec) -> float:
    """One critic update: loss, double-backprop gradients, Adam, EMA."""
    iteration = adam.step
    lr = lr_at(train, iteration)
    f_real = critic_forward(params, Tensor(real_batch))
    f_model = critic_forward(params, Tensor(model_batch))
    loss = T.sub(T.mean(f_model), T.mean(f_real))
    if train.gp_lambda > 0.0:
        penalty = gradient_penalty(params, real_batch, model_batch,
                                   rng.derive_key(train.seed, "gp", iteration))
        loss = T.add(loss, T.scale(penalty, train.gp_lambda))
    names = list(params.tensors)
    grads = T.grad(loss, params.values())
    adam_step(adam, params, {n: g.data for n, g in zip(names, grads)}, lr, train)
    ema_update(ema, params)
    return float(loss.data)


def _mean_critic(params: CriticParams, elements: np.ndarray, batch_size: int) -> float:
    total = 0.0
    with T.no_grad():
        for start in range(0, elements.shape[0], batch_size):
            out = critic_forward(params, Tensor(elements[start:start + batch_size]))
            total += float(np.sum(out.data, dtype=np.float64))
    return total / elements.shape[0]


def _eval_penalty(params: CriticParams, real: SampleSet, model: SampleSet,
                  train: TrainSpec) -> float:
    """Penalty under the evaluation weights, over deterministic pairs."""
    n = min(len(real), len(model))
    acc = 0.0
    for start in range(0, n, train.batch_size):
        stop = min(start + train.batch_size, n)
        pen = gradient_penalty(params, real.elements[start:stop],
                               model.elements[start:stop],
                               rng.derive_key(train.seed, "eval_gp", start))
        acc += float(pen.data) * (stop - start)
    return acc / n


def estimate_nnd(real: SampleSet, model: SampleSet, critic: CriticSpec,
                 train: TrainSpec, objective: Objective) -> DivergenceReport:
    """Train a fresh critic to separate the two sets; report the divergence.

    Minibatches are drawn with replacement from each set by a counter-based
    sampler, so sets smaller than the batch size are fine. The final value
    averages the EMA critic over one full pass of each input set.
    """
    if real.element_shape != model.element_shape:
        raise T.ShapeError(f"sample element shapes differ: real {real.element_shape} "
                           f"vs model {model.element_shape}")
    t0 = time.perf_counter()
    params = build_critic(critic, rng.derive_key(train.seed, "critic_init"))
    ema = EmaState.init(params, train.ema_coefficient)
    adam = AdamState.init(params)
    real_key = rng.derive_key(train.seed, "batch_real")
    model_key = rng.derive_key(train.seed, "batch_model")

    batch_ix = np.arange(train.batch_size, dtype=np.uint64)
    loss_curve: list[tuple[int, float]] = []
    for it in range(train.iterations):
        counters = np.uint64(it) * np.uint64(train.batch_size) + batch_ix
        real_batch = real.elements[rng.integers(real_key, counters, len(real))]
        model_batch = model.elements[rng.integers(model_key, counters, len(model))]
        loss = training_step(params, ema, adam, real_batch, model_batch, train)
        if not np.isfinite(loss):
            raise NumericalError(f"non-finite loss {loss} at iteration {it}", iteration=it)
        if (it + 1) % LOG_STRIDE == 0:
            loss_curve.append((it, loss))

    eval_params = params.with_arrays(ema.shadow)
    mean_real = _mean_critic(eval_params, real.elements, train.batch_size)
    mean_model = _mean_critic(eval_params, model.elements, train.batch_size)
    value = mean_real - mean_model
    penalty = _eval_penalty(eval_params, real, model, train) if train.gp_lambda > 0.0 else 0.0
    value_with_penalty = value - train.gp_lambda * penalty

    return DivergenceReport(
        value=value,
        value_with_penalty=value_with_penalty,
        critic_spec=critic,
        train_spec=train,
        objective=objective,
        seed=train.seed,
        config_hash=config_hash(critic, train, objective),
        loss_curve=loss_curve,
        wall_time=time.perf_counter() - t0,
        sample_fingerprints={"real": real.fingerprint, "model": model.fingerprint},
        sample_provenance={"real": real.provenance, "model": model.provenance},
    )


def outperforms_memorization(d_model, d_train_memorizer) -> bool:
    """True iff the model strictly beats memorizing the training set.

    Accepts raw values or full reports; reports must come from identical
    critic/train configurations.
    """
    if isinstance(d_model, DivergenceReport) and isinstance(d_train_memorizer, DivergenceReport):
        if d_model.config_hash != d_train_memorizer.config_hash:
            raise UsageError("cannot compare divergences estimated under different configs: "
                             f"{d_model.config_hash[:12]} vs {d_train_memorizer.config_hash[:12]}")
        return d_model.value < d_train_memorizer.value
    if isinstance(d_model, DivergenceReport) or isinstance(d_train_memorizer, DivergenceReport):
        raise UsageError("compare two reports or two raw values, not a mix")
    return float(d_model) < float(d_train_memorizer)
