"""Moment-matching and classifier-based baseline metrics.

Frechet distance between Gaussian fits of feature-mapped samples, and a
classifier-score metric (expected KL between the label conditional and the
label marginal). Feature extractors are pluggable: raw values (identity), a
seeded randomly-initialized conv stack, or the trunk of a trained
classifier. The symmetric matrix square root is computed with a cyclic
Jacobi eigendecomposition; all linear algebra here runs in float64.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np

from . import rng
from . import tensor as T
from .data import SampleSet
from .nn import (ConfigError, conv_trunk, conv_trunk_dims, init_named_tensors,
                 load_checkpoint, save_checkpoint)
from .optim import AdamState, TrainSpec, adam_step
from .tensor import Tensor, UsageError

SYMMETRY_TOL = 1e-6
PSD_EIG_TOL = -1e-6
JACOBI_OFF_TOL = 1e-10
KL_FLOOR = 1e-12
IS_SPLITS = 10


@dataclass(frozen=True)
class GaussianMoments:
    """Mean vector and covariance matrix of a feature-mapped sample."""

    mu: np.ndarray
    sigma: np.ndarray

    def __post_init__(self):
        mu = np.asarray(self.mu, dtype=np.float64)
        sigma = np.asarray(self.sigma, dtype=np.float64)
        if mu.ndim != 1 or sigma.shape != (mu.size, mu.size):
            raise ConfigError(f"moments: mu {mu.shape} incompatible with sigma {sigma.shape}")
        if np.max(np.abs(sigma - sigma.T), initial=0.0) > SYMMETRY_TOL:
            raise ConfigError("covariance is asymmetric beyond tolerance")
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "sigma", sigma)

    @property
    def dim(self) -> int:
        return self.mu.size


def moments(features: np.ndarray) -> GaussianMoments:
    """Sample mean and (N-1)-denominator covariance, symmetrized."""
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2:
        raise ConfigError(f"moments needs an (N, d) array with N >= 2, got {x.shape}")
    mu = x.mean(axis=0)
    centered = x - mu
    sigma = centered.T @ centered / (x.shape[0] - 1)
    return GaussianMoments(mu, (sigma + sigma.T) / 2.0)


# ---------------------------------------------------------------------------
# symmetric eigendecomposition and matrix square roots


def jacobi_eigh(matrix: np.ndarray, off_tol: float = JACOBI_OFF_TOL,
                max_sweeps: int = 60) -> tuple[np.ndarray, np.ndarray]:
    """Cyclic Jacobi rotations. Returns (eigenvalues, eigenvectors as columns)."""
    a = np.array(matrix, dtype=np.float64)
    n = a.shape[0]
    if a.shape != (n, n):
        raise ConfigError(f"jacobi_eigh: square matrix required, got {a.shape}")
    if np.max(np.abs(a - a.T), initial=0.0) > SYMMETRY_TOL:
        raise ConfigError("jacobi_eigh: asymmetry beyond tolerance")
    v = np.eye(n)
    if n == 1:
        return np.array([a[0, 0]]), v
    # round-off floor: below this the off-diagonal mass cannot shrink further
    floor = 8 * np.finfo(np.float64).eps * n * max(np.linalg.norm(a), 1.0)
    threshold = max(off_tol, floor)

    def off_norm() -> float:
        mask = ~np.eye(n, dtype=bool)
        return float(np.sqrt(np.sum(a[mask] ** 2)))

    for _ in range(max_sweeps):
        if off_norm() < threshold:
            return np.diag(a).copy(), v
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                diff = a[q, q] - a[p, p]
                if apq == 0.0:
                    continue
                if abs(apq) < 1e-300:  # rotation would underflow; element is dead
                    a[p, q] = a[q, p] = 0.0
                    continue
                if abs(apq) < abs(diff) * 1e-36:
                    t = apq / diff  # tan of a vanishing angle, overflow-safe
                else:
                    theta = diff / (2.0 * apq)
                    t = 1.0 / (abs(theta) + np.sqrt(theta * theta + 1.0))
                    if theta < 0.0:
                        t = -t
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c
                col_p = a[:, p].copy()
                col_q = a[:, q].copy()
                a[:, p] = c * col_p - s * col_q
                a[:, q] = s * col_p + c * col_q
                row_p = a[p, :].copy()
                row_q = a[q, :].copy()
                a[p, :] = c * row_p - s * row_q
                a[q, :] = s * row_p + c * row_q
                a[p, q] = a[q, p] = 0.0  # the rotation zeroes this pair exactly
                vec_p = v[:, p].copy()
                vec_q = v[:, q].copy()
                v[:, p] = c * vec_p - s * vec_q
                v[:, q] = s * vec_p + c * vec_q
    if off_norm() < threshold:
        return np.diag(a).copy(), v
    raise ArithmeticError(
        f"jacobi_eigh did not converge: off-norm {off_norm():g} after {max_sweeps} sweeps")


def _psd_sqrt(matrix: np.ndarray) -> np.ndarray:
    """Symmetric PSD square root; slightly negative eigenvalues clamped to 0."""
    evals, evecs = jacobi_eigh(matrix)
    scale = max(np.max(np.abs(evals), initial=0.0), 1.0)
    if np.min(evals, initial=0.0) < PSD_EIG_TOL * scale:
        raise ConfigError(f"matrix is not PSD: min eigenvalue {np.min(evals):g}")
    root = np.sqrt(np.clip(evals, 0.0, None))
    return (evecs * root) @ evecs.T


def sqrtm_product(sigma_p: np.ndarray, sigma_q: np.ndarray) -> np.ndarray:
    """Root of the symmetrized product: (sigma_p^1/2 sigma_q sigma_p^1/2)^1/2.

    Its trace equals Tr((sigma_p sigma_q)^1/2), which is the only way the
    product root enters the Frechet distance.
    """
    sigma_p = np.asarray(sigma_p, dtype=np.float64)
    sigma_q = np.asarray(sigma_q, dtype=np.float64)
    for name, m in (("sigma_p", sigma_p), ("sigma_q", sigma_q)):
        if np.max(np.abs(m - m.T), initial=0.0) > SYMMETRY_TOL:
            raise ConfigError(f"{name} is asymmetric beyond tolerance")
    root_p = _psd_sqrt(sigma_p)
    inner = root_p @ sigma_q @ root_p
    return _psd_sqrt((inner + inner.T) / 2.0)


def frechet_distance(a: GaussianMoments, b: GaussianMoments) -> float:
    """||mu_a - mu_b||^2 + Tr(sigma_a + sigma_b - 2 (sigma_a sigma_b)^1/2)."""
    if a.dim != b.dim:
        raise ConfigError(f"moment dimensions differ: {a.dim} vs {b.dim}")
    diff = a.mu - b.mu
    tr_root = np.trace(sqrtm_product(a.sigma, b.sigma))
    value = float(diff @ diff + np.trace(a.sigma) + np.trace(b.sigma) - 2.0 * tr_root)
    return max(value, 0.0)  # round-off can push an exact zero slightly negative


# ---------------------------------------------------------------------------
# classifier score


@dataclass(frozen=True)
class ClassifierOutput:
    """Per-example label distributions p(y|x) over K classes."""

    probs: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.probs, dtype=np.float64)
        if p.ndim != 2 or p.shape[0] < 1:
            raise ConfigError(f"classifier output must be (N, K), got {p.shape}")
        if np.any(p < 0.0):
            raise ConfigError("classifier probabilities must be nonnegative")
        sums = p.sum(axis=1)
        if np.max(np.abs(sums - 1.0)) > 1e-5:
            raise ConfigError(f"rows must sum to 1 within 1e-5, worst {np.max(np.abs(sums - 1.0)):g}")
        object.__setattr__(self, "probs", p)

    def marginal(self) -> np.ndarray:
        return self.probs.mean(axis=0)


class IsScore(NamedTuple):
    value: float
    exponentiated: bool


def inception_style_score(outputs: ClassifierOutput, exponentiated: bool = False) -> IsScore:
    """Mean KL(p(y|x) || p(y)) in nats, averaged over 10 equal splits.

    Samples smaller than the split count are scored as a single split. With
    `exponentiated`, each split contributes exp(mean KL), matching the
    conventional scale of published classifier scores.
    """
    p = outputs.probs
    n_splits = IS_SPLITS if p.shape[0] >= IS_SPLITS else 1
    split_scores = []
    for chunk in np.array_split(p, n_splits):
        marginal = np.maximum(chunk.mean(axis=0), KL_FLOOR)
        cond = np.maximum(chunk, KL_FLOOR)
        kl_rows = np.sum(chunk * (np.log(cond) - np.log(marginal)), axis=1)
        score = float(np.mean(kl_rows))
        split_scores.append(np.exp(score) if exponentiated else score)
    return IsScore(float(np.mean(split_scores)), exponentiated)


def is_divergence(score_p: IsScore, score_q: IsScore) -> float:
    """Absolute difference of two classifier scores of the same variant."""
    if score_p.exponentiated != score_q.exponentiated:
        raise UsageError("classifier scores use different variants "
                         f"(exponentiated={score_p.exponentiated} vs {score_q.exponentiated})")
    return abs(score_p.value - score_q.value)


# ---------------------------------------------------------------------------
# feature extractors

EXTRACTOR_KINDS = ("identity", "seeded_random_cnn", "trained_classifier_features")


@dataclass(frozen=True)
class FeatureExtractor:
    """A deterministic map from samples to (N, d) feature rows."""

    kind: str
    input_shape: tuple[int, ...]
    channel_multiplier: float = 1.0
    seed: int | None = None
    n_classes: int | None = None
    tensors: dict | None = None  # conv trunk (+ "head/*" for classifiers)

    def __post_init__(self):
        if self.kind not in EXTRACTOR_KINDS:
            raise ConfigError(f"extractor kind must be one of {EXTRACTOR_KINDS}, got {self.kind!r}")
        object.__setattr__(self, "input_shape", tuple(int(d) for d in self.input_shape))

    @property
    def output_dim(self) -> int:
        if self.kind == "identity":
            return int(np.prod(self.input_shape))
        return conv_trunk_dims(self.input_shape, self.channel_multiplier)[1]


def build_random_extractor(input_shape, channel_multiplier: float, seed: int) -> FeatureExtractor:
    dims, _ = conv_trunk_dims(tuple(input_shape), channel_multiplier)
    tensors = init_named_tensors(dims, rng.derive_key(seed, "extractor"))
    return FeatureExtractor("seeded_random_cnn", tuple(input_shape),
                            channel_multiplier, seed=seed, tensors=tensors)


def extract_features(extractor: FeatureExtractor, samples: SampleSet) -> np.ndarray:
    """(N, d) float64 feature rows for every element of the sample set."""
    if samples.element_shape != extractor.input_shape and extractor.kind != "identity":
        raise ConfigError(f"sample shape {samples.element_shape} does not match "
                          f"extractor input {extractor.input_shape}")
    if extractor.kind == "identity":
        return samples.elements.reshape(len(samples), -1).astype(np.float64)
    rows = []
    with T.no_grad():
        for start in range(0, len(samples), 256):
            batch = Tensor(samples.elements[start:start + 256])
            rows.append(conv_trunk(extractor.tensors, batch).data)
    return np.concatenate(rows, axis=0).astype(np.float64)


def fid(real: SampleSet, model: SampleSet, extractor: FeatureExtractor) -> float:
    return frechet_distance(moments(extract_features(extractor, real)),
                            moments(extract_features(extractor, model)))


# ---------------------------------------------------------------------------
# the small softmax classifier behind the IS-style score


def _classifier_logits(tensors: dict, batch: Tensor) -> Tensor:
    feats = conv_trunk(tensors, batch)
    return T.add(T.matmul(feats, tensors["head/weight"]), tensors["head/bias"])


def classifier_probs(classifier: FeatureExtractor, samples: SampleSet) -> ClassifierOutput:
    if classifier.kind != "trained_classifier_features":
        raise ConfigError(f"classifier_probs needs a trained classifier, got {classifier.kind!r}")
    rows = []
    with T.no_grad():
        for start in range(0, len(samples), 256):
            logits = _classifier_logits(classifier.tensors,
                                        Tensor(samples.elements[start:start + 256])).data
            z = logits.astype(np.float64)
            z -= z.max(axis=1, keepdims=True)
            e = np.exp(z)
            rows.append(e / e.sum(axis=1, keepdims=True))
    return ClassifierOutput(np.concatenate(rows, axis=0))


def train_classifier(images: SampleSet, labels: np.ndarray, n_classes: int,
                     channel_multiplier: float = 0.25, iterations: int = 600,
                     batch_size: int = 64, lr: float = 1e-3, seed: int = 0) -> FeatureExtractor:
    """Fit the small softmax CNN by cross-entropy; returns the usable classifier."""
    labels = np.asarray(labels, dtype=np.int64)
    if len(labels) != len(images):
        raise ConfigError(f"label count {len(labels)} != image count {len(images)}")
    dims, flat = conv_trunk_dims(images.element_shape, channel_multiplier)
    dims = dims + [("head/weight", (flat, n_classes), flat), ("head/bias", (n_classes,), flat)]
    tensors = init_named_tensors(dims, rng.derive_key(seed, "classifier"))
    spec = TrainSpec(iterations=iterations, batch_size=batch_size, base_lr=lr,
                     lr_schedule="constant", adam_beta1=0.9, adam_beta2=0.999,
                     gp_lambda=0.0, seed=seed)
    adam = AdamState.init(tensors)
    key = rng.derive_key(seed, "classifier_batches")
    names = list(tensors)
    onehot = np.eye(n_classes, dtype=np.float32)
    for it in range(iterations):
        counters = np.uint64(it) * np.uint64(batch_size) + np.arange(batch_size, dtype=np.uint64)
        idx = rng.integers(key, counters, len(images))
        batch = Tensor(images.elements[idx])
        logits = _classifier_logits(tensors, batch)
        # constant shift for stability; gradients are unchanged by it
        shifted = T.sub(logits, Tensor(logits.data.max(axis=1, keepdims=True)))
        log_z = T.log(T.reduce_sum(T.exp(shifted), axis=1, keepdims=True))
        log_probs = T.sub(shifted, log_z)
        picked = T.reduce_sum(T.mul(log_probs, Tensor(onehot[labels[idx]])), axis=1)
        loss = T.neg(T.mean(picked))
        grads = T.grad(loss, list(tensors.values()))
        adam_step(adam, tensors, {n: g.data for n, g in zip(names, grads)}, lr, spec)
    return FeatureExtractor("trained_classifier_features", images.element_shape,
                            channel_multiplier, seed=seed, n_classes=n_classes,
                            tensors=tensors)


def classifier_trunk_extractor(classifier: FeatureExtractor) -> FeatureExtractor:
    """Penultimate-layer features of a trained classifier, for Frechet use."""
    trunk = {name: t for name, t in classifier.tensors.items() if not name.startswith("head/")}
    return FeatureExtractor("trained_classifier_features", classifier.input_shape,
                            classifier.channel_multiplier, seed=classifier.seed,
                            n_classes=classifier.n_classes, tensors=trunk)


# ---------------------------------------------------------------------------
# extractor descriptors: a JSON file next to an NNDW checkpoint

DESCRIPTOR_VERSION = 1


def save_extractor(json_path, extractor: FeatureExtractor) -> None:
    json_path = Path(json_path)
    desc = {
        "format_version": DESCRIPTOR_VERSION,
        "kind": extractor.kind,
        "input_shape": list(extractor.input_shape),
        "channel_multiplier": extractor.channel_multiplier,
        "seed": extractor.seed,
        "n_classes": extractor.n_classes,
        "checkpoint": None,
    }
    if extractor.kind != "identity":
        ckpt = json_path.with_suffix(".nndw")
        save_checkpoint(ckpt, {name: t.data for name, t in extractor.tensors.items()})
        desc["checkpoint"] = ckpt.name
    json_path.write_text(json.dumps(desc, indent=2, sort_keys=True) + "\n")


def load_extractor(json_path) -> FeatureExtractor:
    json_path = Path(json_path)
    desc = json.loads(json_path.read_text())
    required = {"format_version", "kind", "input_shape", "channel_multiplier",
                "seed", "n_classes", "checkpoint"}
    if set(desc) != required:
        raise ConfigError(f"extractor descriptor keys: unknown {sorted(set(desc) - required)}, "
                          f"missing {sorted(required - set(desc))}")
    if desc["format_version"] != DESCRIPTOR_VERSION:
        raise ConfigError(f"extractor descriptor version {desc['format_version']} unsupported")
    kind = desc["kind"]
    input_shape = tuple(desc["input_shape"])
    if kind == "identity":
        return FeatureExtractor("identity", input_shape)
    tensors = None
    if desc["checkpoint"] is not None:
        arrays = load_checkpoint(json_path.parent / desc["checkpoint"])
        tensors = {name: Tensor(arr, requires_grad=False) for name, arr in arrays.items()}
    elif kind == "seeded_random_cnn":
        return build_random_extractor(input_shape, float(desc["channel_multiplier"]),
                                      int(desc["seed"]))
    else:
        raise ConfigError("trained_classifier_features requires a checkpoint")
    return FeatureExtractor(kind, input_shape, float(desc["channel_multiplier"]),
                            seed=desc["seed"], n_classes=desc["n_classes"], tensors=tensors)
