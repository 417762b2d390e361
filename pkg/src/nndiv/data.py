"""Sample sets, file ingestion, and synthetic ground-truth distributions.

A SampleSet is an immutable stack of equally-shaped float32 tensors with a
content digest. Synthetic models provide both the "true" distribution p and
stand-in models q for the experiments: a Gaussian mixture for vector data,
a procedural renderer of anti-aliased rectangles/ellipses for image data
(continuous parameters, so its support is effectively unbounded), a
perturbation wrapper that jitters a base model's latent parameters, and an
empirical wrapper that memorizes a finite set. All sampling is counter
based: draw i depends only on (model, seed, i).
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import rng
from .nn import ConfigError


class DataError(ValueError):
    """Malformed data file or inconsistent sample inputs."""


@dataclass(frozen=True)
class SampleSet:
    """N tensors of one shared shape, immutable after construction."""

    elements: np.ndarray  # (N, ...) float32
    provenance: str = ""
    fingerprint: str = field(default="", compare=False)

    def __post_init__(self):
        arr = np.ascontiguousarray(self.elements, dtype=np.float32)
        if arr.ndim < 1 or arr.shape[0] < 1:
            raise DataError(f"sample set must hold at least one element, got shape {arr.shape}")
        arr.flags.writeable = False
        object.__setattr__(self, "elements", arr)
        object.__setattr__(self, "fingerprint", _fingerprint(arr))

    def __len__(self) -> int:
        return self.elements.shape[0]

    @property
    def element_shape(self) -> tuple[int, ...]:
        return self.elements.shape[1:]


def _fingerprint(arr: np.ndarray) -> str:
    h = hashlib.sha256()
    h.update(struct.pack("<I", arr.ndim))
    h.update(struct.pack(f"<{arr.ndim}I", *arr.shape))
    h.update(arr.astype("<f4").tobytes())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# synthetic models

MODEL_KINDS = ("gaussian_mixture", "shapes_image", "perturbed", "empirical")

SHAPES_DEFAULTS = {
    "height": 8, "width": 8, "channels": 1,
    "center_low": 0.3, "center_high": 0.7,
    "radius_low": 0.15, "radius_high": 0.35,
    "intensity_low": 0.5, "intensity_high": 1.0,
    "ellipse_prob": 0.5,
}


@dataclass(frozen=True)
class SyntheticModel:
    """A parameterized samplable distribution."""

    kind: str
    params: dict = field(default_factory=dict)
    seed: int = 0
    base: Optional["SyntheticModel"] = None  # perturbed only
    backing: Optional[SampleSet] = None      # empirical only

    def __post_init__(self):
        if self.kind not in MODEL_KINDS:
            raise ConfigError(f"unknown model kind {self.kind!r}; expected one of {MODEL_KINDS}")
        if self.kind == "perturbed" and self.base is None:
            raise ConfigError("perturbed model requires a base model")
        if self.kind == "empirical" and self.backing is None:
            raise ConfigError("empirical model requires a backing sample set")
        if self.kind == "gaussian_mixture":
            means = np.asarray(self.params["means"], dtype=np.float64)
            stds = np.asarray(self.params["stds"], dtype=np.float64)
            weights = np.asarray(self.params.get("weights", np.ones(len(means))), dtype=np.float64)
            if means.ndim != 2 or stds.shape != means.shape or len(weights) != len(means):
                raise ConfigError(f"gaussian_mixture: means {means.shape}, stds {stds.shape}, "
                                  f"weights {weights.shape} are inconsistent")
            if np.any(weights < 0) or weights.sum() == 0:
                raise ConfigError("gaussian_mixture: weights must be nonnegative and not all zero")
        if self.kind == "shapes_image":
            merged = dict(SHAPES_DEFAULTS)
            unknown = set(self.params) - set(SHAPES_DEFAULTS)
            if unknown:
                raise ConfigError(f"shapes_image: unknown params {sorted(unknown)}")
            merged.update(self.params)
            object.__setattr__(self, "params", merged)

    def element_shape(self) -> tuple[int, ...]:
        if self.kind == "gaussian_mixture":
            return (np.asarray(self.params["means"]).shape[1],)
        if self.kind == "shapes_image":
            p = self.params
            return (p["height"], p["width"], p["channels"])
        if self.kind == "perturbed":
            return self.base.element_shape()
        return self.backing.element_shape


def _shapes_latents(model: SyntheticModel, key: int, indices: np.ndarray) -> np.ndarray:
    # columns: kind, cx, cy, rx, ry, intensity
    return np.stack([rng.uniform(key, indices, slot) for slot in range(6)], axis=1)


def _shapes_render(model: SyntheticModel, lat: np.ndarray) -> np.ndarray:
    p = model.params
    h, w, c = p["height"], p["width"], p["channels"]
    n = lat.shape[0]

    def span(col, low, high):
        return (low + (high - low) * lat[:, col])[:, None, None]

    is_ellipse = (lat[:, 0] < p["ellipse_prob"])[:, None, None]
    cx = span(1, p["center_low"], p["center_high"])
    cy = span(2, p["center_low"], p["center_high"])
    rx = span(3, p["radius_low"], p["radius_high"])
    ry = span(4, p["radius_low"], p["radius_high"])
    amp = span(5, p["intensity_low"], p["intensity_high"])

    py, px = np.meshgrid((np.arange(h) + 0.5) / h, (np.arange(w) + 0.5) / w, indexing="ij")
    px = px[None, :, :]
    py = py[None, :, :]

    # signed distances in pixel units, ~1px anti-aliasing ramp
    d_ell = np.sqrt(((px - cx) / rx) ** 2 + ((py - cy) / ry) ** 2)
    cov_ell = np.clip(0.5 - (d_ell - 1.0) * np.minimum(rx, ry) * min(h, w), 0.0, 1.0)
    covx = np.clip(0.5 - (np.abs(px - cx) - rx) * w, 0.0, 1.0)
    covy = np.clip(0.5 - (np.abs(py - cy) - ry) * h, 0.0, 1.0)
    cov_rect = covx * covy

    coverage = np.where(is_ellipse, cov_ell, cov_rect)
    img = -1.0 + 2.0 * amp * coverage  # pixel range [-1, 1]
    img = np.repeat(img[:, :, :, None], c, axis=3)
    return img.astype(np.float32).reshape(n, h, w, c)


def _gm_arrays(model: SyntheticModel):
    means = np.asarray(model.params["means"], dtype=np.float64)
    stds = np.asarray(model.params["stds"], dtype=np.float64)
    weights = np.asarray(model.params.get("weights", np.ones(len(means))), dtype=np.float64)
    return means, stds, weights / weights.sum()


def _gm_latents(model: SyntheticModel, key: int, indices: np.ndarray) -> np.ndarray:
    means, _, _ = _gm_arrays(model)
    d = means.shape[1]
    cols = [rng.uniform(key, indices, 0)]  # component selector
    cols += [rng.normal(key, indices, 1 + j) for j in range(d)]
    return np.stack(cols, axis=1)


def _gm_render(model: SyntheticModel, lat: np.ndarray) -> np.ndarray:
    means, stds, weights = _gm_arrays(model)
    edges = np.cumsum(weights)
    comp = np.searchsorted(edges, np.clip(lat[:, 0], 0.0, 1.0 - 1e-12), side="right")
    comp = np.minimum(comp, len(weights) - 1)
    x = means[comp] + stds[comp] * lat[:, 1:]
    return x.astype(np.float32)


def _latents(model: SyntheticModel, key: int, indices: np.ndarray) -> np.ndarray:
    if model.kind == "shapes_image":
        return _shapes_latents(model, key, indices)
    if model.kind == "gaussian_mixture":
        return _gm_latents(model, key, indices)
    raise ConfigError(f"model kind {model.kind!r} has no latent space")


def _render(model: SyntheticModel, lat: np.ndarray) -> np.ndarray:
    if model.kind == "shapes_image":
        return _shapes_render(model, lat)
    return _gm_render(model, lat)


def _uniform_latent_columns(model: SyntheticModel) -> list[int]:
    """Latent columns that live on [0,1] and must be clipped after jitter."""
    if model.kind == "shapes_image":
        return list(range(6))
    return [0]


def _draw(model: SyntheticModel, seed: int, indices: np.ndarray) -> np.ndarray:
    if model.kind == "empirical":
        key = rng.derive_key(seed, "sample", "empirical", model.seed)
        picks = rng.integers(key, indices, len(model.backing))
        return model.backing.elements[picks]
    if model.kind == "perturbed":
        base = model.base
        while base.kind == "perturbed":  # jitter applies to the innermost latent space
            base = base.base
        lat = _latents(base, rng.derive_key(seed, "sample", base.kind, base.seed), indices)
        sigma = float(model.params.get("sigma", 0.0))
        pkey = rng.derive_key(seed, "perturb", model.seed)
        jitter = np.stack([rng.normal(pkey, indices, slot) for slot in range(lat.shape[1])], axis=1)
        lat = lat + sigma * jitter
        ucols = _uniform_latent_columns(base)
        lat[:, ucols] = np.clip(lat[:, ucols], 0.0, 1.0 - 1e-12)
        return _render(base, lat)
    key = rng.derive_key(seed, "sample", model.kind, model.seed)
    return _render(model, _latents(model, key, indices))


def sample(model: SyntheticModel, n: int, seed: int) -> SampleSet:
    """n i.i.d. draws; the empirical kind resamples its backing set."""
    if n < 1:
        raise ConfigError(f"sample size must be >= 1, got {n}")
    data = _draw(model, seed, np.arange(n, dtype=np.uint64))
    return SampleSet(data, provenance=f"{model.kind}(seed={seed}, n={n})")


def sample_labels(model: SyntheticModel, n: int, seed: int) -> tuple[SampleSet, np.ndarray]:
    """Draws plus class labels (shape kind / mixture component)."""
    if model.kind not in ("shapes_image", "gaussian_mixture"):
        raise ConfigError(f"labels are only defined for generative kinds, not {model.kind!r}")
    indices = np.arange(n, dtype=np.uint64)
    key = rng.derive_key(seed, "sample", model.kind, model.seed)
    lat = _latents(model, key, indices)
    data = _render(model, lat)
    if model.kind == "shapes_image":
        labels = (lat[:, 0] < model.params["ellipse_prob"]).astype(np.int64)
    else:
        _, _, weights = _gm_arrays(model)
        edges = np.cumsum(weights)
        labels = np.searchsorted(edges, np.clip(lat[:, 0], 0.0, 1.0 - 1e-12), side="right")
        labels = np.minimum(labels, len(weights) - 1).astype(np.int64)
    return SampleSet(data, provenance=f"{model.kind}(seed={seed}, n={n})"), labels


def subset(sample_set: SampleSet, n: int, seed: int) -> SampleSet:
    """Uniform without-replacement subset, deterministic given seed."""
    total = len(sample_set)
    if not 1 <= n <= total:
        raise ConfigError(f"subset size {n} outside [1, {total}]")
    order = rng.permutation(rng.derive_key(seed, "subset"), total)
    picked = sample_set.elements[order[:n]]
    return SampleSet(picked, provenance=f"subset(n={n}, seed={seed}) of {sample_set.provenance}")


# ---------------------------------------------------------------------------
# NNDS sample-set files: magic "NNDS", version u32, rank u32, dims u32 each
# (first dim = N), f32 little-endian payload. Integers little-endian.

NNDS_MAGIC = b"NNDS"
NNDS_VERSION = 1


def save_nnds(path, sample_set: SampleSet) -> None:
    arr = sample_set.elements
    with open(path, "wb") as fh:
        fh.write(NNDS_MAGIC)
        fh.write(struct.pack("<II", NNDS_VERSION, arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        fh.write(arr.astype("<f4").tobytes())


def load_nnds(path) -> SampleSet:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != NNDS_MAGIC:
        raise DataError(f"{path}: bad magic {blob[:4]!r} at offset 0, expected {NNDS_MAGIC!r}")
    if len(blob) < 12:
        raise DataError(f"{path}: truncated header, {len(blob)} bytes < 12")
    version, ndim = struct.unpack_from("<II", blob, 4)
    if version != NNDS_VERSION:
        raise DataError(f"{path}: unsupported version {version} at offset 4")
    offset = 12
    if len(blob) < offset + 4 * ndim:
        raise DataError(f"{path}: truncated dims at offset {offset}")
    dims = struct.unpack_from(f"<{ndim}I", blob, offset)
    offset += 4 * ndim
    expected = 4 * int(np.prod(dims, dtype=np.int64))
    actual = len(blob) - offset
    if actual != expected:
        raise DataError(f"{path}: payload at offset {offset} has {actual} bytes, "
                        f"expected {expected}")
    data = np.frombuffer(blob, dtype="<f4", offset=offset).reshape(dims)
    return SampleSet(data.copy(), provenance=str(path))


# ---------------------------------------------------------------------------
# IDX (MNIST-style) ingestion: big-endian headers, u8 payload.

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801


def load_idx(images_path, labels_path=None) -> tuple[SampleSet, np.ndarray | None]:
    """u8 rank-3 images scaled to [-1, 1] with a channel dim appended."""
    with open(images_path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 16:
        raise DataError(f"{images_path}: truncated header")
    magic, count, rows, cols = struct.unpack_from(">IIII", blob, 0)
    if magic != IDX_IMAGE_MAGIC:
        raise DataError(f"{images_path}: magic 0x{magic:08x}, expected 0x{IDX_IMAGE_MAGIC:08x}")
    expected = count * rows * cols
    if len(blob) - 16 != expected:
        raise DataError(f"{images_path}: payload {len(blob) - 16} bytes, expected {expected}")
    pixels = np.frombuffer(blob, dtype=np.uint8, offset=16).reshape(count, rows, cols)
    scaled = (pixels.astype(np.float32) / 127.5 - 1.0)[:, :, :, None]
    images = SampleSet(scaled, provenance=f"{images_path} (idx, scaled to [-1,1])")

    labels = None
    if labels_path is not None:
        with open(labels_path, "rb") as fh:
            lblob = fh.read()
        if len(lblob) < 8:
            raise DataError(f"{labels_path}: truncated header")
        lmagic, lcount = struct.unpack_from(">II", lblob, 0)
        if lmagic != IDX_LABEL_MAGIC:
            raise DataError(f"{labels_path}: magic 0x{lmagic:08x}, expected 0x{IDX_LABEL_MAGIC:08x}")
        if lcount != count:
            raise DataError(f"label count {lcount} != image count {count}")
        if len(lblob) - 8 != lcount:
            raise DataError(f"{labels_path}: payload {len(lblob) - 8} bytes, expected {lcount}")
        labels = np.frombuffer(lblob, dtype=np.uint8, offset=8).astype(np.int64)
    return images, labels


# ---------------------------------------------------------------------------
# JSON descriptions of synthetic models (used by experiment configs)


def model_from_json(obj: dict) -> SyntheticModel:
    required = {"kind", "params", "seed"}
    keys = set(obj) - {"base"}
    if keys != required:
        raise ConfigError(f"model keys: unknown {sorted(keys - required)}, "
                          f"missing {sorted(required - keys)}")
    kind = obj["kind"]
    if kind == "empirical":
        raise ConfigError("empirical models are constructed by the harness, not configs")
    base = None
    if kind == "perturbed":
        if "base" not in obj:
            raise ConfigError("perturbed model requires a 'base' entry")
        base = model_from_json(obj["base"])
    return SyntheticModel(kind=kind, params=dict(obj["params"]), seed=int(obj["seed"]), base=base)


def model_to_json(model: SyntheticModel) -> dict:
    if model.kind == "empirical":
        raise ConfigError("empirical models have no JSON form")
    out = {"kind": model.kind, "params": dict(model.params), "seed": model.seed}
    if model.base is not None:
        out["base"] = model_to_json(model.base)
    return out
