"""Desk-scale reproductions of the qualitative findings.

Five scripted studies over synthetic data: the memorization preference
table, the smallest-memorized-sample-to-beat-a-model sweep, small-vs-large
test-set bias, divergence curves over a schedule of improving models, and
run-to-run variance. Every reported number traces back to a config hash
and, for divergence rows, a full embedded report.
"""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np

from . import rng
from .baselines import (FeatureExtractor, build_random_extractor, classifier_probs,
                        fid, inception_style_score, is_divergence, train_classifier)
from .data import SampleSet, SyntheticModel, model_from_json, sample, sample_labels, subset
from .divergence import (DivergenceReport, Objective, canonical_json_bytes,
                         estimate_nnd)
from .nn import ConfigError, CriticSpec
from .optim import TrainSpec

EXPERIMENT_NAMES = ("memorization", "n-to-win", "bias", "curves", "variance")


# ---------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class NndMetricConfig:
    name: str
    critic_spec: CriticSpec
    train_spec: TrainSpec


@dataclass(frozen=True)
class ClassifierConfig:
    channel_multiplier: float = 0.25
    iterations: int = 600
    batch_size: int = 64
    lr: float = 1e-3
    train_size: int = 1024
    seed: int = 11
    exponentiated: bool = False


@dataclass(frozen=True)
class ExtractorConfig:
    channel_multiplier: float = 0.25
    seed: int = 7


@dataclass(frozen=True)
class CurveConfig:
    checkpoints: int = 4
    sigma_start: float = 0.6
    sigma_end: float = 0.05
    memorize_frac_start: float = 0.0
    memorize_frac_end: float = 0.6
    train_subset_size: int = 512


@dataclass(frozen=True)
class ExperimentConfig:
    p_model: SyntheticModel
    nnd_metrics: tuple[NndMetricConfig, ...]
    q_models: tuple[SyntheticModel, ...] = ()
    train_size: int = 512
    test_size: int = 512
    large_test_size: int = 8192
    model_sample_size: int = 2048
    seeds: tuple[int, ...] = (1, 2, 3)
    n_grid: tuple[int, ...] = (16, 64, 256)
    objective: Objective = field(default_factory=Objective)
    extractor: Optional[ExtractorConfig] = None
    classifier: Optional[ClassifierConfig] = None
    curves: Optional[CurveConfig] = None
    data_seed: int = 0
    variance_repetitions: int = 5

    def __post_init__(self):
        for name in ("train_size", "test_size", "large_test_size", "model_sample_size"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if not self.nnd_metrics:
            raise ConfigError("at least one divergence metric must be configured")
        grid = self.n_grid
        if any(b <= a for a, b in zip(grid, grid[1:])):
            raise ConfigError(f"n_grid must be strictly increasing, got {list(grid)}")
        if any(n > self.train_size for n in grid):
            raise ConfigError(f"n_grid exceeds train_size {self.train_size}: {list(grid)}")
        if self.variance_repetitions < 5:
            raise ConfigError("variance requires at least 5 repetitions")


_CONFIG_KEYS = {
    "format_version", "p_model", "q_models", "nnd_metrics", "train_size",
    "test_size", "large_test_size", "model_sample_size", "seeds", "n_grid",
    "objective", "extractor", "classifier", "curves", "data_seed",
    "variance_repetitions",
}

CONFIG_FORMAT_VERSION = 1


def _strict(obj: dict, allowed: set[str], what: str) -> None:
    unknown = set(obj) - allowed
    if unknown:
        raise ConfigError(f"{what}: unknown keys {sorted(unknown)}")


def config_from_json(obj: dict) -> ExperimentConfig:
    _strict(obj, _CONFIG_KEYS, "experiment config")
    if obj.get("format_version") != CONFIG_FORMAT_VERSION:
        raise ConfigError(f"experiment config format_version must be {CONFIG_FORMAT_VERSION}")
    if "p_model" not in obj or "nnd_metrics" not in obj:
        raise ConfigError("experiment config requires p_model and nnd_metrics")

    metrics = []
    for m in obj["nnd_metrics"]:
        _strict(m, {"name", "critic_spec", "train_spec"}, "nnd metric")
        metrics.append(NndMetricConfig(name=m["name"],
                                       critic_spec=CriticSpec.from_json(m["critic_spec"]),
                                       train_spec=TrainSpec.from_json(m["train_spec"])))
    kwargs: dict = {
        "p_model": model_from_json(obj["p_model"]),
        "nnd_metrics": tuple(metrics),
        "q_models": tuple(model_from_json(q) for q in obj.get("q_models", [])),
    }
    for name in ("train_size", "test_size", "large_test_size", "model_sample_size",
                 "data_seed", "variance_repetitions"):
        if name in obj:
            kwargs[name] = int(obj[name])
    if "seeds" in obj:
        kwargs["seeds"] = tuple(int(s) for s in obj["seeds"])
    if "n_grid" in obj:
        kwargs["n_grid"] = tuple(int(n) for n in obj["n_grid"])
    if "objective" in obj:
        kwargs["objective"] = Objective.from_json(obj["objective"])
    if obj.get("extractor") is not None:
        e = obj["extractor"]
        _strict(e, {"channel_multiplier", "seed"}, "extractor config")
        kwargs["extractor"] = ExtractorConfig(float(e.get("channel_multiplier", 0.25)),
                                              int(e.get("seed", 7)))
    if obj.get("classifier") is not None:
        c = obj["classifier"]
        _strict(c, {"channel_multiplier", "iterations", "batch_size", "lr",
                    "train_size", "seed", "exponentiated"}, "classifier config")
        kwargs["classifier"] = ClassifierConfig(
            channel_multiplier=float(c.get("channel_multiplier", 0.25)),
            iterations=int(c.get("iterations", 600)),
            batch_size=int(c.get("batch_size", 64)),
            lr=float(c.get("lr", 1e-3)),
            train_size=int(c.get("train_size", 1024)),
            seed=int(c.get("seed", 11)),
            exponentiated=bool(c.get("exponentiated", False)))
    if obj.get("curves") is not None:
        cv = obj["curves"]
        _strict(cv, {"checkpoints", "sigma_start", "sigma_end", "memorize_frac_start",
                     "memorize_frac_end", "train_subset_size"}, "curve config")
        kwargs["curves"] = CurveConfig(
            checkpoints=int(cv.get("checkpoints", 4)),
            sigma_start=float(cv.get("sigma_start", 0.6)),
            sigma_end=float(cv.get("sigma_end", 0.05)),
            memorize_frac_start=float(cv.get("memorize_frac_start", 0.0)),
            memorize_frac_end=float(cv.get("memorize_frac_end", 0.6)),
            train_subset_size=int(cv.get("train_subset_size", 512)))
    return ExperimentConfig(**kwargs)


# ---------------------------------------------------------------------------
# metric runners: uniform lower-is-better interface over sample sets


@dataclass
class MetricValue:
    value: float
    report: Optional[DivergenceReport] = None
    config_hash: str = ""


class Metric:
    """A named scoring function; smaller values mean "closer to real"."""

    name: str

    def evaluate_sets(self, real: SampleSet, model_sample: SampleSet,
                      replicate_seed: int) -> MetricValue:
        raise NotImplementedError

    def evaluate_model(self, real: SampleSet, model: SyntheticModel,
                       replicate_seed: int, sample_size: int) -> MetricValue:
        draw_seed = rng.derive_key(replicate_seed, "model_sample", self.name)
        return self.evaluate_sets(real, sample(model, sample_size, draw_seed), replicate_seed)


class NndMetric(Metric):
    def __init__(self, cfg: NndMetricConfig, objective: Objective):
        self.name = cfg.name
        self.critic_spec = cfg.critic_spec
        self.train_spec = cfg.train_spec
        self.objective = objective

    def evaluate_sets(self, real, model_sample, replicate_seed) -> MetricValue:
        train = replace(self.train_spec,
                        seed=rng.derive_key(self.train_spec.seed, "replicate", replicate_seed))
        report = estimate_nnd(real, model_sample, self.critic_spec, train, self.objective)
        return MetricValue(report.value, report, report.config_hash)


class FidMetric(Metric):
    def __init__(self, extractor: FeatureExtractor, name: str = "fid"):
        self.name = name
        self.extractor = extractor
        desc = {"kind": extractor.kind, "input_shape": list(extractor.input_shape),
                "channel_multiplier": extractor.channel_multiplier, "seed": extractor.seed}
        self._hash = hashlib.sha256(canonical_json_bytes(desc)).hexdigest()

    def evaluate_sets(self, real, model_sample, replicate_seed) -> MetricValue:
        return MetricValue(fid(real, model_sample, self.extractor), None, self._hash)


class IsMetric(Metric):
    """Absolute difference of classifier scores of the two samples."""

    def __init__(self, classifier: FeatureExtractor, exponentiated: bool, name: str = "is_div"):
        self.name = name
        self.classifier = classifier
        self.exponentiated = exponentiated
        desc = {"kind": "classifier_score", "input_shape": list(classifier.input_shape),
                "channel_multiplier": classifier.channel_multiplier,
                "seed": classifier.seed, "exponentiated": exponentiated}
        self._hash = hashlib.sha256(canonical_json_bytes(desc)).hexdigest()

    def evaluate_sets(self, real, model_sample, replicate_seed) -> MetricValue:
        score_real = inception_style_score(classifier_probs(self.classifier, real),
                                           self.exponentiated)
        score_model = inception_style_score(classifier_probs(self.classifier, model_sample),
                                            self.exponentiated)
        return MetricValue(is_divergence(score_real, score_model), None, self._hash)


def _n_classes(model: SyntheticModel) -> int:
    if model.kind == "shapes_image":
        return 2
    if model.kind == "gaussian_mixture":
        return len(np.atleast_2d(model.params["means"]))
    if model.kind == "perturbed":
        return _n_classes(model.base)
    raise ConfigError(f"no class structure for model kind {model.kind!r}")


def build_metrics(cfg: ExperimentConfig) -> list[Metric]:
    """All configured metric runners (divergences, then FID, then IS)."""
    metrics: list[Metric] = [NndMetric(m, cfg.objective) for m in cfg.nnd_metrics]
    shape = cfg.p_model.element_shape()
    if cfg.extractor is not None:
        metrics.append(FidMetric(build_random_extractor(
            shape, cfg.extractor.channel_multiplier, cfg.extractor.seed)))
    if cfg.classifier is not None:
        c = cfg.classifier
        images, labels = sample_labels(cfg.p_model, c.train_size,
                                       rng.derive_key(cfg.data_seed, "classifier_data"))
        clf = train_classifier(images, labels, _n_classes(cfg.p_model),
                               channel_multiplier=c.channel_multiplier,
                               iterations=c.iterations, batch_size=c.batch_size,
                               lr=c.lr, seed=c.seed)
        metrics.append(IsMetric(clf, c.exponentiated))
    return metrics


# ---------------------------------------------------------------------------
# results


@dataclass
class ResultRow:
    experiment: str
    metric: str
    condition: str
    seed: int
    value: float
    config_hash: str


@dataclass
class ExperimentResult:
    experiment: str
    rows: list[ResultRow] = field(default_factory=list)
    stats: dict = field(default_factory=dict)
    reports: list[DivergenceReport] = field(default_factory=list)

    def add(self, metric: str, condition: str, seed: int, mv: MetricValue) -> float:
        self.rows.append(ResultRow(self.experiment, metric, condition, seed,
                                   mv.value, mv.config_hash))
        if mv.report is not None:
            self.reports.append(mv.report)
        return mv.value

    def mean_value(self, metric: str, condition: str) -> float:
        vals = [r.value for r in self.rows if r.metric == metric and r.condition == condition]
        if not vals:
            raise KeyError(f"no rows for ({metric}, {condition})")
        return float(np.mean(vals))

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["experiment", "metric", "condition", "seed", "value", "config_hash"])
            for r in self.rows:
                writer.writerow([r.experiment, r.metric, r.condition, r.seed,
                                 repr(r.value), r.config_hash])

    def write_bundle(self, path) -> None:
        bundle = {
            "experiment": self.experiment,
            "stats": self.stats,
            "rows": [{"experiment": r.experiment, "metric": r.metric,
                      "condition": r.condition, "seed": r.seed, "value": r.value,
                      "config_hash": r.config_hash} for r in self.rows],
            "reports": [rep.to_json() for rep in self.reports],
        }
        with open(path, "w") as fh:
            json.dump(bundle, fh, indent=2, sort_keys=True)
            fh.write("\n")


# ---------------------------------------------------------------------------
# shared data setup


def _base_sets(cfg: ExperimentConfig) -> tuple[SampleSet, SampleSet]:
    train = sample(cfg.p_model, cfg.train_size, rng.derive_key(cfg.data_seed, "train"))
    test = sample(cfg.p_model, cfg.test_size, rng.derive_key(cfg.data_seed, "test"))
    return train, test


def _memorizer(train: SampleSet) -> SyntheticModel:
    return SyntheticModel(kind="empirical", backing=train, seed=0)


def _require_q(cfg: ExperimentConfig) -> SyntheticModel:
    if not cfg.q_models:
        raise ConfigError("this experiment requires at least one candidate model q")
    return cfg.q_models[0]


# ---------------------------------------------------------------------------
# experiment operations


def run_memorization_table(cfg: ExperimentConfig) -> ExperimentResult:
    """Every metric on (train|test) x (model|memorizer), plus verdicts.

    The verdict per metric compares seed-averaged test-side scores: the
    model "outperforms memorization" when its score is strictly better
    (lower) than the memorizer's.
    """
    q = _require_q(cfg)
    train, test = _base_sets(cfg)
    memorizer = _memorizer(train)
    metrics = build_metrics(cfg)
    result = ExperimentResult("memorization")

    for s in cfg.seeds:
        for model_name, model in (("model", q), ("memorizer", memorizer)):
            for real_name, real_set in (("train", train), ("test", test)):
                for metric in metrics:
                    mv = metric.evaluate_model(real_set, model,
                                               rng.derive_key(s, real_name, model_name),
                                               cfg.model_sample_size)
                    result.add(metric.name, f"{real_name},{model_name}", s, mv)

    verdicts = {}
    per_seed = {}
    for metric in metrics:
        means = {cond: result.mean_value(metric.name, cond)
                 for cond in ("train,model", "test,model", "train,memorizer", "test,memorizer")}
        verdicts[metric.name] = {
            "outperforms_memorization": means["test,model"] < means["test,memorizer"],
            "means": means,
        }
        seed_flags = []
        for s in cfg.seeds:
            vm = [r.value for r in result.rows
                  if r.metric == metric.name and r.condition == "test,model" and r.seed == s]
            vme = [r.value for r in result.rows
                   if r.metric == metric.name and r.condition == "test,memorizer" and r.seed == s]
            seed_flags.append(vm[0] < vme[0])
        per_seed[metric.name] = seed_flags
    result.stats = {"verdicts": verdicts, "per_seed_outperforms": per_seed,
                    "seeds": list(cfg.seeds)}
    return result


@dataclass
class NToWinResult:
    crossing: Optional[int]  # None means "greater than max n"
    max_n: int
    model_score: float
    memorizer_scores: dict[int, float]
    result: ExperimentResult

    def label(self) -> str:
        return f"> {self.max_n}" if self.crossing is None else str(self.crossing)


def run_n_to_win(cfg: ExperimentConfig, metric: Metric,
                 train: SampleSet | None = None,
                 test: SampleSet | None = None) -> NToWinResult:
    """Smallest memorized-subset size that scores better than the model.

    Sweeps the configured power-of-two grid, averaging each point over the
    configured seeds, and returns the first grid point whose memorizer
    score drops below the model's; never interpolates between points.
    """
    q = _require_q(cfg)
    if train is None or test is None:
        train, test = _base_sets(cfg)
    result = ExperimentResult("n-to-win")

    for s in cfg.seeds:
        mv = metric.evaluate_model(test, q, rng.derive_key(s, "model"), cfg.model_sample_size)
        result.add(metric.name, "model", s, mv)
    model_score = result.mean_value(metric.name, "model")

    memorizer_scores: dict[int, float] = {}
    crossing: Optional[int] = None
    for n in cfg.n_grid:
        for s in cfg.seeds:
            picked = subset(train, n, rng.derive_key(cfg.data_seed, "n_grid", n, s))
            mv = metric.evaluate_model(test, _memorizer(picked),
                                       rng.derive_key(s, "memorizer", n),
                                       cfg.model_sample_size)
            result.add(metric.name, f"memorizer_n={n}", s, mv)
        memorizer_scores[n] = result.mean_value(metric.name, f"memorizer_n={n}")
        if crossing is None and memorizer_scores[n] < model_score:
            crossing = n

    result.stats = {"metric": metric.name, "model_score": model_score,
                    "memorizer_scores": {str(k): v for k, v in memorizer_scores.items()},
                    "crossing": crossing, "max_n": max(cfg.n_grid)}
    return NToWinResult(crossing, max(cfg.n_grid), model_score, memorizer_scores, result)


def spearman(a, b) -> float:
    """Spearman rank correlation with average ranks for ties."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1 or a.size < 2:
        raise ConfigError(f"spearman needs two equal-length vectors of >= 2 values, "
                          f"got {a.shape} and {b.shape}")
    ra, rb = _average_ranks(a), _average_ranks(b)
    ra -= ra.mean()
    rb -= rb.mean()
    denom = np.sqrt((ra * ra).sum() * (rb * rb).sum())
    if denom == 0.0:
        return 0.0  # a constant list carries no ranking information
    return float((ra * rb).sum() / denom)


def _average_ranks(x: np.ndarray) -> np.ndarray:
    order = np.argsort(x, kind="stable")
    ranks = np.empty(x.size, dtype=np.float64)
    ranks[order] = np.arange(1, x.size + 1, dtype=np.float64)
    for value in np.unique(x):
        mask = x == value
        if mask.sum() > 1:
            ranks[mask] = ranks[mask].mean()
    return ranks


def run_test_set_bias(cfg: ExperimentConfig, metric: Metric | None = None) -> ExperimentResult:
    """Rank agreement between small-test and large-test estimates."""
    if len(cfg.q_models) < 2:
        raise ConfigError(f"bias experiment needs at least 2 candidate models, "
                          f"got {len(cfg.q_models)}")
    if metric is None:
        metric = build_metrics(cfg)[0]
    test_small = sample(cfg.p_model, cfg.test_size, rng.derive_key(cfg.data_seed, "test"))
    test_large = sample(cfg.p_model, cfg.large_test_size,
                        rng.derive_key(cfg.data_seed, "test_large"))
    result = ExperimentResult("bias")

    small_vals, large_vals = [], []
    for j, q in enumerate(cfg.q_models):
        seed = rng.derive_key(cfg.data_seed, "bias_model", j)
        small_vals.append(result.add(metric.name, f"small_test,model_{j}", j,
                                     metric.evaluate_model(test_small, q, seed,
                                                           cfg.model_sample_size)))
        large_vals.append(result.add(metric.name, f"large_test,model_{j}", j,
                                     metric.evaluate_model(test_large, q, seed,
                                                           cfg.model_sample_size)))
    rho = spearman(small_vals, large_vals)
    result.stats = {"metric": metric.name, "spearman_rho": rho,
                    "n_models": len(cfg.q_models),
                    "scatter": [{"model": j, "small": s, "large": l}
                                for j, (s, l) in enumerate(zip(small_vals, large_vals))]}
    return result


def _checkpoint_schedule(cc: CurveConfig) -> list[tuple[float, float]]:
    steps = cc.checkpoints
    if steps < 1:
        raise ConfigError("curves need at least one checkpoint")
    out = []
    for t in range(steps):
        frac = t / (steps - 1) if steps > 1 else 0.0
        sigma = cc.sigma_start + (cc.sigma_end - cc.sigma_start) * frac
        mem = cc.memorize_frac_start + (cc.memorize_frac_end - cc.memorize_frac_start) * frac
        out.append((sigma, mem))
    return out


def checkpoint_sample(cfg: ExperimentConfig, train: SampleSet, sigma: float,
                      memorize_frac: float, n: int, seed: int) -> SampleSet:
    """A model-sample for one training checkpoint: a mixture of a perturbed
    copy of p and resampled (memorized) training points."""
    perturbed = SyntheticModel(kind="perturbed", params={"sigma": sigma},
                               base=cfg.p_model, seed=cfg.p_model.seed)
    fresh = sample(perturbed, n, rng.derive_key(seed, "fresh")).elements
    mem = sample(_memorizer(train), n, rng.derive_key(seed, "memorized")).elements
    pick_mem = rng.uniform(rng.derive_key(seed, "mix"), np.arange(n)) < memorize_frac
    mask = pick_mem.reshape((n,) + (1,) * (fresh.ndim - 1))
    return SampleSet(np.where(mask, mem, fresh).astype(np.float32),
                     provenance=f"checkpoint(sigma={sigma:g}, mem={memorize_frac:g})")


def run_training_curves(cfg: ExperimentConfig, metric: Metric | None = None) -> ExperimentResult:
    """Divergence against two test sets and a train subset along a schedule
    of improving (and increasingly memorizing) models; every point is an
    independent from-scratch estimate."""
    cc = cfg.curves if cfg.curves is not None else CurveConfig()
    if metric is None:
        metric = build_metrics(cfg)[0]
    train, test1 = _base_sets(cfg)
    test2 = sample(cfg.p_model, cfg.test_size, rng.derive_key(cfg.data_seed, "test2"))
    train_sub = subset(train, min(cc.train_subset_size, len(train)),
                       rng.derive_key(cfg.data_seed, "train_subset"))
    result = ExperimentResult("curves")

    for t, (sigma, mem) in enumerate(_checkpoint_schedule(cc)):
        q_sample = checkpoint_sample(cfg, train, sigma, mem, cfg.model_sample_size,
                                     rng.derive_key(cfg.data_seed, "checkpoint", t))
        for real_name, real_set in (("test1", test1), ("test2", test2),
                                    ("train_subset", train_sub)):
            mv = metric.evaluate_sets(real_set, q_sample,
                                      rng.derive_key(cfg.data_seed, "curve", t, real_name))
            result.add(metric.name, f"t={t},{real_name}", t, mv)
    result.stats = {
        "metric": metric.name,
        "schedule": [{"t": t, "sigma": s, "memorize_frac": m}
                     for t, (s, m) in enumerate(_checkpoint_schedule(cc))],
    }
    return result


def run_variance(cfg: ExperimentConfig, metric: Metric | None = None) -> ExperimentResult:
    """Repeated estimation on one fixed pair; reports mean, std, CV."""
    if metric is None:
        metric = build_metrics(cfg)[0]
    q = _require_q(cfg)
    _, test = _base_sets(cfg)
    fixed_model_sample = sample(q, cfg.model_sample_size,
                                rng.derive_key(cfg.data_seed, "variance_model"))
    result = ExperimentResult("variance")
    values = []
    for rep in range(cfg.variance_repetitions):
        mv = metric.evaluate_sets(test, fixed_model_sample,
                                  rng.derive_key(cfg.data_seed, "variance", rep))
        values.append(result.add(metric.name, "repeat", rep, mv))
    mean = float(np.mean(values))
    std = float(np.std(values, ddof=1))
    cv = std / abs(mean) if mean != 0.0 else float("inf")
    result.stats = {"metric": metric.name, "mean": mean, "std": std,
                    "coefficient_of_variation": cv, "repetitions": len(values)}
    return result


def run_experiment(name: str, cfg: ExperimentConfig) -> ExperimentResult:
    if name == "memorization":
        return run_memorization_table(cfg)
    if name == "n-to-win":
        combined = ExperimentResult("n-to-win")
        crossings = {}
        for metric in build_metrics(cfg):
            sub_result = run_n_to_win(cfg, metric)
            combined.rows.extend(sub_result.result.rows)
            combined.reports.extend(sub_result.result.reports)
            crossings[metric.name] = {"n_to_win": sub_result.label(),
                                      **sub_result.result.stats}
        combined.stats = {"per_metric": crossings}
        return combined
    if name == "bias":
        return run_test_set_bias(cfg)
    if name == "curves":
        return run_training_curves(cfg)
    if name == "variance":
        return run_variance(cfg)
    raise ConfigError(f"unknown experiment {name!r}; valid names: {', '.join(EXPERIMENT_NAMES)}")
