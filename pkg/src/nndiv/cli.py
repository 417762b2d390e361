"""Command-line interface.

Subcommands: `nnd` (divergence between two NNDS sample files), `fid` and
`is` (baseline metrics under a pluggable extractor/classifier), and
`experiment` (the scripted studies). Configuration is strict JSON with an
embedded format version; every source of randomness is an explicit seed.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical
failure. Metric commands print exactly one final value line to stdout.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

from .baselines import (classifier_probs, extract_features, frechet_distance,
                        inception_style_score, is_divergence, load_extractor, moments)
from .data import DataError, load_nnds
from .divergence import (DivergenceReport, NumericalError, Objective, estimate_nnd)
from .experiments import EXPERIMENT_NAMES, config_from_json, run_experiment
from .nn import CheckpointError, ConfigError, CriticSpec
from .optim import TrainSpec
from .tensor import ShapeError, UsageError

EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERICAL = 4

METRIC_CONFIG_KEYS = {"format_version", "critic_spec", "train_spec", "objective"}
METRIC_CONFIG_VERSION = 1


def _load_json(path) -> dict:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}") from exc


def _load_metric_config(path) -> tuple[CriticSpec, TrainSpec, Objective]:
    obj = _load_json(path)
    if set(obj) != METRIC_CONFIG_KEYS:
        raise ConfigError(f"{path}: keys must be exactly {sorted(METRIC_CONFIG_KEYS)}, "
                          f"got {sorted(obj)}")
    if obj["format_version"] != METRIC_CONFIG_VERSION:
        raise ConfigError(f"{path}: format_version must be {METRIC_CONFIG_VERSION}")
    return (CriticSpec.from_json(obj["critic_spec"]),
            TrainSpec.from_json(obj["train_spec"]),
            Objective.from_json(obj["objective"]))


def _write_json(path, obj) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _cmd_nnd(args) -> int:
    critic, train, objective = _load_metric_config(args.config)
    train = replace(train, seed=args.seed)
    real = load_nnds(args.real)
    model = load_nnds(args.model)
    report = estimate_nnd(real, model, critic, train, objective)
    _write_json(args.out, report.to_json())
    print(f"{report.value:.6g}")
    return 0


def _cmd_fid(args) -> int:
    extractor = load_extractor(args.extractor)
    real = load_nnds(args.real)
    model = load_nnds(args.model)
    m_real = moments(extract_features(extractor, real))
    m_model = moments(extract_features(extractor, model))
    value = frechet_distance(m_real, m_model)
    _write_json(args.out, {
        "value": value,
        "extractor": str(args.extractor),
        "moments": {
            "real": {"mu": m_real.mu.tolist(), "sigma": m_real.sigma.tolist()},
            "model": {"mu": m_model.mu.tolist(), "sigma": m_model.sigma.tolist()},
        },
        "sample_fingerprints": {"real": real.fingerprint, "model": model.fingerprint},
    })
    print(f"{value:.6g}")
    return 0


def _cmd_is(args) -> int:
    classifier = load_extractor(args.extractor)
    real = load_nnds(args.real)
    model = load_nnds(args.model)
    score_real = inception_style_score(classifier_probs(classifier, real),
                                       exponentiated=args.exponentiated)
    score_model = inception_style_score(classifier_probs(classifier, model),
                                        exponentiated=args.exponentiated)
    value = is_divergence(score_real, score_model)
    _write_json(args.out, {
        "value": value,
        "variant": "exponentiated" if args.exponentiated else "mean_kl",
        "score_real": score_real.value,
        "score_model": score_model.value,
        "classifier": str(args.extractor),
        "sample_fingerprints": {"real": real.fingerprint, "model": model.fingerprint},
    })
    print(f"{value:.6g}")
    return 0


def _cmd_experiment(args) -> int:
    if args.name not in EXPERIMENT_NAMES:
        raise ConfigError(f"unknown experiment {args.name!r}; "
                          f"valid names: {', '.join(EXPERIMENT_NAMES)}")
    cfg = config_from_json(_load_json(args.config))
    result = run_experiment(args.name, cfg)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    result.write_csv(out_dir / f"{args.name}.csv")
    result.write_bundle(out_dir / f"{args.name}.json")

    if args.name == "memorization":
        for metric, verdict in result.stats["verdicts"].items():
            print(f"{metric} model outperforms memorization: "
                  f"{str(verdict['outperforms_memorization']).lower()}")
    elif args.name == "n-to-win":
        for metric, stats in result.stats["per_metric"].items():
            print(f"{metric} n to win: {stats['n_to_win']}")
    elif args.name == "bias":
        print(f"spearman rho: {result.stats['spearman_rho']:.6g}")
    elif args.name == "variance":
        print(f"coefficient of variation: {result.stats['coefficient_of_variation']:.6g}")
    else:
        print(f"curves written: {len(result.rows)} rows")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="nndiv",
        description="Neural-network divergences and baseline metrics between sample sets.")
    sub = parser.add_subparsers(dest="command", required=True)

    p_nnd = sub.add_parser("nnd", help="critic-based divergence between two NNDS files")
    p_nnd.add_argument("--real", required=True, help="NNDS file with real-side samples")
    p_nnd.add_argument("--model", required=True, help="NNDS file with model-side samples")
    p_nnd.add_argument("--config", required=True, help="metric config JSON")
    p_nnd.add_argument("--seed", required=True, type=int,
                       help="seed for all randomness in the run")
    p_nnd.add_argument("--out", required=True, help="where to write the report JSON")
    p_nnd.set_defaults(func=_cmd_nnd)

    p_fid = sub.add_parser("fid", help="Frechet distance under a feature extractor")
    p_fid.add_argument("--real", required=True)
    p_fid.add_argument("--model", required=True)
    p_fid.add_argument("--extractor", required=True, help="extractor descriptor JSON")
    p_fid.add_argument("--out", required=True)
    p_fid.set_defaults(func=_cmd_fid)

    p_is = sub.add_parser("is", help="classifier-score divergence |IS(real) - IS(model)|")
    p_is.add_argument("--real", required=True)
    p_is.add_argument("--model", required=True)
    p_is.add_argument("--extractor", required=True, help="classifier descriptor JSON")
    p_is.add_argument("--exponentiated", action="store_true",
                      help="use the exponentiated score variant")
    p_is.add_argument("--out", required=True)
    p_is.set_defaults(func=_cmd_is)

    p_exp = sub.add_parser("experiment", help="run a scripted study")
    p_exp.add_argument("name", help=f"one of: {', '.join(EXPERIMENT_NAMES)}")
    p_exp.add_argument("--config", required=True, help="experiment config JSON")
    p_exp.add_argument("--out", required=True, help="output directory for CSV + JSON bundle")
    p_exp.set_defaults(func=_cmd_experiment)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except NumericalError as exc:
        print(f"numerical failure: {exc} (iteration {exc.iteration})", file=sys.stderr)
        return EXIT_NUMERICAL
    except (DataError, CheckpointError, FileNotFoundError, OSError) as exc:
        # data errors subclass ValueError, so they must be matched first
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (ConfigError, ShapeError, UsageError, ValueError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
