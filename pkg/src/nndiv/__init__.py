"""Neural-network divergences and baseline metrics between sample sets."""

from .baselines import (ClassifierOutput, FeatureExtractor, GaussianMoments,
                        frechet_distance, inception_style_score, is_divergence,
                        moments, sqrtm_product)
from .data import SampleSet, SyntheticModel, load_idx, load_nnds, sample, save_nnds, subset
from .divergence import (DivergenceReport, Objective, estimate_nnd,
                         gradient_penalty, outperforms_memorization, training_step)
from .nn import CriticParams, CriticSpec, EmaState, build_critic, critic_forward, ema_update
from .optim import AdamState, TrainSpec, adam_step, lr_at
from .tensor import Tensor, backward, grad

__all__ = [
    "AdamState", "ClassifierOutput", "CriticParams", "CriticSpec",
    "DivergenceReport", "EmaState", "FeatureExtractor", "GaussianMoments",
    "Objective", "SampleSet", "SyntheticModel", "Tensor", "TrainSpec",
    "adam_step", "backward", "build_critic", "critic_forward", "ema_update",
    "estimate_nnd", "frechet_distance", "grad", "gradient_penalty",
    "inception_style_score", "is_divergence", "load_idx", "load_nnds", "lr_at",
    "moments", "outperforms_memorization", "sample", "save_nnds",
    "sqrtm_product", "subset", "training_step",
]
