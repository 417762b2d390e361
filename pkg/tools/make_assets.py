"""Regenerate the checkpoints shipped with the package.

Both artifacts are deterministic functions of the seeds below; this script
exists so the committed files can be audited and rebuilt.
"""

from pathlib import Path

from nndiv.baselines import build_random_extractor, save_extractor, train_classifier
from nndiv.data import SyntheticModel, sample_labels

ASSETS = Path(__file__).resolve().parent.parent / "src" / "nndiv" / "assets"

SHAPES = SyntheticModel(kind="shapes_image", params={}, seed=0)


def main() -> None:
    ASSETS.mkdir(parents=True, exist_ok=True)

    extractor = build_random_extractor((8, 8, 1), channel_multiplier=0.25, seed=7)
    save_extractor(ASSETS / "extractor_8x8.json", extractor)
    print("wrote", ASSETS / "extractor_8x8.json")

    images, labels = sample_labels(SHAPES, 2048, seed=2024)
    classifier = train_classifier(images, labels, n_classes=2,
                                  channel_multiplier=0.25, iterations=800,
                                  batch_size=64, lr=1e-3, seed=2024)
    save_extractor(ASSETS / "classifier_8x8.json", classifier)
    print("wrote", ASSETS / "classifier_8x8.json")


if __name__ == "__main__":
    main()
