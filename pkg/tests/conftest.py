import json

import pytest

from pedattr.config import AttributeSpec, ModelConfig
from pedattr.data_io import RegionAttribute, SyntheticSpec, generate_synthetic


@pytest.fixture
def tiny_cfg():
    """Smallest config the gradient checks use: d_model=8, N=4, 2 attributes."""
    return ModelConfig(
        d_model=8, num_layers=1, num_heads=2, patch_size=4, image_hw=8,
        max_tokens=8, vocab_size=32,
        attributes=(AttributeSpec("color", "what color is the coat?", 2),
                    AttributeSpec("bag", "which bag type?", 3)))


@pytest.fixture
def desk_cfg():
    """Desk-scale defaults with two binary attributes."""
    return ModelConfig(attributes=(
        AttributeSpec("bright_top", "is the top left region bright?", 2),
        AttributeSpec("bright_bottom", "is the bottom right region bright?", 2)))


DESK_REGIONS = (
    RegionAttribute("bright_top", "is the top left region bright?", 2, (0, 0, 16, 16)),
    RegionAttribute("bright_bottom", "is the bottom right region bright?", 2,
                    (16, 16, 16, 16)),
)


def make_synthetic(tmp_path, name, num_samples, seed, attributes=DESK_REGIONS,
                   image_hw=32, patch_size=8, margin=0.1):
    spec = SyntheticSpec(num_samples=num_samples, image_hw=image_hw,
                         patch_size=patch_size, seed=seed,
                         attributes=attributes, margin=margin)
    return spec, generate_synthetic(spec, tmp_path / name)


def write_run_config(path, dataset="", weights_out="", report_out="", seed=42,
                     model=None, loss=None, train=None, weights_in="", vocab=""):
    payload = {
        "seed": seed,
        "model": model if model is not None else {
            "attributes": [
                {"name": "bright_top",
                 "prompt": "is the top left region bright?", "num_classes": 2},
                {"name": "bright_bottom",
                 "prompt": "is the bottom right region bright?", "num_classes": 2},
            ],
        },
        "loss": loss or {},
        "train": train or {},
        "paths": {"dataset": str(dataset), "weights_in": str(weights_in),
                  "weights_out": str(weights_out), "report_out": str(report_out),
                  "vocab": str(vocab)},
    }
    path.write_text(json.dumps(payload, indent=2))
    return path
