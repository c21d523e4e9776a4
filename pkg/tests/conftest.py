import pytest
import torch

from unisurf import config_from_dict, generate_toy_dataset, read_manifest


def toy_config(**overrides):
    """Small CPU-friendly config used throughout the tests."""
    base = {
        "regime": "unsupervised",
        "seed": 0,
        "backbone": {"name": "toy", "pretrained": False},
        "train": {
            "epochs": 2,
            "batch_size": 8,
            "lr_decay_epochs": [],
            "cache_features": True,
        },
        "heads": {"cls_width": 32},
        "data": {"layout": "manifest", "image_size": [64, 64]},
        "synth": {"sigma": 0.2},
    }
    for key, value in overrides.items():
        node = base
        parts = key.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
        node[parts[-1]] = value
    return config_from_dict(base)


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    """A very small on-disk toy dataset shared across the test session."""
    root = tmp_path_factory.mktemp("tinytoy")
    manifest = generate_toy_dataset(
        root, n_train_normal=8, n_train_anomalous=6, n_test_normal=4,
        n_test_anomalous=4, size=64, seed=7,
    )
    return manifest, read_manifest(manifest)


@pytest.fixture()
def toy_model():
    from unisurf import DefectModel

    torch.manual_seed(0)
    return DefectModel(toy_config())
