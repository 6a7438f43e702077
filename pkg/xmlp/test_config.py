from pathlib import Path

import pytest
import yaml

from . import config
from .config import DatasetName, Variant
from .errors import ConfigError


def test_parse_config(tmp_path):
    path = tmp_path / "xmlp.yaml"
    path.write_text(TEST_CFG)
    c = config.resolve(path)

    assert c.dataset is DatasetName.cifar10
    assert c.data_dir == Path("/tmp/xmlp-data/cifar10")
    assert c.model.variant is Variant.superior
    assert c.model.width_mult == 0.5
    assert c.model.input_shape == (3, 32, 32)
    assert c.model.scaled_channels()[:3] == [32, 32, 64]
    assert c.train.epochs == 40
    assert c.train.lr_init == 0.01
    assert c.train.plateau_window == 5
    assert c.augment_policy.pad_crop == 4
    assert c.augment_policy.hflip_prob == 0.5
    assert c.crop == (4, 4)


def test_overrides_win_over_file(tmp_path):
    path = tmp_path / "xmlp.yaml"
    path.write_text(TEST_CFG)
    c = config.resolve(path, **{
        "model.variant": "basic",
        "train.epochs": 2,
        "dataset": DatasetName.mnist,
        "train.seed": None,
    })
    assert c.model.variant is Variant.basic
    assert c.train.epochs == 2
    assert c.train.seed == 0
    assert c.dataset is DatasetName.mnist
    # The input shape follows the overridden dataset.
    assert c.model.input_shape == (1, 32, 32)


def test_input_shape_follows_dataset():
    assert config.resolve(dataset="mnist").model.input_shape == (1, 32, 32)
    assert config.resolve(dataset="cifar10").model.input_shape == (3, 32, 32)
    assert config.load("dataset: kmnist").augment_policy.is_identity


def test_env_paths(monkeypatch):
    monkeypatch.setenv("XMLP_TEST_ROOT", "/srv/xmlp")
    c = config.load("data_dir: $XMLP_TEST_ROOT/data\nout: ~/runs")
    assert c.data_dir == Path("/srv/xmlp/data")
    assert c.out == Path.home() / "runs"


@pytest.mark.parametrize("content", [
    "model:\n  variant: huge\n",
    "train:\n  lr_min: 0.1\n  lr_init: 0.01\n",
    "train:\n  batch_size: 0\n",
    "no_such_key: 1\n",
    "- a list\n",
])
def test_invalid_config(content):
    with pytest.raises(ConfigError):
        config.load(content)


def test_missing_config_file(tmp_path):
    with pytest.raises(ConfigError):
        config.resolve(tmp_path / "missing.yaml")


def test_schema_keys():
    keys = config.schema_keys()
    for key in ("dataset", "model.variant", "model.width_mult", "train.lr_init",
                "train.plateau_window", "augment.pad_crop", "crop", "fold_bn"):
        assert key in keys
    assert len(keys) == len(set(keys))


def test_dump_round_trips():
    c = config.resolve(**{"model.variant": "expansion", "dataset": "fashion-mnist"})
    again = config.load(c.dump_yaml())
    assert again.model_dump() == c.model_dump()
    assert yaml.safe_load(c.dump_yaml())["model"]["variant"] == "expansion"


TEST_CFG = """
---
dataset: cifar10
data_dir: /tmp/xmlp-data/cifar10
out: /tmp/xmlp-out

# restore
crop: [4, 4]

model:
  variant: superior
  width_mult: 0.5

train:
  epochs: 40
  batch_size: 64
  lr_init: 0.01
"""
