import json

import pytest

from sambd.experiment import DatasetConfig, ExperimentConfig, write_phantom_dataset
from sambd.model import ModelConfig
from sambd.volume import PhantomConfig


TINY_PHANTOM = PhantomConfig(
    dims=(48, 48, 24),
    thickness_choices=(1, 2),
    tumor_radius_mm=(2.0, 3.0),
    tumor_margin_mm=1.5,
    tumor_count=(1, 2),
)


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    """Four train / two val miniature phantom cases, shared across tests."""
    out = tmp_path_factory.mktemp("tiny_data")
    config = DatasetConfig(n_train=4, n_val=2, phantom=TINY_PHANTOM, seed=123)
    manifest = write_phantom_dataset(out, config)
    return manifest


def tiny_experiment(manifest, **kw):
    base = dict(
        manifest=str(manifest),
        model=ModelConfig(
            c_in=5,
            base_channels=8,
            low_level_channels_reduced=8,
            decoder_channels=8,
            aspp_rates=(1, 2),
        ),
        epochs=2,
        batch_size=2,
        samples_per_epoch=8,
        crop=32,
    )
    base.update(kw)
    return ExperimentConfig(**base)


@pytest.fixture()
def tiny_config(tiny_dataset):
    return tiny_experiment(tiny_dataset)


def write_experiment_json(path, manifest, **kw):
    cfg = tiny_experiment(manifest, **kw)
    d = cfg.to_dict()
    path.write_text(json.dumps(d, indent=2))
    return path
