import numpy as np
import pytest
import torch

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def tiny_dataset():
    from poseanon.data import ProceduralConfig, generate_procedural
    return generate_procedural(ProceduralConfig(
        n_subjects=3, frames_per_subject=24, image_size=(16, 16, 3), seed=5,
        videos_per_subject=2))


@pytest.fixture(scope="session")
def tiny_model_config(tiny_dataset):
    from poseanon.model import default_model_config
    return default_model_config(tiny_dataset.image_size, tiny_dataset.n_subjects,
                                d_z=8, width=0.5)


def toy_model_config():
    """A <= 200-parameter bundle on 4x4 single-channel images; exercises the
    inception, linear, GAP, and decoder code paths with few enough weights
    for exhaustive finite-difference checks."""
    from poseanon.model import InceptionSpec, ModelConfig
    block = (InceptionSpec((1, 1, 1), 2),)
    return ModelConfig(
        image_size=(4, 4, 1), n_subjects=2, d_z=1,
        encoder_blocks=block, critic_blocks=block,
        classifier_blocks=(), regressor_blocks=(),
        decoder_stages=(), decoder_base_channels=1,
        head_mode="gap")


@pytest.fixture()
def toy_bundle():
    from poseanon.model import ModelBundle
    return ModelBundle.build(toy_model_config(), seed=11)


def make_batch(bundle, batch_size=4, seed=0, dtype=torch.float32):
    """Random labeled image batch matching a bundle's geometry."""
    g = torch.Generator()
    g.manual_seed(seed)
    h, w, c = bundle.image_size
    x = (torch.rand((batch_size, c, h, w), generator=g, dtype=dtype) * 2 - 1)
    y_id = torch.randint(1, bundle.n_subjects + 1, (batch_size,), generator=g)
    y_s = torch.randint(1, bundle.n_subjects + 1, (batch_size,), generator=g)
    y_pose = (torch.rand((batch_size, 3), generator=g, dtype=dtype) * 2 - 1) * 0.6
    noise = torch.randn((batch_size, bundle.d_z), generator=g, dtype=dtype)
    return x, y_id, y_pose, y_s, noise
