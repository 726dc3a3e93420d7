import numpy as np
import pytest
import torch

from hypernst.data import SyntheticCorpusSpec, make_synthetic_corpus
from hypernst.generator import GeneratorSpec, build_generator
from hypernst.metrics import build_feature_extractor


@pytest.fixture(scope="session")
def corpus32(tmp_path_factory):
    root = tmp_path_factory.mktemp("corpus32")
    return make_synthetic_corpus(SyntheticCorpusSpec(n_content=4, n_style=4, image_size=32, seed=5), root)


@pytest.fixture(scope="session")
def features():
    return build_feature_extractor(0)


@pytest.fixture
def small_gen():
    return build_generator(GeneratorSpec(image_size=16, base_channels=8, max_channels=8, latent_dim=8,
                                         mapping_depth=2), 7)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def rand_image(seed, size=32):
    g = torch.Generator().manual_seed(seed)
    return torch.rand((3, size, size), generator=g) * 2 - 1


TINY = dict(image_size=32, steps_stage1=4, steps_stage2=4, generator_steps=30, inverter_steps=20,
            deterministic=True, noise=False)


@pytest.fixture(scope="session")
def tiny_backbone(corpus32):
    from hypernst.backbone import build_backbone, pool_images
    from hypernst.training import TrainConfig
    cfg = TrainConfig(**TINY)
    with torch.random.fork_rng():
        return build_backbone(cfg.generator_spec(), pool_images([corpus32], 32), 7, 30, 20, 64)


@pytest.fixture(scope="session")
def tiny_model(tmp_path_factory, corpus32, tiny_backbone):
    from hypernst.training import TrainConfig, run_training
    out = tmp_path_factory.mktemp("tiny_run")
    res = run_training(TrainConfig(**TINY), corpus32, out, backbone=tiny_backbone, resume=False)
    return res.model_dir
