import numpy as np
import pytest

from umgen.core import Profile
from umgen.eval.bench import random_token_frame
from umgen.model.bundle import ModelBundle
from umgen.model.config import ModelConfig
from umgen.model.network import init_params
from umgen.tokenizer import build_layout
from umgen.vq import Codebook


@pytest.fixture(scope="session")
def tiny_profile():
    return Profile.tiny()


@pytest.fixture(scope="session")
def tiny_layout(tiny_profile):
    return build_layout(tiny_profile)


@pytest.fixture(scope="session")
def tiny_cfg(tiny_profile, tiny_layout):
    return ModelConfig.from_profile(tiny_profile, tiny_layout)


def random_codebooks(profile, seed=0):
    rng = np.random.default_rng(seed)
    map_cb = Codebook(rng.random((profile.map_codebook,
                                  profile.patch ** 2 * 7)).astype(np.float32),
                      profile.patch, 7, seed)
    img_cb = Codebook(rng.random((profile.image_codebook,
                                  profile.patch ** 2 * 3)).astype(np.float32),
                      profile.patch, 3, seed)
    return map_cb, img_cb


@pytest.fixture(scope="session")
def tiny_bundle(tiny_profile):
    cfg = ModelConfig.from_profile(tiny_profile)
    params = init_params(cfg, seed=3, init_std=0.1)
    map_cb, img_cb = random_codebooks(tiny_profile, seed=7)
    return ModelBundle.create(tiny_profile, params, map_cb, img_cb)


@pytest.fixture
def frame_maker(tiny_layout):
    def make(seed=0):
        return random_token_frame(tiny_layout, np.random.default_rng(seed))
    return make


@pytest.fixture(scope="session")
def small_world_dataset(tmp_path_factory):
    """A little desk-profile dataset with shrunken codebooks, for pipelines."""
    from umgen.world import build_world, simulate_sequence
    prof = Profile.desk(map_codebook=48, image_codebook=48, d_model=32,
                        steps=40, learning_rate=1e-3)
    seqs = [simulate_sequence(build_world(ws), i, 12, prof)
            for ws in range(3) for i in range(2)]
    return prof, seqs
