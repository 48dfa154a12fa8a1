"""Shared fixtures: generated scenes and trained diffusion stacks.

The expensive artifacts (datasets, codec, denoisers, a partially trained
cloud) are session-scoped and cached per seed so the module tests and the
acceptance suite share one build.
"""

import numpy as np
import pytest

from wildsplat.diffusion import (DenoiserModel, NoiseSchedule, encode_dataset,
                                 finetune_constrained, train_base, train_codec)
from wildsplat.synth import SceneSpec, dense_init, generate, load_dataset
from wildsplat.trainer import (DiffusionModels, TrainSchedule, anchor_images,
                               anchor_masks, prior_corpus, train_gaussians)


@pytest.fixture(scope="session")
def scene_factory(tmp_path_factory):
    cache = {}

    def get(seed=0, **kwargs):
        key = (seed, tuple(sorted(kwargs.items())))
        if key not in cache:
            spec = SceneSpec(seed=seed, **kwargs)
            root = tmp_path_factory.mktemp(f"scene{seed}")
            cache[key] = load_dataset(generate(spec, root / "data"))
        return cache[key]

    return get


@pytest.fixture(scope="session")
def default_scene(scene_factory):
    """The standard benchmark: 5 occluded train views, 10 clean test views."""
    return scene_factory(0)


@pytest.fixture(scope="session")
def small_scene(scene_factory):
    """Cheap 64px scene for loop-heavy tests."""
    return scene_factory(11, n_points=200, n_train=3, n_test=2,
                         width=64, height=64, focal=70.0)


@pytest.fixture(scope="session")
def stack_factory(scene_factory):
    cache = {}

    def get(seed=0):
        if seed not in cache:
            dataset = scene_factory(seed)
            corpus = prior_corpus(dataset, seed=seed)
            codec, _ = train_codec(corpus, seed=seed)
            schedule = NoiseSchedule()
            base, _ = train_base(DenoiserModel(seed=seed),
                                 encode_dataset(codec, corpus),
                                 steps=800, seed=seed, schedule=schedule)
            anchors = encode_dataset(codec, anchor_images(dataset))
            constrained = finetune_constrained(base, anchors, iters=400,
                                               seed=seed, schedule=schedule,
                                               masks=anchor_masks(dataset))
            cache[seed] = DiffusionModels(codec, base, constrained, schedule)
        return cache[seed]

    return get


@pytest.fixture(scope="session")
def diffusion_stack(stack_factory):
    """Codec + base + constrained trained on the default scene."""
    return stack_factory(0)


@pytest.fixture(scope="session")
def warmed_cloud(default_scene):
    """200 masked-loss iterations: renders look like the scene, imperfectly."""
    cloud = dense_init(default_scene, seed=0)
    sched = TrainSchedule(total_iters=200, tau_c=200, tau_o=float("inf"), beta=0.0)
    cloud, _ = train_gaussians(cloud, default_scene, sched, seed=0)
    return cloud


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)
