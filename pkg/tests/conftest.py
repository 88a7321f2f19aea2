import os
import sys
from types import SimpleNamespace

import pytest

sys.path.append(os.path.abspath(os.path.join(os.path.dirname(__file__), "..")))

from llmdiff.cli import main  # noqa: E402
from llmdiff.config import RunConfig, write_resolved_config  # noqa: E402
from llmdiff.numerics import RandomStream  # noqa: E402
from llmdiff.train import train_adapter, train_base, train_clf, train_lm, train_metric  # noqa: E402
from llmdiff.verify import mini_denoiser, mini_lm, mini_score  # noqa: E402


def tiny_run_config():
    """A run config small enough for end-to-end smoke runs on CPU."""
    config = RunConfig()
    config.data.n_items = 24
    config.data.image_size = 8
    config.lm.hidden = 8
    config.lm.n_blocks = 2
    config.lm.n_heads = 2
    config.lm.steps = 3
    config.lm.batch_size = 4
    config.lm.log_every = 1
    config.diffusion.n_steps = 5
    config.diffusion.channels = [4, 8, 8]
    config.diffusion.cond_dim = 8
    config.diffusion.attn_heads = 2
    config.diffusion.steps = 3
    config.diffusion.batch_size = 4
    config.diffusion.log_every = 1
    config.adapter.steps = 3
    config.adapter.batch_size = 4
    config.adapter.log_every = 1
    config.eval.n_captions = 2
    config.eval.images_per_caption = 2
    config.eval.embed_dim = 8
    config.eval.metric_steps = 2
    config.eval.metric_batch = 4
    config.eval.clf_steps = 2
    config.eval.clf_batch = 4
    config.eval.clf_holdout = 4
    config.eval.clf_min_accuracy = 0.0
    return config


@pytest.fixture
def stream():
    return RandomStream(seed=1234)


@pytest.fixture
def lm64():
    return mini_lm(seed=0)


@pytest.fixture
def denoiser64():
    return mini_denoiser(seed=0)


@pytest.fixture
def score64(lm64):
    return mini_score(lm64.n_blocks, seed=0)


@pytest.fixture
def tiny_config():
    return tiny_run_config()


@pytest.fixture(scope="session")
def trained_run(tmp_path_factory):
    """Every training phase run once on a tiny generated dataset."""
    root = tmp_path_factory.mktemp("run")
    config = tiny_run_config()
    config_path = write_resolved_config(config, str(root))
    data, test = str(root / "data"), str(root / "test")
    assert main(["gen-data", "--config", config_path, "--out", data]) == 0
    assert main(["gen-data", "--config", config_path, "--out", test, "--split", "test", "--n", "4"]) == 0
    lm_ckpt = train_lm(config, data, str(root / "lm"))
    base_ckpt = train_base(config, data, str(root / "base"))
    return SimpleNamespace(
        root=root,
        config=config,
        config_path=config_path,
        data=data,
        test=test,
        lm=lm_ckpt,
        base=base_ckpt,
        adapter=train_adapter(config, data, lm_ckpt, base_ckpt, str(root / "adapter")),
        metric=train_metric(config, data, str(root / "metric")),
        clf=train_clf(config, data, str(root / "clf")),
    )
