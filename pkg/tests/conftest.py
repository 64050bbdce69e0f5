from pathlib import Path

import numpy as np
import pytest

from omniview_tuning.services.model import EncoderConfig, init_model_state
from omniview_tuning.services.synthdata import GenSpec, generate_splits
from omniview_tuning.services.trainer import TrainConfig


CONFIGS_DIR = Path(__file__).resolve().parents[1] / "configs"


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_gen():
    return GenSpec(
        num_categories=3,
        objects_per_category=2,
        views_per_object=6,
        input_dim=24,
        clean_per_category=4,
        eval_objects_per_category=1,
        seed=7,
    )


@pytest.fixture
def tiny_splits(tiny_gen):
    return generate_splits(tiny_gen)


@pytest.fixture
def tiny_train():
    return TrainConfig(
        embed_dim=6,
        lora_rank=2,
        k=2,
        batch_size=8,
        epochs=2,
        pretrain_epochs=2,
        learning_rate=0.05,
    )


@pytest.fixture
def linear_state():
    return init_model_state(EncoderConfig(input_dim=12, embed_dim=6), lora_rank=2, seed=3)


@pytest.fixture
def attention_state():
    visual = EncoderConfig(
        input_dim=12, embed_dim=6, architecture="attention", token_count=3, token_dim=4
    )
    return init_model_state(visual, lora_rank=2, seed=3)


@pytest.fixture
def smoke_config():
    return CONFIGS_DIR / "smoke.json"
