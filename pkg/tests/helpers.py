"""Small shared builders for the trainer, checkpoint, CLI and acceptance tests."""

import numpy as np

from w4cnet.data import extract_windows
from w4cnet.model import ModelConfig, build
from w4cnet.synth import SynthConfig, generate
from w4cnet.trainer import TrainConfig


def tiny_model_config(variant="convgru", channels=(4, 8)):
    return ModelConfig(variant=variant, depth=len(channels), stage_channels=list(channels), input_channels=7)


def synth_windows(n=6, size=16, seed=0, target="temperature", **kw):
    arc = generate(SynthConfig(num_sequences=n, size=size, **kw), seed=seed)
    arc.region = "synth"
    return extract_windows(arc, target=target)


def tiny_setup(variant="convgru", seed=0, **train_kw):
    cfg = TrainConfig(**{"batch_size": 4, "learning_rate": 3e-3, "augment": True, "budget_hours": None,
                         "seed": seed, **train_kw})
    return build(tiny_model_config(variant), seed=seed), cfg


def weights_bytes(model):
    return [p.data.tobytes() for p in model.parameters()]


def assert_same_weights(a, b):
    assert len(a) == len(b)
    for x, y in zip(a, b):
        assert x == y


__all__ = ["np", "tiny_model_config", "synth_windows", "tiny_setup", "weights_bytes", "assert_same_weights"]
