import pytest
import torch

from p3lm.model import ModelConfig, P3LM

torch.set_num_threads(1)


def make_model(seed=0, streams=2, share=True, layers=2, dim=16, heads=2, vocab=20, tie=True, double=False, **extra):
    cfg = ModelConfig(
        layers=layers,
        dim=dim,
        ffn=2 * dim,
        heads=heads,
        vocab=vocab,
        streams=streams,
        max_positions=24,
        share_stream_params=share,
        tie_output=tie,
        dropout=0.0,
        **extra,
    )
    model = P3LM(cfg, seed=seed).eval()
    return model.double() if double else model


@pytest.fixture
def tiny_model():
    return make_model()
