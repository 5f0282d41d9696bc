from __future__ import annotations

import pytest
import torch
from transformers import Wav2Vec2Config, Wav2Vec2Model

from exutil import TINY_HIDDEN


@pytest.fixture(scope="session")
def tiny_model():
    """Random-weight wav2vec2 with the standard conv stack (320-sample
    stride, 400-sample receptive field) but a small transformer; no network."""
    cfg = Wav2Vec2Config(
        hidden_size=TINY_HIDDEN,
        num_hidden_layers=2,
        num_attention_heads=2,
        intermediate_size=64,
        conv_dim=(TINY_HIDDEN,) * 7,
        # the XLS-R family normalizes conv features per frame (layer norm),
        # which keeps the encoder local in time; group norm would not be
        feat_extract_norm="layer",
        do_stable_layer_norm=True,
    )
    torch.manual_seed(0)
    model = Wav2Vec2Model(cfg)
    model.eval()
    return model
