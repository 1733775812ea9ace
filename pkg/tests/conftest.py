import os
import sys

import matplotlib
import pytest

matplotlib.use("Agg")

sys.path.insert(0, os.path.join(os.path.dirname(os.path.abspath(__file__)), '..'))

from bt_confidence.model import ModelConfig, init_params  # noqa: E402
from bt_confidence.numerics import RngStream  # noqa: E402


@pytest.fixture
def tiny_config():
    """只有一层、两个注意力头的小模型，用于梯度校验与解码测试"""
    return ModelConfig(src_vocab_size=9, tgt_vocab_size=8, d_model=8, d_ff=16, n_layers=1, n_heads=2,
                       max_len=6, dropout=0.1, label_smoothing=0.1)


@pytest.fixture
def tiny_params(tiny_config):
    return init_params(tiny_config, RngStream(0))
