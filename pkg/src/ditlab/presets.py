"""Desk-scale settings used by the acceptance suite and the scripts in ``scripts/``.

Everything here fits a single CPU core: one optimizer step of the toy model at
micro batch 8 takes roughly 45 ms.
"""

from __future__ import annotations

from .model import ModelConfig
from .scenes import Dataset, make_dataset
from .train import TrainConfig

TOY_MODEL = ModelConfig(frames=4, height=16, width=16, patch=4, embed_dim=64, num_blocks=6, num_heads=4)
TOY_TRAIN = TrainConfig(micro_batch=8, learning_rate=2e-3, total_iterations=2000, tau=400)
TOY_DATA = {"count": 200, "seed": 0, "frames": 4, "height": 16, "width": 16}


def toy_dataset() -> Dataset:
    return make_dataset(**TOY_DATA)
