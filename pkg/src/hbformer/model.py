"""The full segmentation network: encoder plus one of the two decoders."""

from __future__ import annotations

import numpy as np

from .config import ModelConfig
from .decoder import MFFDecoder, PlainDecoder
from .encoder import Encoder
from .module import Module
from .tensor import Tensor


class HBFormer(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator | int = 0):
        if not isinstance(rng, np.random.Generator):
            rng = np.random.default_rng(rng)
        self.cfg = cfg
        self.encoder = Encoder(cfg, rng)
        self.decoder = MFFDecoder(cfg, rng) if cfg.use_mff_decoder else PlainDecoder(cfg, rng)

    def forward(self, image: Tensor) -> Tensor:
        """Class logits ``[B, num_classes, H, W]`` (not probabilities)."""
        return self.decoder(self.encoder(image))
