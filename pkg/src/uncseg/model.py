"""Small fully-convolutional encoder-decoder producing 2-class pixel probabilities."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import ShapeError

ModelParams = dict  # ordered layer-name -> ndarray


class InputError(ValueError):
    pass


@dataclass(frozen=True)
class ArchConfig:
    input_channels: int = 3
    widths: tuple = (8, 16, 16, 8)
    side: int = 64

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        if len(self.widths) != 4 or any(w <= 0 for w in self.widths):
            raise ValueError(f"widths must be 4 positive ints, got {self.widths}")
        if self.input_channels <= 0:
            raise ValueError("input_channels must be positive")
        if self.side <= 0 or self.side % 4:
            raise ValueError(f"side must be a positive multiple of 4, got {self.side}")

    def layers(self):
        """(name, in_channels, out_channels, stride) for each conv in order."""
        w0, w1, w2, w3 = self.widths
        return [
            ("enc1", self.input_channels, w0, 1),
            ("enc2", w0, w1, 2),
            ("mid", w1, w2, 1),
            ("dec1", w2, w3, 1),
            ("head", w3, 2, 1),
        ]


def init_params(config: ArchConfig, seed: int, dtype=np.float32) -> ModelParams:
    """He-normal kernels (std = sqrt(2 / fan_in)) and zero biases."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, cin, cout, _ in config.layers():
        fan_in = cin * 9
        params[f"{name}.weight"] = (rng.standard_normal((cout, cin, 3, 3))
                                    * np.sqrt(2.0 / fan_in)).astype(dtype)
        params[f"{name}.bias"] = np.zeros(cout, dtype=dtype)
    return params


def zeros_like_params(config: ArchConfig, dtype=np.float32) -> ModelParams:
    return {k: np.zeros_like(v) for k, v in init_params(config, 0, dtype).items()}


def param_count(params: ModelParams) -> int:
    return sum(v.size for v in params.values())


def logits(params, images, config: ArchConfig):
    """Forward pass up to the 2-channel logits.  ``params`` may hold Vars."""
    h = T.transpose(images, (0, 2, 3, 1))
    for name, _, _, stride in config.layers():
        h = T.conv2d(h, params[f"{name}.weight"], params[f"{name}.bias"],
                     stride=stride, channels_last=True)
        if name == "head":
            break
        h = T.relu(h)
        if name == "mid":
            h = T.upsample2x(h, channels_last=True)
    return T.transpose(h, (0, 3, 1, 2))


def forward(params, images, config: ArchConfig):
    """Per-pixel probabilities [N, 2, H, W] for images [N, C, H, W]."""
    x = T._value(images)
    expected = (config.input_channels, config.side, config.side)
    if x.ndim != 4 or x.shape[1:] != expected:
        raise ShapeError(f"expected images [N, {expected[0]}, {expected[1]}, "
                         f"{expected[2]}], got {x.shape}")
    if not np.all(np.isfinite(x)):
        raise InputError("images contain non-finite values")
    return T.softmax_channels(logits(params, images, config))


def predict_mask(probs: np.ndarray) -> np.ndarray:
    """1 where foreground strictly beats background; exact ties go to background."""
    probs = np.asarray(probs)
    return (probs[:, 1] > probs[:, 0]).astype(np.uint8)
