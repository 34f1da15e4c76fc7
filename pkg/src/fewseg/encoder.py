"""Shared convolutional feature extractor.

A small N-stage strided CNN stands in for a large pretrained backbone: each
stage is a KxK same-padded convolution with a configurable stride, followed by
ReLU.  The trailing ReLU of the last stage can be dropped (``final_activation``)
so the output feature space is not confined to the positive orthant.

One parameter set serves both the support and query branches.
"""

from __future__ import annotations

import json
import zipfile
from dataclasses import dataclass, field, asdict
from io import BytesIO

import numpy as np

from .autodiff import Tensor, NumericError


class ConfigError(ValueError):
    """Encoder configuration incompatible with the input it was given."""


@dataclass(frozen=True)
class EncoderConfig:
    channels: tuple = (16, 32, 64)
    strides: tuple = (2, 2, 2)
    kernel_size: int = 3
    final_activation: bool = False
    in_channels: int = 3

    def __post_init__(self):
        if len(self.channels) == 0:
            raise ConfigError("encoder needs at least one stage")
        if len(self.strides) != len(self.channels):
            raise ConfigError("channels and strides must have equal length")
        if any(c <= 0 for c in self.channels) or any(s <= 0 for s in self.strides):
            raise ConfigError("channels and strides must be positive")

    @property
    def total_stride(self) -> int:
        return int(np.prod(self.strides))

    def output_shape(self, height: int, width: int) -> tuple:
        if height % self.total_stride or width % self.total_stride:
            raise ConfigError(
                f"input {height}x{width} not divisible by total stride {self.total_stride}"
            )
        return (self.channels[-1], height // self.total_stride, width // self.total_stride)

    def param_count(self) -> int:
        n = 0
        cin = self.in_channels
        for cout in self.channels:
            n += cout * cin * self.kernel_size**2 + cout
            cin = cout
        return n


def init_params(cfg: EncoderConfig, seed: int = 0, dtype=np.float32) -> dict:
    """Fan-in-scaled uniform initialization, seed-controlled.

    Returns a flat dict ``{"stage{i}.weight": ..., "stage{i}.bias": ...}``.
    """
    rng = np.random.default_rng(seed)
    params = {}
    cin = cfg.in_channels
    k = cfg.kernel_size
    for i, cout in enumerate(cfg.channels):
        bound = 1.0 / np.sqrt(cin * k * k)
        params[f"stage{i}.weight"] = rng.uniform(
            -bound, bound, size=(cout, cin, k, k)
        ).astype(dtype)
        params[f"stage{i}.bias"] = rng.uniform(-bound, bound, size=cout).astype(dtype)
        cin = cout
    return params


def as_tensors(params: dict, requires_grad: bool = True) -> dict:
    return {k: Tensor(v, requires_grad=requires_grad) for k, v in params.items()}


def encode(image: np.ndarray, params: dict, cfg: EncoderConfig) -> Tensor:
    """Map an HxWx3 image in [0,1] to a CxH'xW' feature tensor.

    ``params`` maps names to Tensors (trainable) or is first wrapped here.
    Differentiable w.r.t. parameters; the image enters as a constant.
    """
    if image.ndim != 3 or image.shape[2] != cfg.in_channels:
        raise ConfigError(f"expected HxWx{cfg.in_channels} image, got {image.shape}")
    for name, p in params.items():
        arr = p.data if isinstance(p, Tensor) else p
        if not np.all(np.isfinite(arr)):
            raise NumericError(f"non-finite values in parameter {name}")
    if not isinstance(next(iter(params.values())), Tensor):
        params = as_tensors(params, requires_grad=False)
    cfg.output_shape(image.shape[0], image.shape[1])

    dtype = params["stage0.weight"].dtype
    x = Tensor(np.ascontiguousarray(image.transpose(2, 0, 1)).astype(dtype))
    pad = cfg.kernel_size // 2
    n_stages = len(cfg.channels)
    for i in range(n_stages):
        x = x.conv2d(params[f"stage{i}.weight"], params[f"stage{i}.bias"], cfg.strides[i], pad)
        if i < n_stages - 1 or cfg.final_activation:
            x = x.relu()
    return x


def gradient_of(loss: Tensor, params: dict) -> dict:
    """Backpropagate a scalar loss and collect gradients per parameter name.

    Parameters that received no gradient signal come back as zeros.
    """
    loss.backward()
    return {
        k: (p.grad if p.grad is not None else np.zeros_like(p.data))
        for k, p in params.items()
    }


# ---- checkpoint container ----------------------------------------------
#
# A checkpoint is a zip archive holding one raw little-endian .npy per
# parameter (entry name = parameter name + ".npy") plus "meta.json" with
# the encoder config and provenance fields (seed, stage, ...).


def save_checkpoint(path, params: dict, cfg: EncoderConfig, meta: dict | None = None):
    meta = dict(meta or {})
    meta["encoder"] = asdict(cfg)
    with zipfile.ZipFile(path, "w", zipfile.ZIP_STORED) as zf:
        for name, arr in params.items():
            arr = arr.data if isinstance(arr, Tensor) else arr
            buf = BytesIO()
            np.save(buf, np.asarray(arr, order="C"))
            zf.writestr(name + ".npy", buf.getvalue())
        zf.writestr("meta.json", json.dumps(meta, indent=2, sort_keys=True))


def load_checkpoint(path):
    """Returns (params dict of ndarrays, EncoderConfig, meta dict)."""
    with zipfile.ZipFile(path, "r") as zf:
        meta = json.loads(zf.read("meta.json"))
        params = {}
        for entry in zf.namelist():
            if entry.endswith(".npy"):
                params[entry[: -len(".npy")]] = np.load(BytesIO(zf.read(entry)))
    enc = meta.pop("encoder")
    cfg = EncoderConfig(
        channels=tuple(enc["channels"]),
        strides=tuple(enc["strides"]),
        kernel_size=enc["kernel_size"],
        final_activation=enc["final_activation"],
        in_channels=enc["in_channels"],
    )
    return params, cfg, meta
