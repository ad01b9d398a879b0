"""BaseNet -> {3 x ProbNet, 2 x RegrNet}, all 1-D convolutions.

BaseNet: ``base_layers`` convs (kernel ``base_kernel``, ``base_channels``, ReLU).
Each ProbNet: conv(head_kernel, head_channels, ReLU) -> conv(head_kernel, 1, sigmoid).
Each RegrNet: same shape, identity output.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import NamedTuple

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor

PROB_HEADS = ("prob_c", "prob_s", "prob_e")
REGR_HEADS = ("regr_s", "regr_e")


@dataclass(frozen=True)
class NetworkConfig:
    input_channels: int = 8
    base_channels: int = 32
    head_channels: int = 16
    base_kernel: int = 9
    head_kernel: int = 5
    base_layers: int = 2
    window_length: int = 128

    def __post_init__(self):
        for name in ("input_channels", "base_channels", "head_channels", "base_layers", "window_length"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        for name in ("base_kernel", "head_kernel"):
            k = int(getattr(self, name))
            if k < 1 or k % 2 == 0:
                raise ValueError(f"{name} must be a positive odd integer, got {k}")

    def to_dict(self):
        return asdict(self)

    def layer_shapes(self):
        """Ordered (name, kernel_size, c_in, c_out) for every conv layer."""
        layers = []
        c = self.input_channels
        for i in range(self.base_layers):
            layers.append((f"base.{i}", self.base_kernel, c, self.base_channels))
            c = self.base_channels
        for head in PROB_HEADS + REGR_HEADS:
            layers.append((f"{head}.0", self.head_kernel, self.base_channels, self.head_channels))
            layers.append((f"{head}.1", self.head_kernel, self.head_channels, 1))
        return layers

    def num_parameters(self):
        return sum(k * ci * co + co for _, k, ci, co in self.layer_shapes())


class PhaseOutputs(NamedTuple):
    p_c: Tensor
    p_s: Tensor
    p_e: Tensor
    o_s: Tensor
    o_e: Tensor


def init_params(config: NetworkConfig, seed: int) -> dict[str, Tensor]:
    """Glorot-uniform weights (fans include the kernel width), zero biases."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, k, ci, co in config.layer_shapes():
        s = np.sqrt(6.0 / (k * ci + k * co))
        params[f"{name}.weight"] = Tensor(rng.uniform(-s, s, size=(k * ci, co)), requires_grad=True)
        params[f"{name}.bias"] = Tensor(np.zeros(co), requires_grad=True)
    return params


def _conv(params, name, x):
    return ad.conv1d(x, params[f"{name}.weight"], params[f"{name}.bias"])


def forward(params, features, config: NetworkConfig) -> PhaseOutputs:
    x = ad.as_tensor(features)
    if x.data.ndim != 2 or x.shape[1] != config.input_channels:
        raise ShapeError(f"features of shape {x.shape} do not match {config.input_channels} input channels")

    h = x
    for i in range(config.base_layers):
        h = ad.relu(_conv(params, f"base.{i}", h))

    outs = []
    for head in PROB_HEADS + REGR_HEADS:
        z = ad.relu(_conv(params, f"{head}.0", h))
        z = _conv(params, f"{head}.1", z)[:, 0]
        outs.append(ad.sigmoid(z) if head in PROB_HEADS else z)
    return PhaseOutputs(*outs)


def parameter_count(params) -> int:
    return int(sum(p.size for p in params.values()))
