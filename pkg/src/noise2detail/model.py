"""The three-convolution denoising network and its checkpoint format.

Layout: 3x3 conv C->48, ReLU, 3x3 conv 48->48, ReLU, 1x1 conv 48->C.
For a single-channel image that is 480 + 20,784 + 49 = 21,313 parameters.

Checkpoints are ``.npz`` archives holding one array per parameter
(``w1, b1, w2, b2, w3, b3``) plus a ``magic`` entry equal to
:data:`CHECKPOINT_MAGIC`; loading rejects archives without it.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .tensor import ShapeError, Tensor, conv_stack, no_grad

__all__ = [
    "CHECKPOINT_MAGIC",
    "FEATURES",
    "PARAM_NAMES",
    "DenoiserNet",
    "apply",
    "forward",
    "init_net",
    "load_checkpoint",
    "param_count",
    "save_checkpoint",
]

FEATURES = 48
PARAM_NAMES = ("w1", "b1", "w2", "b2", "w3", "b3")
CHECKPOINT_MAGIC = "noise2detail-checkpoint-v1"


@dataclass
class DenoiserNet:
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor
    w3: Tensor
    b3: Tensor

    @property
    def channels(self) -> int:
        return self.w1.shape[1]

    @property
    def dtype(self) -> np.dtype:
        return self.w1.dtype

    def parameters(self) -> list[Tensor]:
        return [getattr(self, n) for n in PARAM_NAMES]

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        return [(n, getattr(self, n)) for n in PARAM_NAMES]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def copy(self) -> DenoiserNet:
        return DenoiserNet(
            **{n: Tensor(p.data.copy(), requires_grad=p.requires_grad, name=n) for n, p in self.named_parameters()}
        )

    def state_dict(self) -> dict[str, np.ndarray]:
        return {n: p.data for n, p in self.named_parameters()}

    def __call__(self, x: Tensor) -> Tensor:
        return forward(self, x)


def param_count(net: DenoiserNet) -> int:
    return sum(p.data.size for p in net.parameters())


def _kaiming_uniform(rng: np.random.Generator, shape: tuple[int, ...], dtype) -> np.ndarray:
    fan_in = int(np.prod(shape[1:]))
    bound = np.sqrt(2.0) * np.sqrt(3.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def init_net(channels: int, seed: int = 0, dtype=np.float32) -> DenoiserNet:
    """Kaiming-uniform (ReLU gain, fan-in) weights and zero biases."""
    if channels < 1:
        raise ValueError(f"channels must be >= 1, got {channels}")
    rng = np.random.default_rng(seed)
    shapes = {
        "w1": (FEATURES, channels, 3, 3),
        "w2": (FEATURES, FEATURES, 3, 3),
        "w3": (channels, FEATURES, 1, 1),
    }
    params = {}
    for i in (1, 2, 3):
        wshape = shapes[f"w{i}"]
        params[f"w{i}"] = Tensor(_kaiming_uniform(rng, wshape, dtype), requires_grad=True, name=f"w{i}")
        params[f"b{i}"] = Tensor(np.zeros(wshape[0], dtype=dtype), requires_grad=True, name=f"b{i}")
    return DenoiserNet(**params)


def forward(net: DenoiserNet, x: Tensor) -> Tensor:
    """Apply the network to an N x C x H x W tensor; output has the same shape."""
    if x.data.ndim != 4:
        raise ShapeError(f"network input must be N x C x H x W, got shape {x.shape}")
    if x.shape[1] != net.channels:
        raise ShapeError(f"network expects {net.channels} channels, input has {x.shape[1]}")
    return conv_stack(x, [(net.w1, net.b1, True), (net.w2, net.b2, True), (net.w3, net.b3, False)])


def apply(net: DenoiserNet, batch: np.ndarray) -> np.ndarray:
    """Inference on an ``N x H x W x C`` numpy batch, returning the same layout."""
    batch = np.asarray(batch, dtype=net.dtype)
    with no_grad():
        out = forward(net, Tensor(batch.transpose(0, 3, 1, 2)))
    return np.ascontiguousarray(out.data.transpose(0, 2, 3, 1))


def save_checkpoint(net: DenoiserNet, path) -> None:
    np.savez(Path(path), magic=np.array(CHECKPOINT_MAGIC), **net.state_dict())


def load_checkpoint(path) -> DenoiserNet:
    with np.load(Path(path), allow_pickle=False) as archive:
        if "magic" not in archive.files or str(archive["magic"]) != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a {CHECKPOINT_MAGIC} archive")
        missing = [n for n in PARAM_NAMES if n not in archive.files]
        if missing:
            raise ValueError(f"{path}: checkpoint missing parameters {missing}")
        params = {n: Tensor(archive[n], requires_grad=True, name=n) for n in PARAM_NAMES}
    net = DenoiserNet(**params)
    c = net.channels
    expected = {
        "w1": (FEATURES, c, 3, 3), "b1": (FEATURES,),
        "w2": (FEATURES, FEATURES, 3, 3), "b2": (FEATURES,),
        "w3": (c, FEATURES, 1, 1), "b3": (c,),
    }
    for n, p in net.named_parameters():
        if p.shape != expected[n]:
            raise ShapeError(f"{path}: parameter {n} has shape {p.shape}, expected {expected[n]}")
    return net
