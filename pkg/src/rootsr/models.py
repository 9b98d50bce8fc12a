"""Network architectures: FSRCNN, the residual SR generator, the patch
discriminator and a small encoder-decoder segmenter.

Every network is a flat, named list of layers. Parameter names are
``<layer>.<tensor>`` (e.g. ``map2.weight``) and are what checkpoints store.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from .errors import ArchitectureError, ParameterError, ShapeError
from .tensor import (
    Parameter,
    Tensor,
    add,
    conv2d,
    deconv2d,
    flatten,
    linear,
    no_grad,
    prelu,
)

PRELU_INIT = 0.25


def _he(rng: np.random.Generator, shape, fan_in: float) -> np.ndarray:
    return (rng.standard_normal(shape) * math.sqrt(2.0 / fan_in)).astype(np.float32)


class Conv2d:
    def __init__(self, cin: int, cout: int, k: int, rng: np.random.Generator, stride: int = 1,
                 padding: int | None = None):
        self.stride = stride
        self.padding = k // 2 if padding is None else padding
        self.weight = Parameter(_he(rng, (cout, cin, k, k), cin * k * k))
        self.bias = Parameter(np.zeros(cout, dtype=np.float32))

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias, self.stride, self.padding)

    def parameters(self):
        return {"weight": self.weight, "bias": self.bias}


class Deconv2d:
    def __init__(self, cin: int, cout: int, k: int, rng: np.random.Generator, stride: int,
                 padding: int, output_padding: int):
        self.stride, self.padding, self.output_padding = stride, padding, output_padding
        # inputs reaching one output pixel: Cin * (k / stride)^2
        self.weight = Parameter(_he(rng, (cin, cout, k, k), cin * k * k / stride**2))
        self.bias = Parameter(np.zeros(cout, dtype=np.float32))

    def __call__(self, x: Tensor) -> Tensor:
        return deconv2d(x, self.weight, self.bias, self.stride, self.padding,
                        self.output_padding)

    def parameters(self):
        return {"weight": self.weight, "bias": self.bias}


class PReLU:
    def __init__(self, channels: int):
        self.slope = Parameter(np.full(channels, PRELU_INIT, dtype=np.float32))

    def __call__(self, x: Tensor) -> Tensor:
        return prelu(x, self.slope)

    def parameters(self):
        return {"slope": self.slope}


class Linear:
    def __init__(self, fin: int, fout: int, rng: np.random.Generator):
        self.weight = Parameter(_he(rng, (fin, fout), fin))
        self.bias = Parameter(np.zeros(fout, dtype=np.float32))

    def __call__(self, x: Tensor) -> Tensor:
        return linear(flatten(x) if x.data.ndim > 2 else x, self.weight, self.bias)

    def parameters(self):
        return {"weight": self.weight, "bias": self.bias}


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class Network:
    arch = "network"

    def __init__(self, config: dict, layers: list[tuple[str, object]]):
        self.config = dict(config)
        self.layers = layers

    def parameters(self) -> dict[str, Parameter]:
        out = {}
        for lname, layer in self.layers:
            for pname, p in layer.parameters().items():
                out[f"{lname}.{pname}"] = p
        return out

    def forward(self, x: Tensor) -> Tensor:
        for _, layer in self.layers:
            x = layer(x)
        return x

    def __call__(self, x) -> Tensor:
        return self.forward(_as_tensor(x))

    def infer(self, x: np.ndarray) -> np.ndarray:
        with no_grad():
            return self(x).data

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self.parameters().items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = self.parameters()
        if set(state) != set(params):
            missing = sorted(set(params) - set(state))
            extra = sorted(set(state) - set(params))
            raise ShapeError(f"{self.arch}: state mismatch, missing={missing} unexpected={extra}")
        for k, p in params.items():
            value = np.asarray(state[k])
            if value.shape != p.shape:
                raise ShapeError(f"{self.arch}: {k} has shape {value.shape}, expected {p.shape}")
            p.data = value.astype(p.dtype).copy()
            p.grad = np.zeros_like(p.data)
            p.adam_m = np.zeros_like(p.data)
            p.adam_v = np.zeros_like(p.data)
            p.step_count = 0

    def astype(self, dtype) -> Network:
        """Copy of this network with every parameter cast to ``dtype``."""
        clone = build_model(self.arch, self.config, seed=0)
        for k, p in clone.parameters().items():
            src = self.parameters()[k]
            p.data = src.data.astype(dtype)
            p.grad = np.zeros_like(p.data)
            p.adam_m = np.zeros_like(p.data)
            p.adam_v = np.zeros_like(p.data)
        return clone

    def copy(self) -> Network:
        return self.astype(np.float32)

    def parameter_count(self) -> int:
        return sum(p.data.size for p in self.parameters().values())


# ---------------------------------------------------------------------------
# FSRCNN


@dataclass(frozen=True)
class FsrcnnConfig:
    d: int = 56
    s: int = 12
    m: int = 4
    n: int = 4

    def __post_init__(self):
        for name in ("d", "s", "m", "n"):
            if getattr(self, name) < 1:
                raise ParameterError(f"FsrcnnConfig.{name} must be positive")
        if self.s >= self.d:
            raise ParameterError(
                f"shrinking width s={self.s} must be smaller than feature width d={self.d}")


def deconv_geometry(n: int, k: int = 9) -> tuple[int, int]:
    """(padding, output_padding) making a stride-n, k×k deconvolution exactly ×n."""
    padding = max(0, math.ceil((k - n) / 2))
    return padding, n - k + 2 * padding


class FsrcnnModel(Network):
    arch = "fsrcnn"


def build_fsrcnn(config: FsrcnnConfig = FsrcnnConfig(), rng_seed=0) -> FsrcnnModel:
    rng = np.random.default_rng(rng_seed)
    d, s, m, n = config.d, config.s, config.m, config.n
    layers: list[tuple[str, object]] = [
        ("feature", Conv2d(1, d, 5, rng)), ("feature_act", PReLU(d)),
        ("shrink", Conv2d(d, s, 1, rng)), ("shrink_act", PReLU(s)),
    ]
    for i in range(m):
        layers += [(f"map{i}", Conv2d(s, s, 3, rng)), (f"map{i}_act", PReLU(s))]
    pad, out_pad = deconv_geometry(n)
    layers += [
        ("expand", Conv2d(s, d, 1, rng)), ("expand_act", PReLU(d)),
        ("deconv", Deconv2d(d, 1, 9, rng, stride=n, padding=pad, output_padding=out_pad)),
    ]
    return FsrcnnModel(asdict(config), layers)


def fsrcnn_forward(model: FsrcnnModel, lr_small) -> Tensor:
    """Small LR batch (N, 1, H, W) -> SR batch (N, 1, nH, nW)."""
    return model(lr_small)


# ---------------------------------------------------------------------------
# SRGAN generator / discriminator


class GeneratorModel(Network):
    """Residual conv stack at target resolution: output = input + residual."""

    arch = "generator"

    def forward(self, x: Tensor) -> Tensor:
        return add(x, super().forward(x))

    def infer(self, x: np.ndarray) -> np.ndarray:
        return np.clip(super().infer(x), 0.0, 1.0)


def build_generator(rng_seed=0) -> GeneratorModel:
    rng = np.random.default_rng(rng_seed)
    layers = [
        ("conv0", Conv2d(1, 64, 5, rng)), ("act0", PReLU(64)),
        ("conv1", Conv2d(64, 64, 3, rng)), ("act1", PReLU(64)),
        ("conv2", Conv2d(64, 32, 3, rng)), ("act2", PReLU(32)),
        ("conv3", Conv2d(32, 1, 5, rng)),
    ]
    return GeneratorModel({}, layers)


def generator_forward(model: GeneratorModel, lr_input) -> Tensor:
    return model(lr_input)


DISCRIMINATOR_INPUT = 64


class DiscriminatorModel(Network):
    arch = "discriminator"

    def forward(self, x: Tensor) -> Tensor:
        if x.data.ndim != 4 or x.shape[2:] != (DISCRIMINATOR_INPUT, DISCRIMINATOR_INPUT):
            raise ShapeError(
                f"discriminator expects (N, 1, {DISCRIMINATOR_INPUT}, {DISCRIMINATOR_INPUT}) "
                f"patches, got {x.shape}")
        return super().forward(x)


def build_discriminator(rng_seed=0) -> DiscriminatorModel:
    rng = np.random.default_rng(rng_seed)
    layers = [
        ("conv0", Conv2d(1, 32, 3, rng, stride=2)), ("act0", PReLU(32)),
        ("conv1", Conv2d(32, 64, 3, rng, stride=2)), ("act1", PReLU(64)),
        ("conv2", Conv2d(64, 128, 3, rng, stride=2)), ("act2", PReLU(128)),
        ("fc", Linear(128 * 8 * 8, 1, rng)),
    ]
    return DiscriminatorModel({}, layers)


def discriminator_forward(model: DiscriminatorModel, patch) -> Tensor:
    """(N, 1, 64, 64) -> (N, 1) logits."""
    return model(patch)


# ---------------------------------------------------------------------------
# segmenter


class SegmenterModel(Network):
    arch = "segmenter"

    def forward(self, x: Tensor) -> Tensor:
        if x.data.ndim != 4 or x.shape[2] % 2 or x.shape[3] % 2:
            raise ParameterError(f"segmenter needs even spatial dims, got {x.shape}")
        return super().forward(x)


def build_segmenter(rng_seed=0) -> SegmenterModel:
    rng = np.random.default_rng(rng_seed)
    layers = [
        ("enc0", Conv2d(1, 16, 3, rng)), ("act0", PReLU(16)),
        ("down", Conv2d(16, 32, 3, rng, stride=2)), ("act1", PReLU(32)),
        ("mid", Conv2d(32, 32, 3, rng)), ("act2", PReLU(32)),
        ("up", Deconv2d(32, 16, 4, rng, stride=2, padding=1, output_padding=0)),
        ("act3", PReLU(16)),
        ("head", Conv2d(16, 1, 3, rng)),
    ]
    return SegmenterModel({}, layers)


def segmenter_forward(model: SegmenterModel, batch) -> Tensor:
    """(N, 1, H, W) with even H, W -> per-pixel logits of the same shape."""
    return model(batch)


def super_resolve(model: Network, lr_small: np.ndarray, lr_input: np.ndarray) -> np.ndarray:
    """Route a degraded batch to the input the architecture expects.

    FSRCNN consumes the small LR batch, the generator its bicubic-upsampled form.
    """
    if model.arch == "fsrcnn":
        return model.infer(lr_small)
    if model.arch == "generator":
        return model.infer(lr_input)
    raise ArchitectureError(f"{model.arch!r} is not a super-resolution network")


_BUILDERS = {
    "fsrcnn": lambda config, seed: build_fsrcnn(FsrcnnConfig(**{k: int(v) for k, v in config.items()}), seed),
    "generator": lambda config, seed: build_generator(seed),
    "discriminator": lambda config, seed: build_discriminator(seed),
    "segmenter": lambda config, seed: build_segmenter(seed),
}

ARCHITECTURES = tuple(_BUILDERS)


def build_model(arch: str, config: dict | None = None, seed=0) -> Network:
    if arch not in _BUILDERS:
        raise ParameterError(f"unknown architecture {arch!r}; expected one of {ARCHITECTURES}")
    return _BUILDERS[arch](config or {}, seed)
