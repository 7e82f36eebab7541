"""Network description, builder, and the forward/backward engine.

The grading classifier is a fixed stack: six conv blocks (conv + batchnorm,
ReLU after the batchnorm) interleaved with 3x3/stride-2 max pools, then
dropout, flatten, a regularized 96-unit ReLU dense layer, dropout, batchnorm,
a 5-unit dense layer, and softmax. `build_spec` produces that stack for any
input size whose pool chain stays >= 1 pixel.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from ..errors import ScreeningError
from . import layers as L


class ShapeMismatchError(ScreeningError):
    pass


class TraceMismatchError(ScreeningError):
    pass


class InvalidInputSizeError(ScreeningError):
    pass


@dataclass(frozen=True)
class LayerSpec:
    kind: str  # conv2d | batchnorm | maxpool | dropout | flatten | dense | softmax
    out_channels: int | None = None
    kernel: int | None = None
    units: int | None = None
    activation: str = "none"  # relu | none
    rate: float | None = None
    l2: float = 0.0
    eps: float = 1e-5
    momentum: float = 0.9


@dataclass(frozen=True)
class NetworkSpec:
    input_size: int
    in_channels: int = 3
    layers: tuple[LayerSpec, ...] = field(default_factory=tuple)

    def to_json(self) -> str:
        return json.dumps(
            {
                "input_size": self.input_size,
                "in_channels": self.in_channels,
                "layers": [
                    {k: v for k, v in vars(layer).items() if v is not None}
                    for layer in self.layers
                ],
            },
            sort_keys=True,
        )

    @classmethod
    def from_json(cls, text: str) -> "NetworkSpec":
        raw = json.loads(text)
        return cls(
            input_size=raw["input_size"],
            in_channels=raw.get("in_channels", 3),
            layers=tuple(LayerSpec(**entry) for entry in raw["layers"]),
        )


_CONV_PLAN = (
    # (channels per conv, convs before this pool)
    (16, 2),
    (32, 2),
    (64, 2),
    (96, 1),
    (96, 1),
    (128, 1),
)


def build_spec(
    input_size: int,
    width_scale: float = 1.0,
    kernel: int = 3,
    dropout_rate: float = 0.25,
    dense_l2: float = 1e-4,
    bn_eps: float = 1e-5,
    bn_momentum: float = 0.9,
) -> NetworkSpec:
    """Lay out the grading classifier for the given input size.

    Conv widths are multiplied by width_scale (rounded up); the dense widths
    are fixed at 96 and 5. Raises InvalidInputSizeError if any pool output
    would drop below 1 pixel.
    """
    if kernel % 2 != 1 or kernel < 1:
        raise ValueError("conv kernel must be odd")
    specs: list[LayerSpec] = []
    for channels, n_convs in _CONV_PLAN:
        scaled = math.ceil(channels * width_scale)
        for _ in range(n_convs):
            specs.append(LayerSpec("conv2d", out_channels=scaled, kernel=kernel, activation="relu"))
            specs.append(LayerSpec("batchnorm", eps=bn_eps, momentum=bn_momentum))
        specs.append(LayerSpec("maxpool"))
    specs.append(LayerSpec("dropout", rate=dropout_rate))
    specs.append(LayerSpec("flatten"))
    specs.append(LayerSpec("dense", units=96, activation="relu", l2=dense_l2))
    specs.append(LayerSpec("dropout", rate=dropout_rate))
    specs.append(LayerSpec("batchnorm", eps=bn_eps, momentum=bn_momentum))
    specs.append(LayerSpec("dense", units=5))
    specs.append(LayerSpec("softmax"))
    spec = NetworkSpec(input_size=input_size, layers=tuple(specs))
    shape_chain(spec)  # validates the pool chain
    return spec


def shape_chain(spec: NetworkSpec) -> list[tuple[str, tuple[int, ...]]]:
    """Propagate shapes through the spec (no allocation). Returns one
    (kind, output_shape) entry per layer; conv shapes are (C, H, W)."""
    shape: tuple[int, ...] = (spec.in_channels, spec.input_size, spec.input_size)
    chain: list[tuple[str, tuple[int, ...]]] = []
    seen_flatten = False
    for layer in spec.layers:
        if layer.kind == "conv2d":
            if len(shape) != 3:
                raise InvalidInputSizeError("conv2d after flatten")
            shape = (layer.out_channels, shape[1], shape[2])
        elif layer.kind == "maxpool":
            if len(shape) != 3:
                raise InvalidInputSizeError("maxpool after flatten")
            h = L.MaxPool3x3Stride2.out_size(shape[1])
            w = L.MaxPool3x3Stride2.out_size(shape[2])
            if h < 1 or w < 1:
                raise InvalidInputSizeError(
                    f"pool underflow: {shape[1]}x{shape[2]} input to a 3x3/2 pool"
                )
            shape = (shape[0], h, w)
        elif layer.kind == "flatten":
            if seen_flatten:
                raise InvalidInputSizeError("flatten appears more than once")
            seen_flatten = True
            shape = (int(np.prod(shape)),)
        elif layer.kind == "dense":
            if len(shape) != 1:
                raise InvalidInputSizeError("dense before flatten")
            shape = (layer.units,)
        elif layer.kind in ("batchnorm", "dropout", "softmax"):
            pass
        else:
            raise ValueError(f"unknown layer kind {layer.kind!r}")
        chain.append((layer.kind, shape))
    if not spec.layers or spec.layers[-1].kind != "softmax":
        raise InvalidInputSizeError("network must end in softmax")
    if shape != (5,):
        raise InvalidInputSizeError(f"final layer must produce 5 units, got {shape}")
    if not seen_flatten:
        raise InvalidInputSizeError("network must contain flatten")
    return chain


@dataclass(frozen=True)
class ParamCount:
    total: int
    trainable: int


def param_count(spec: NetworkSpec) -> ParamCount:
    """Closed-form parameter totals: conv c_in*c_out*k^2 + c_out, dense
    in*out + out, batchnorm 4 per channel (gain, shift, running mean/var;
    the running statistics are the non-trainable pair)."""
    chain = shape_chain(spec)
    total = trainable = 0
    prev: tuple[int, ...] = (spec.in_channels, spec.input_size, spec.input_size)
    for layer, (_, shape) in zip(spec.layers, chain):
        if layer.kind == "conv2d":
            n = prev[0] * layer.out_channels * layer.kernel * layer.kernel + layer.out_channels
            total += n
            trainable += n
        elif layer.kind == "dense":
            n = prev[0] * layer.units + layer.units
            total += n
            trainable += n
        elif layer.kind == "batchnorm":
            channels = prev[0]
            total += 4 * channels
            trainable += 2 * channels
        prev = shape
    return ParamCount(total=total, trainable=trainable)


class ParamStore:
    """Ordered name -> tensor mapping plus the trainable-name subset. The
    arrays are the very buffers the layer objects compute with, so in-place
    optimizer updates are visible to the network immediately."""

    def __init__(self):
        self.tensors: dict[str, np.ndarray] = {}
        self.trainable: list[str] = []

    def add(self, name: str, tensor: np.ndarray, trainable: bool) -> np.ndarray:
        if name in self.tensors:
            raise ValueError(f"duplicate parameter {name}")
        self.tensors[name] = tensor
        if trainable:
            self.trainable.append(name)
        return tensor

    def copy_values(self) -> dict[str, np.ndarray]:
        return {name: tensor.copy() for name, tensor in self.tensors.items()}

    def load_values(self, values: dict[str, np.ndarray]) -> None:
        missing = set(self.tensors) - set(values)
        extra = set(values) - set(self.tensors)
        if missing or extra:
            raise ShapeMismatchError(f"parameter name mismatch: missing={missing} extra={extra}")
        for name, tensor in self.tensors.items():
            src = values[name]
            if src.shape != tensor.shape:
                raise ShapeMismatchError(f"{name}: stored {src.shape} vs expected {tensor.shape}")
            np.copyto(tensor, src.astype(tensor.dtype))


def _glorot_uniform(rng, shape, fan_in, fan_out, dtype):
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


class ForwardTrace:
    """Per-op caches from one forward pass, enough for exact gradients."""

    def __init__(self, mode_train: bool, batch_size: int):
        self.mode_train = mode_train
        self.batch_size = batch_size
        self.caches: list = []
        self.probs: np.ndarray | None = None
        self.logp: np.ndarray | None = None


class Network:
    """A lowered primitive-op pipeline with its parameter store."""

    def __init__(self, spec: NetworkSpec, prims, params: ParamStore):
        self.spec = spec
        self.prims = prims
        self.params = params

    @classmethod
    def build(cls, spec: NetworkSpec, rng=None, dtype=np.float32) -> "Network":
        """Instantiate parameters (Glorot-uniform weights, zero biases,
        identity batchnorm) and lower the spec to primitive ops. A conv/dense
        ReLU activation is emitted after an immediately following batchnorm,
        otherwise right after the layer itself."""
        chain = shape_chain(spec)
        rng = rng or np.random.default_rng(0)
        params = ParamStore()
        prims = []
        pending_relu: str | None = None
        prev: tuple[int, ...] = (spec.in_channels, spec.input_size, spec.input_size)
        for i, (layer, (_, shape)) in enumerate(zip(spec.layers, chain)):
            name = f"{i:02d}_{layer.kind}"
            if layer.kind == "conv2d":
                c_in, c_out, k = prev[0], layer.out_channels, layer.kernel
                w = params.add(
                    f"{name}.w",
                    _glorot_uniform(rng, (c_out, c_in, k, k), c_in * k * k, c_out * k * k, dtype),
                    trainable=True,
                )
                b = params.add(f"{name}.b", np.zeros(c_out, dtype=dtype), trainable=True)
                prims.append(L.ConvSame3x3(name, w, b))
                if layer.activation == "relu":
                    pending_relu = name
            elif layer.kind == "dense":
                n_in, n_out = prev[0], layer.units
                w = params.add(
                    f"{name}.w", _glorot_uniform(rng, (n_in, n_out), n_in, n_out, dtype), trainable=True
                )
                b = params.add(f"{name}.b", np.zeros(n_out, dtype=dtype), trainable=True)
                prims.append(L.Dense(name, w, b, l2=layer.l2))
                if layer.activation == "relu":
                    pending_relu = name
            elif layer.kind == "batchnorm":
                channels = prev[0]
                gamma = params.add(f"{name}.gamma", np.ones(channels, dtype=dtype), trainable=True)
                beta = params.add(f"{name}.beta", np.zeros(channels, dtype=dtype), trainable=True)
                mean = params.add(f"{name}.mean", np.zeros(channels, dtype=dtype), trainable=False)
                var = params.add(f"{name}.var", np.ones(channels, dtype=dtype), trainable=False)
                prims.append(
                    L.BatchNorm(name, gamma, beta, mean, var, eps=layer.eps, momentum=layer.momentum)
                )
                if pending_relu is not None:
                    prims.append(L.Relu(f"{pending_relu}.relu"))
                    pending_relu = None
            elif layer.kind == "maxpool":
                prims.append(L.MaxPool3x3Stride2(name))
            elif layer.kind == "dropout":
                prims.append(L.Dropout(name, layer.rate))
            elif layer.kind == "flatten":
                prims.append(L.Flatten(name))
            elif layer.kind == "softmax":
                prims.append(L.Softmax(name))
            if pending_relu is not None and layer.kind in ("conv2d", "dense"):
                nxt = spec.layers[i + 1].kind if i + 1 < len(spec.layers) else None
                if nxt != "batchnorm":
                    prims.append(L.Relu(f"{pending_relu}.relu"))
                    pending_relu = None
            prev = shape
        return cls(spec, prims, params)

    def forward(self, batch: np.ndarray, train: bool = False, rng=None):
        expected = (self.spec.in_channels, self.spec.input_size, self.spec.input_size)
        if batch.ndim != 4 or batch.shape[1:] != expected:
            raise ShapeMismatchError(f"batch shape {batch.shape} vs expected (B, %d, %d, %d)" % expected)
        if train and rng is None and any(isinstance(p, L.Dropout) and p.rate > 0 for p in self.prims):
            raise ValueError("train-mode forward with dropout requires an rng")
        trace = ForwardTrace(mode_train=train, batch_size=batch.shape[0])
        x = batch
        for prim in self.prims:
            x, cache = prim.forward(x, train, rng)
            trace.caches.append(cache)
        trace.probs, trace.logp = trace.caches[-1]
        return trace.probs, trace

    def loss(self, trace: ForwardTrace, labels: np.ndarray) -> float:
        """Mean categorical cross-entropy plus l2/2 * ||W||^2 penalties."""
        if labels.shape != trace.logp.shape:
            raise TraceMismatchError(f"labels {labels.shape} vs outputs {trace.logp.shape}")
        ce = -float((labels * trace.logp).sum()) / trace.batch_size
        for prim in self.prims:
            if isinstance(prim, L.Dense) and prim.l2 > 0.0:
                ce += 0.5 * prim.l2 * float((prim.weight.astype(np.float64) ** 2).sum())
        return ce

    def backward(self, trace: ForwardTrace, labels: np.ndarray):
        """Gradients of the loss for every trainable parameter and the input.
        Returns (grads, grad_input). Starts from the fused softmax +
        cross-entropy gradient (probs - labels) / B at the logits."""
        if not trace.mode_train:
            raise TraceMismatchError("backward requires a train-mode trace")
        if labels.shape != trace.probs.shape:
            raise TraceMismatchError(f"labels {labels.shape} vs outputs {trace.probs.shape}")
        if not isinstance(self.prims[-1], L.Softmax):
            raise TraceMismatchError("network must end in softmax")
        grads: dict[str, np.ndarray] = {}
        dx = (trace.probs - labels.astype(trace.probs.dtype)) / np.asarray(
            trace.batch_size, dtype=trace.probs.dtype
        )
        for prim, cache in zip(reversed(self.prims[:-1]), reversed(trace.caches[:-1])):
            dx, param_grads = prim.backward(dx, cache)
            grads.update(param_grads)
        return grads, dx

    def predict_proba(self, images: np.ndarray, batch_size: int = 16) -> np.ndarray:
        """Infer-mode probabilities for a stack of images (N, C, S, S)."""
        outputs = []
        for start in range(0, images.shape[0], batch_size):
            probs, _ = self.forward(images[start : start + batch_size], train=False)
            outputs.append(probs)
        return np.concatenate(outputs, axis=0)


def predict_grades(probs: np.ndarray) -> np.ndarray:
    """Argmax grade per row; ties break toward the lower grade."""
    return probs.argmax(axis=1)


def build_network(
    input_size: int,
    width_scale: float = 1.0,
    seed: int = 0,
    dtype=np.float32,
    **spec_kwargs,
) -> Network:
    spec = build_spec(input_size, width_scale=width_scale, **spec_kwargs)
    return Network.build(spec, rng=np.random.default_rng(seed), dtype=dtype)
