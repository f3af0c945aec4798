"""The three-part CSI autoencoder and its normalized-MSE objective.

Encoder and decoder head live on each terminal, the decoder tail on the
base station. The tail is kept as an explicit layer list so it can be cut
into pipeline stages.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Iterable, Iterator

import numpy as np

from . import tensor as T
from .tensor import Tensor


class ModelError(Exception):
    pass


class DegenerateSampleError(ModelError):
    """A target sample has zero norm, so its normalized error is undefined."""


class BoundaryConfigWarning(UserWarning):
    """Boundary widths are not small relative to the part sizes."""


@dataclass(frozen=True)
class CsiDims:
    """Antenna/subcarrier grid of one CSI sample; channels are (real, imag)."""

    n_t: int
    n_c: int
    channels: int = 2

    def __post_init__(self):
        if self.n_t < 1 or self.n_c < 1:
            raise ModelError(f"invalid dims n_t={self.n_t}, n_c={self.n_c}")
        if self.channels != 2:
            raise ModelError("samples carry exactly real and imaginary channels")

    @property
    def sample_shape(self) -> tuple[int, int, int]:
        return (self.channels, self.n_t, self.n_c)

    @property
    def sample_size(self) -> int:
        return self.channels * self.n_t * self.n_c


@dataclass(frozen=True)
class BoundaryDims:
    """Widths of the two sub-model boundaries (codeword and tail output)."""

    c1: int
    c2: int

    def __post_init__(self):
        if self.c1 < 1 or self.c2 < 1:
            raise ModelError(f"invalid boundary dims c1={self.c1}, c2={self.c2}")


class ModelPartParams:
    """Named parameter collection of one model part."""

    def __init__(self, part: str, tensors: dict[str, Tensor]):
        self.part = part
        self.tensors = dict(tensors)

    @property
    def count(self) -> int:
        return sum(t.size for t in self.tensors.values())

    def items(self) -> Iterator[tuple[str, Tensor]]:
        return iter(self.tensors.items())

    def grads(self) -> dict[str, np.ndarray]:
        out = {}
        for name, t in self.tensors.items():
            out[name] = t.grad if t.grad is not None else np.zeros_like(t.data)
        return out

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.grad = None

    def values_copy(self) -> dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self.tensors.items()}

    def load_values(self, values: dict[str, np.ndarray]) -> None:
        for name, t in self.tensors.items():
            t.data = np.ascontiguousarray(values[name]).astype(t.dtype)


def _uniform(rng: np.random.Generator, shape: tuple, fan_in: int, dtype) -> Tensor:
    a = float(np.sqrt(1.0 / fan_in))
    return Tensor(rng.uniform(-a, a, size=shape).astype(dtype), requires_grad=True)


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------

class Linear:
    def __init__(self, rng, in_features: int, out_features: int, dtype=np.float32):
        self.w = _uniform(rng, (out_features, in_features), in_features, dtype)
        self.b = _uniform(rng, (out_features,), in_features, dtype)

    def forward(self, x: Tensor, train: bool = False) -> Tensor:
        return T.linear_forward(x, self.w, self.b)

    def named_params(self, prefix: str):
        yield f"{prefix}.w", self.w
        yield f"{prefix}.b", self.b


class Conv2d:
    def __init__(self, rng, cin: int, cout: int, kh: int, kw: int, dtype=np.float32):
        fan_in = cin * kh * kw
        self.w = _uniform(rng, (cout, cin, kh, kw), fan_in, dtype)
        self.b = _uniform(rng, (cout,), fan_in, dtype)

    def forward(self, x: Tensor, train: bool = False) -> Tensor:
        return T.conv2d_forward(x, self.w, self.b)

    def named_params(self, prefix: str):
        yield f"{prefix}.w", self.w
        yield f"{prefix}.b", self.b


class BatchNorm2d:
    def __init__(self, channels: int, dtype=np.float32, eps: float = 1e-5, momentum: float = 0.1):
        self.gamma = Tensor(np.ones(channels, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(channels, dtype=dtype), requires_grad=True)
        self.state = T.BatchNormState(channels, dtype=dtype)
        self.eps = eps
        self.momentum = momentum

    def forward(self, x: Tensor, train: bool = False) -> Tensor:
        return T.batchnorm2d_forward(x, self.gamma, self.beta, self.state, train,
                                     eps=self.eps, momentum=self.momentum)

    def named_params(self, prefix: str):
        yield f"{prefix}.gamma", self.gamma
        yield f"{prefix}.beta", self.beta


class LeakyReLU:
    def __init__(self, slope: float = 0.3):
        self.slope = slope

    def forward(self, x: Tensor, train: bool = False) -> Tensor:
        return T.leaky_relu(x, self.slope)

    def named_params(self, prefix: str):
        return iter(())


class HardSigmoid:
    def forward(self, x: Tensor, train: bool = False) -> Tensor:
        return T.hard_sigmoid(x)

    def named_params(self, prefix: str):
        return iter(())


class Reshape:
    """Reshape each sample to a fixed per-sample shape (batch axis kept)."""

    def __init__(self, sample_shape: tuple):
        self.sample_shape = tuple(sample_shape)

    def forward(self, x: Tensor, train: bool = False) -> Tensor:
        return T.reshape(x, (x.shape[0],) + self.sample_shape)

    def named_params(self, prefix: str):
        return iter(())


class Flatten:
    def forward(self, x: Tensor, train: bool = False) -> Tensor:
        return T.flatten(x)

    def named_params(self, prefix: str):
        return iter(())


class CRBlock:
    """Residual refinement block with thin 1xk / kx1 kernels.

    main: conv(1xk) -> BN -> leaky(0.3) -> conv(kx1) -> BN
    out:  leaky(main + skip)
    """

    SUPPORTED_K = (3, 5)

    def __init__(self, rng, channels: int, k: int, dtype=np.float32):
        if k not in self.SUPPORTED_K:
            raise ModelError(f"unsupported CRBlock kernel size {k}")
        self.k = k
        self.conv_a = Conv2d(rng, channels, channels, 1, k, dtype)
        self.bn_a = BatchNorm2d(channels, dtype)
        self.conv_b = Conv2d(rng, channels, channels, k, 1, dtype)
        self.bn_b = BatchNorm2d(channels, dtype)
        self.act = LeakyReLU(0.3)

    def forward(self, x: Tensor, train: bool = False) -> Tensor:
        h = self.conv_a.forward(x, train)
        h = self.bn_a.forward(h, train)
        h = self.act.forward(h, train)
        h = self.conv_b.forward(h, train)
        h = self.bn_b.forward(h, train)
        return self.act.forward(T.add(h, x), train)

    def named_params(self, prefix: str):
        yield from self.conv_a.named_params(f"{prefix}.conv_a")
        yield from self.bn_a.named_params(f"{prefix}.bn_a")
        yield from self.conv_b.named_params(f"{prefix}.conv_b")
        yield from self.bn_b.named_params(f"{prefix}.bn_b")


def crblock_forward(x: Tensor, block: CRBlock, train: bool = False) -> Tensor:
    return block.forward(x, train)


def _collect_params(part: str, layers: Iterable, names: Iterable[str]) -> ModelPartParams:
    tensors: dict[str, Tensor] = {}
    for name, layer in zip(names, layers):
        for pname, t in layer.named_params(name):
            tensors[pname] = t
    return ModelPartParams(part, tensors)


# ---------------------------------------------------------------------------
# model parts
# ---------------------------------------------------------------------------

class Encoder:
    """conv(2 kernels, 3x3, same) -> BN -> leaky(0.3) -> flatten -> FC to c1."""

    def __init__(self, rng, dims: CsiDims, boundary: BoundaryDims, dtype=np.float32):
        self.dims = dims
        self.layers = [
            Conv2d(rng, dims.channels, dims.channels, 3, 3, dtype),
            BatchNorm2d(dims.channels, dtype),
            LeakyReLU(0.3),
            Flatten(),
            Linear(rng, dims.sample_size, boundary.c1, dtype),
        ]
        names = ["conv", "bn", "act", "flatten", "fc"]
        self.params = _collect_params("encoder", self.layers, names)

    def forward(self, x: Tensor, train: bool = False) -> Tensor:
        if x.shape[1:] != self.dims.sample_shape:
            raise T.DimensionError(
                f"encoder input {x.shape} does not match sample shape {self.dims.sample_shape}")
        for layer in self.layers:
            x = layer.forward(x, train)
        return x


class DecoderTail:
    """FC -> FC -> reshape -> conv3x3 -> leaky -> CRBlock(3) -> CRBlock(5) -> flatten -> FC to c2.

    The internal width of the FC pair is the sample size (restores the
    spatial grid for the convolution), and the spatial body is projected
    back down to the c2 boundary by the final linear layer.
    """

    def __init__(self, rng, dims: CsiDims, boundary: BoundaryDims, dtype=np.float32):
        self.dims = dims
        c_mid = dims.sample_size
        self.layers = [
            Linear(rng, boundary.c1, c_mid, dtype),
            Linear(rng, c_mid, dims.sample_size, dtype),
            Reshape(dims.sample_shape),
            Conv2d(rng, dims.channels, dims.channels, 3, 3, dtype),
            LeakyReLU(0.3),
            CRBlock(rng, dims.channels, 3, dtype),
            CRBlock(rng, dims.channels, 5, dtype),
            Flatten(),
            Linear(rng, dims.sample_size, boundary.c2, dtype),
        ]
        names = ["fc1", "fc2", "reshape", "conv", "act", "crblock3", "crblock5", "flatten", "proj"]
        self.params = _collect_params("tail", self.layers, names)

    def forward(self, x: Tensor, train: bool = False) -> Tensor:
        for layer in self.layers:
            x = layer.forward(x, train)
        return x

    def forward_slice(self, x: Tensor, start: int, stop: int, train: bool = False) -> Tensor:
        for layer in self.layers[start:stop]:
            x = layer.forward(x, train)
        return x

    def layer_param_counts(self) -> list[int]:
        counts = []
        for name, layer in zip(["fc1", "fc2", "reshape", "conv", "act", "crblock3",
                                "crblock5", "flatten", "proj"], self.layers):
            counts.append(sum(t.size for _, t in layer.named_params(name)))
        return counts


class DecoderHead:
    """FC(c2 -> sample size) -> reshape -> hard-sigmoid, outputs in [0, 1]."""

    def __init__(self, rng, dims: CsiDims, boundary: BoundaryDims, dtype=np.float32):
        self.dims = dims
        self.layers = [
            Linear(rng, boundary.c2, dims.sample_size, dtype),
            Reshape(dims.sample_shape),
            HardSigmoid(),
        ]
        self.params = _collect_params("head", self.layers, ["fc", "reshape", "act"])

    def forward(self, x: Tensor, train: bool = False) -> Tensor:
        for layer in self.layers:
            x = layer.forward(x, train)
        return x


@dataclass
class CsiModel:
    encoder: Encoder
    tail: DecoderTail
    head: DecoderHead
    dims: CsiDims
    boundary: BoundaryDims

    def forward(self, x: Tensor, train: bool = False) -> Tensor:
        return self.head.forward(self.tail.forward(self.encoder.forward(x, train), train), train)


def check_boundary_compression(boundary: BoundaryDims, d1: int, d2: int, d3: int) -> None:
    """Warn when the boundary widths defeat the point of exchanging smashed data."""
    if not (boundary.c1 < min(d1, d2) and boundary.c2 < min(d2, d3)):
        warnings.warn(
            f"boundary widths (c1={boundary.c1}, c2={boundary.c2}) are not small "
            f"relative to part sizes (d1={d1}, d2={d2}, d3={d3}); the smashed-data "
            "exchange will not be cheaper than parameter exchange",
            BoundaryConfigWarning, stacklevel=3)


def build_model(dims: CsiDims, boundary: BoundaryDims, seed: int, dtype=np.float32) -> CsiModel:
    """Deterministically initialized model; identical seeds give identical parts."""
    root = np.random.SeedSequence(seed)
    enc_ss, tail_ss, head_ss = root.spawn(3)
    encoder = Encoder(np.random.default_rng(enc_ss), dims, boundary, dtype)
    tail = DecoderTail(np.random.default_rng(tail_ss), dims, boundary, dtype)
    head = DecoderHead(np.random.default_rng(head_ss), dims, boundary, dtype)
    check_boundary_compression(boundary, encoder.params.count, tail.params.count,
                               head.params.count)
    return CsiModel(encoder, tail, head, dims, boundary)


def init_params(dims: CsiDims, boundary: BoundaryDims, seed: int,
                dtype=np.float32) -> tuple[ModelPartParams, ModelPartParams, ModelPartParams]:
    m = build_model(dims, boundary, seed, dtype)
    return m.encoder.params, m.tail.params, m.head.params


def param_counts(*parts: ModelPartParams) -> tuple:
    """Per-part scalar counts plus their total."""
    counts = tuple(p.count for p in parts)
    return counts + (sum(counts),)


def encoder_forward(x: Tensor, encoder: Encoder, train: bool = False) -> Tensor:
    return encoder.forward(x, train)


def decoder_tail_forward(z: Tensor, tail: DecoderTail, train: bool = False) -> Tensor:
    return tail.forward(z, train)


def decoder_head_forward(u: Tensor, head: DecoderHead, train: bool = False) -> Tensor:
    return head.forward(u, train)


def nmse_loss(h_hat: Tensor, h: Tensor) -> Tensor:
    """Batch mean of ||h_hat_b - h_b||^2 / ||h_b||^2 (Frobenius per sample)."""
    if h_hat.shape != h.shape:
        raise T.DimensionError(f"nmse: shapes {h_hat.shape} and {h.shape} differ")
    if h.requires_grad:
        raise T.ContractError("nmse target must not require gradients")
    B = h.shape[0]
    diff = (h_hat.data.astype(np.float64) - h.data.astype(np.float64)).reshape(B, -1)
    den = np.square(h.data.astype(np.float64).reshape(B, -1)).sum(axis=1)
    if np.any(den <= 0.0):
        bad = int(np.argmin(den))
        raise DegenerateSampleError(f"target sample {bad} has zero norm")
    num = np.square(diff).sum(axis=1)
    loss = np.asarray((num / den).mean(), dtype=h_hat.dtype)
    shape = h.shape

    def vjp(g):
        # d/d h_hat of mean_b num_b/den_b  =  (2/B) * diff_b / den_b
        gh = (2.0 / B) * diff / den[:, None]
        gscale = float(np.asarray(g).reshape(()))
        return ((gscale * gh).reshape(shape).astype(h_hat.dtype), None)

    return T.register_op(loss, (h_hat, h), vjp, "nmse")


def reconstruct_nmse(encoder: Encoder, tail: DecoderTail, head: DecoderHead,
                     samples: np.ndarray, chunk: int = 1024) -> float:
    """Evaluation-mode NMSE of the composed model over an array of samples."""
    total = 0.0
    n = samples.shape[0]
    with T.no_grad():
        for start in range(0, n, chunk):
            x = Tensor(samples[start:start + chunk])
            y = head.forward(tail.forward(encoder.forward(x)))
            total += float(nmse_loss(y, x).item()) * x.shape[0]
    return total / n
