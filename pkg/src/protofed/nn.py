"""Small numpy CNN engine: two conv layers, two dense layers, manual backprop.

Arrays use NCHW at the public boundary. Internally convolutions run on NHWC
activations through an im2col matmul. The embedding is the rectified output
of ``fc1``; ``fc2`` is the classifier head.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np
from numpy.lib.stride_tricks import as_strided

from .errors import InvalidInputError

LAYERS = ("conv1", "conv2", "fc1", "fc2")
PARAM_NAMES = tuple(f"{layer}.{kind}" for layer in LAYERS for kind in ("weight", "bias"))
EXTRACTOR_NAMES = PARAM_NAMES[:6]
HEAD_NAMES = PARAM_NAMES[6:]


@dataclass(frozen=True)
class ModelArch:
    """Shape description of the 4-layer CNN.

    Spatial math with valid convolutions and non-overlapping pooling::

        s1 = (image_size - conv1_kernel + 1) / pool
        s2 = (s1 - conv2_kernel + 1) / pool
        fc1 fan-in = conv2_channels * s2 * s2

    The defaults give 28 -> 24 -> 12 -> 8 -> 4, so fc1 sees 32*4*4 = 512 inputs.
    """

    in_channels: int = 1
    image_size: int = 28
    conv1_channels: int = 16
    conv1_kernel: int = 5
    conv2_channels: int = 32
    conv2_kernel: int = 5
    pool: int = 2
    embed_dim: int = 64
    n_classes: int = 10

    def __post_init__(self) -> None:
        for name in (
            "in_channels", "image_size", "conv1_channels", "conv1_kernel",
            "conv2_channels", "conv2_kernel", "pool", "embed_dim", "n_classes",
        ):
            if getattr(self, name) < 1:
                raise InvalidInputError(f"{name} must be >= 1")
        c1 = self.image_size - self.conv1_kernel + 1
        if c1 < 1 or c1 % self.pool:
            raise InvalidInputError(f"conv1 output {c1} not divisible by pool {self.pool}")
        c2 = c1 // self.pool - self.conv2_kernel + 1
        if c2 < 1 or c2 % self.pool:
            raise InvalidInputError(f"conv2 output {c2} not divisible by pool {self.pool}")

    @property
    def input_shape(self) -> tuple[int, int, int]:
        return (self.in_channels, self.image_size, self.image_size)

    @property
    def conv2_input_size(self) -> int:
        return (self.image_size - self.conv1_kernel + 1) // self.pool

    @property
    def final_spatial(self) -> int:
        return (self.conv2_input_size - self.conv2_kernel + 1) // self.pool

    @property
    def flat_dim(self) -> int:
        return self.conv2_channels * self.final_spatial ** 2

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        k1, k2 = self.conv1_kernel, self.conv2_kernel
        return {
            "conv1.weight": (self.conv1_channels, self.in_channels, k1, k1),
            "conv1.bias": (self.conv1_channels,),
            "conv2.weight": (self.conv2_channels, self.conv1_channels, k2, k2),
            "conv2.bias": (self.conv2_channels,),
            "fc1.weight": (self.embed_dim, self.flat_dim),
            "fc1.bias": (self.embed_dim,),
            "fc2.weight": (self.n_classes, self.embed_dim),
            "fc2.bias": (self.n_classes,),
        }


class ModelParams:
    """Ordered parameter tensors (conv1, conv2, fc1, fc2; weight then bias).

    Also used for gradients, which share the exact structure.
    """

    __slots__ = ("arch", "tensors")

    def __init__(self, arch: ModelArch, tensors: dict[str, np.ndarray]):
        shapes = arch.param_shapes()
        if set(tensors) != set(shapes):
            raise InvalidInputError(f"expected tensors {sorted(shapes)}, got {sorted(tensors)}")
        for name, shape in shapes.items():
            if tuple(tensors[name].shape) != shape:
                raise InvalidInputError(
                    f"{name}: shape {tuple(tensors[name].shape)} != expected {shape}"
                )
        self.arch = arch
        self.tensors = {name: tensors[name] for name in PARAM_NAMES}

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self.tensors)

    def items(self):
        return self.tensors.items()

    @property
    def dtype(self) -> np.dtype:
        return self.tensors["fc2.weight"].dtype

    def copy(self) -> "ModelParams":
        return ModelParams(self.arch, {k: v.copy() for k, v in self.tensors.items()})

    def astype(self, dtype) -> "ModelParams":
        return ModelParams(self.arch, {k: v.astype(dtype) for k, v in self.tensors.items()})

    def extractor(self) -> dict[str, np.ndarray]:
        return {k: self.tensors[k] for k in EXTRACTOR_NAMES}

    def head(self) -> dict[str, np.ndarray]:
        return {k: self.tensors[k] for k in HEAD_NAMES}

    def num_scalars(self) -> int:
        return sum(v.size for v in self.tensors.values())

    def check_congruent(self, other: "ModelParams") -> None:
        if self.arch != other.arch:
            raise InvalidInputError("parameter sets belong to different architectures")
        for name in PARAM_NAMES:
            if self.tensors[name].shape != other.tensors[name].shape:
                raise InvalidInputError(f"{name}: shape mismatch")

    def equals(self, other: "ModelParams") -> bool:
        """Bitwise equality of every tensor."""
        if self.arch != other.arch:
            return False
        return all(
            self.tensors[k].dtype == other.tensors[k].dtype
            and np.array_equal(self.tensors[k], other.tensors[k])
            for k in PARAM_NAMES
        )

    def digest(self) -> str:
        import hashlib

        h = hashlib.sha256()
        for name in PARAM_NAMES:
            t = np.ascontiguousarray(self.tensors[name])
            h.update(name.encode())
            h.update(str(t.dtype).encode())
            h.update(t.tobytes())
        return h.hexdigest()


Gradients = ModelParams


def _fan_in(shape: tuple[int, ...]) -> int:
    return int(np.prod(shape[1:]))


def init_params(arch: ModelArch = ModelArch(), seed: int = 0, dtype=np.float32) -> ModelParams:
    """Weights ~ U(-sqrt(1/fan_in), +sqrt(1/fan_in)), biases zero."""
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape in arch.param_shapes().items():
        if name.endswith(".bias"):
            tensors[name] = np.zeros(shape, dtype=dtype)
        else:
            bound = np.sqrt(1.0 / _fan_in(shape))
            tensors[name] = rng.uniform(-bound, bound, size=shape).astype(dtype)
    return ModelParams(arch, tensors)


def zeros_like(params: ModelParams) -> ModelParams:
    return ModelParams(params.arch, {k: np.zeros_like(v) for k, v in params.items()})


# --- layer primitives (NHWC) ---


def _im2col(x: np.ndarray, k: int) -> np.ndarray:
    """Rows are output pixels; columns ordered (ki, kj, channel)."""
    x = np.ascontiguousarray(x)
    b, h, w, c = x.shape
    ho, wo = h - k + 1, w - k + 1
    sb, sh, sw, sc = x.strides
    win = as_strided(x, (b, ho, wo, k, k, c), (sb, sh, sw, sh, sw, sc), writeable=False)
    return win.reshape(b * ho * wo, k * k * c)


def _col2im(dcols: np.ndarray, x_shape: tuple[int, ...], k: int) -> np.ndarray:
    b, h, w, c = x_shape
    ho, wo = h - k + 1, w - k + 1
    d = dcols.reshape(b, ho, wo, k, k, c)
    dx = np.zeros(x_shape, dtype=dcols.dtype)
    for i in range(k):
        for j in range(k):
            dx[:, i:i + ho, j:j + wo, :] += d[:, :, :, i, j, :]
    return dx


def _conv_matrix(w: np.ndarray) -> np.ndarray:
    # (out, in, k, k) -> (out, k*k*in), matching _im2col column order
    return w.transpose(0, 2, 3, 1).reshape(w.shape[0], -1)


def _conv_weight_grad(dmat: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    out, cin, k, _ = shape
    return dmat.reshape(out, k, k, cin).transpose(0, 3, 1, 2)


def _pool_forward(x: np.ndarray, p: int) -> tuple[np.ndarray, list[np.ndarray]]:
    """Non-overlapping p x p max-pool. Returns the output and, per window
    offset, a mask marking where the gradient is routed (first maximum wins)."""
    views = [x[:, i::p, j::p, :] for i in range(p) for j in range(p)]
    out = views[0]
    for v in views[1:]:
        out = np.maximum(out, v)
    masks = []
    taken = np.zeros(out.shape, dtype=bool)
    for v in views:
        m = (v == out) & ~taken
        taken |= m
        masks.append(m)
    return out, masks


def _pool_backward(dout: np.ndarray, masks: list[np.ndarray], x_shape: tuple[int, ...], p: int) -> np.ndarray:
    dx = np.zeros(x_shape, dtype=dout.dtype)
    for n, m in enumerate(masks):
        i, j = divmod(n, p)
        dx[:, i::p, j::p, :] = dout * m
    return dx


def _colsum(m: np.ndarray) -> np.ndarray:
    # BLAS reduction; much faster than ndarray.sum(axis=0) for tall thin matrices
    return np.ones(m.shape[0], dtype=m.dtype) @ m


def _check_batch(params: ModelParams, batch: np.ndarray) -> np.ndarray:
    batch = np.asarray(batch)
    if batch.ndim != 4 or tuple(batch.shape[1:]) != params.arch.input_shape:
        raise InvalidInputError(
            f"batch shape {tuple(batch.shape)} does not match (B, {', '.join(map(str, params.arch.input_shape))})"
        )
    if batch.shape[0] < 1:
        raise InvalidInputError("empty batch")
    return batch.astype(params.dtype, copy=False)


def _extract(params: ModelParams, batch: np.ndarray, keep_cache: bool):
    arch = params.arch
    t = params.tensors
    x0 = np.ascontiguousarray(batch.transpose(0, 2, 3, 1))
    b = x0.shape[0]

    k1 = arch.conv1_kernel
    cols1 = _im2col(x0, k1)
    w1 = _conv_matrix(t["conv1.weight"])
    s1 = x0.shape[1] - k1 + 1
    z1 = (cols1 @ w1.T + t["conv1.bias"]).reshape(b, s1, s1, arch.conv1_channels)
    # max-pool and the rectifier commute; pooling first keeps the mask small
    m1, idx1 = _pool_forward(z1, arch.pool)
    p1 = np.maximum(m1, 0)

    k2 = arch.conv2_kernel
    cols2 = _im2col(p1, k2)
    w2 = _conv_matrix(t["conv2.weight"])
    s2 = p1.shape[1] - k2 + 1
    z2 = (cols2 @ w2.T + t["conv2.bias"]).reshape(b, s2, s2, arch.conv2_channels)
    m2, idx2 = _pool_forward(z2, arch.pool)
    p2 = np.maximum(m2, 0)

    flat = p2.transpose(0, 3, 1, 2).reshape(b, -1)
    z3 = flat @ t["fc1.weight"].T + t["fc1.bias"]
    emb = np.maximum(z3, 0)
    cache = None
    if keep_cache:
        cache = dict(
            cols1=cols1, z1_shape=z1.shape, m1=m1, idx1=idx1, p1_shape=p1.shape, cols2=cols2,
            z2_shape=z2.shape, m2=m2, idx2=idx2, p2_shape=p2.shape, flat=flat, z3=z3,
        )
    return emb, cache


def _head(params: ModelParams, emb: np.ndarray) -> np.ndarray:
    return emb @ params.tensors["fc2.weight"].T + params.tensors["fc2.bias"]


def embed(params: ModelParams, batch: np.ndarray) -> np.ndarray:
    """Post-rectifier output of fc1, shape (B, embed_dim)."""
    emb, _ = _extract(params, _check_batch(params, batch), keep_cache=False)
    return emb


def classify_embeddings(params: ModelParams, emb: np.ndarray) -> np.ndarray:
    """Apply the fc2 head to precomputed embeddings."""
    return _head(params, np.asarray(emb, dtype=params.dtype))


def forward(params: ModelParams, batch: np.ndarray) -> np.ndarray:
    """Logits, shape (B, n_classes)."""
    return _head(params, embed(params, batch))


def _check_labels(labels: Sequence[int], n: int, n_classes: int) -> np.ndarray:
    y = np.asarray(labels)
    if y.ndim != 1 or y.shape[0] != n:
        raise InvalidInputError(f"expected {n} labels, got shape {y.shape}")
    if not np.issubdtype(y.dtype, np.integer):
        raise InvalidInputError("labels must be integers")
    if n and (y.min() < 0 or y.max() >= n_classes):
        raise InvalidInputError(f"label out of range [0, {n_classes})")
    return y.astype(np.int64)


def cross_entropy(logits: np.ndarray, labels: Sequence[int]) -> float:
    """Mean cross-entropy, summed in float64."""
    y = _check_labels(labels, logits.shape[0], logits.shape[1])
    shifted = logits - logits.max(axis=1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=1))
    per_sample = logz - shifted[np.arange(len(y)), y]
    return float(per_sample.astype(np.float64).sum() / len(y))


def loss_and_grads(params: ModelParams, batch: np.ndarray, labels: Sequence[int]) -> tuple[float, Gradients]:
    """Mean cross-entropy over the batch and its exact gradient."""
    arch = params.arch
    t = params.tensors
    x = _check_batch(params, batch)
    b = x.shape[0]
    y = _check_labels(labels, b, arch.n_classes)

    emb, c = _extract(params, x, keep_cache=True)
    logits = _head(params, emb)

    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    sums = e.sum(axis=1, keepdims=True)
    per_sample = np.log(sums[:, 0]) - shifted[np.arange(b), y]
    loss = float(per_sample.astype(np.float64).sum() / b)

    dlogits = e / sums
    dlogits[np.arange(b), y] -= 1
    dlogits /= b

    g = {}
    g["fc2.weight"] = dlogits.T @ emb
    g["fc2.bias"] = dlogits.sum(axis=0)
    demb = dlogits @ t["fc2.weight"]

    dz3 = demb * (c["z3"] > 0)
    g["fc1.weight"] = dz3.T @ c["flat"]
    g["fc1.bias"] = dz3.sum(axis=0)
    dflat = dz3 @ t["fc1.weight"]

    pb, ph, pw, pc = c["p2_shape"]
    dp2 = dflat.reshape(pb, pc, ph, pw).transpose(0, 2, 3, 1)
    dz2 = _pool_backward(dp2 * (c["m2"] > 0), c["idx2"], c["z2_shape"], arch.pool)
    dz2 = dz2.reshape(-1, arch.conv2_channels)
    g["conv2.weight"] = _conv_weight_grad(dz2.T @ c["cols2"], t["conv2.weight"].shape)
    g["conv2.bias"] = _colsum(dz2)
    dcols2 = dz2 @ _conv_matrix(t["conv2.weight"])
    dp1 = _col2im(dcols2, c["p1_shape"], arch.conv2_kernel)

    dz1 = _pool_backward(dp1 * (c["m1"] > 0), c["idx1"], c["z1_shape"], arch.pool)
    dz1 = dz1.reshape(-1, arch.conv1_channels)
    g["conv1.weight"] = _conv_weight_grad(dz1.T @ c["cols1"], t["conv1.weight"].shape)
    g["conv1.bias"] = _colsum(dz1)

    dtype = params.dtype
    return loss, ModelParams(arch, {k: v.astype(dtype, copy=False) for k, v in g.items()})


def sgd_step(params: ModelParams, grads: Gradients, lr: float) -> ModelParams:
    """Return ``p - lr * g`` for every tensor; inputs are left untouched."""
    if lr < 0:
        raise InvalidInputError("lr must be >= 0")
    params.check_congruent(grads)
    dtype = params.dtype
    step = dtype.type(lr)
    return ModelParams(
        params.arch, {k: (p - step * grads.tensors[k]).astype(dtype, copy=False) for k, p in params.items()}
    )
