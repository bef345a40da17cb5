"""Desk-scale MLP softmax classifiers and their losses.

Parameters live in one flat float64 vector; per-layer weight and bias views
are carved out of it with tape-level slicing so that a single backward pass
yields the full flat gradient.  That flat ordering (W0, b0, W1, b1, ...) is
the canonical ordering for every norm computation in the toolkit.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor

# Dense per-example Jacobians are a test-only tool; anything bigger than this
# is a sign the training path is misusing them.
JACOBIAN_PARAM_GUARD = 20_000

CHECKPOINT_MAGIC = b"BGCP"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelSpec:
    """Architecture of a relu MLP classifier mapping R^d to C logits."""

    input_dim: int
    class_count: int
    hidden: tuple[int, ...] = (256, 256)
    init_seed: int = 0

    def __post_init__(self):
        if self.input_dim < 1:
            raise ValueError("input_dim must be positive")
        if self.class_count < 2:
            raise ValueError("need at least two classes")
        if any(w < 1 for w in self.hidden):
            raise ValueError("hidden widths must be positive")
        object.__setattr__(self, "hidden", tuple(int(w) for w in self.hidden))

    @property
    def dims(self) -> list[int]:
        return [self.input_dim, *self.hidden, self.class_count]

    def layer_shapes(self) -> list[tuple[tuple[int, int], tuple[int]]]:
        d = self.dims
        return [((d[i], d[i + 1]), (d[i + 1],)) for i in range(len(d) - 1)]

    @property
    def param_count(self) -> int:
        return sum(int(np.prod(w)) + b[0] for w, b in self.layer_shapes())


@dataclass
class ModelParams:
    """Flat parameter vector plus the spec that gives it layer structure."""

    spec: ModelSpec
    flat: np.ndarray

    def __post_init__(self):
        self.flat = np.ascontiguousarray(self.flat, dtype=np.float64)
        if self.flat.shape != (self.spec.param_count,):
            raise ValueError(
                f"flat vector has {self.flat.size} entries, spec wants {self.spec.param_count}"
            )

    @classmethod
    def init(cls, spec: ModelSpec) -> "ModelParams":
        """He-style init: W ~ N(0, 2/fan_in), biases zero."""
        rng = np.random.default_rng(spec.init_seed)
        chunks = []
        for (wshape, bshape) in spec.layer_shapes():
            fan_in = wshape[0]
            chunks.append(rng.standard_normal(wshape).ravel() * np.sqrt(2.0 / fan_in))
            chunks.append(np.zeros(bshape))
        return cls(spec, np.concatenate(chunks))

    def copy(self) -> "ModelParams":
        return ModelParams(self.spec, self.flat.copy())

    def layer_arrays(self) -> list[tuple[np.ndarray, np.ndarray]]:
        """Per-layer (W, b) views into the flat buffer."""
        out, off = [], 0
        for (wshape, bshape) in self.spec.layer_shapes():
            nw, nb = int(np.prod(wshape)), bshape[0]
            out.append((self.flat[off:off + nw].reshape(wshape), self.flat[off + nw:off + nw + nb]))
            off += nw + nb
        return out

    @property
    def count(self) -> int:
        return self.flat.size


def _layer_tensors(theta: Tensor, spec: ModelSpec):
    """Slice the flat parameter tensor into on-tape (W, b) pairs."""
    out, off = [], 0
    for (wshape, bshape) in spec.layer_shapes():
        nw, nb = int(np.prod(wshape)), bshape[0]
        w = ad.reshape(ad.narrow(theta, off, nw), wshape)
        b = ad.reshape(ad.narrow(theta, off + nw, nb), (1, nb))
        out.append((w, b))
        off += nw + nb
    return out


def forward_tensor(theta: Tensor, spec: ModelSpec, x: np.ndarray) -> Tensor:
    """Logits for a batch of inputs, recorded on theta's tape."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if x.shape[1] != spec.input_dim:
        raise ValueError(f"inputs have width {x.shape[1]}, model wants {spec.input_dim}")
    h = Tensor(x)
    layers = _layer_tensors(theta, spec)
    for i, (w, b) in enumerate(layers):
        h = ad.add(ad.matmul(h, w), b)
        if i < len(layers) - 1:
            h = ad.relu(h)
    return h


def forward_values(params: ModelParams, x: np.ndarray) -> np.ndarray:
    """Plain numpy forward pass (no tape), for prediction and metrics."""
    h = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if h.shape[1] != params.spec.input_dim:
        raise ValueError(f"inputs have width {h.shape[1]}, model wants {params.spec.input_dim}")
    layers = params.layer_arrays()
    for i, (w, b) in enumerate(layers):
        h = h @ w + b
        if i < len(layers) - 1:
            np.maximum(h, 0.0, out=h)
    return h


def cross_entropy_tensor(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean negative log-softmax at the label indices."""
    labels = np.asarray(labels)
    c = logits.shape[-1]
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise ValueError(f"labels out of range [0, {c})")
    picked = ad.gather(ad.log_softmax(logits, axis=-1), labels)
    return ad.scale(ad.mean(picked), -1.0)


def log_softmax_values(logits: np.ndarray) -> np.ndarray:
    shift = logits - np.max(logits, axis=-1, keepdims=True)
    return shift - np.log(np.sum(np.exp(shift), axis=-1, keepdims=True))


def softmax_values(logits: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax_values(logits))


def cross_entropy_values(logits: np.ndarray, labels: np.ndarray) -> float:
    labels = np.asarray(labels)
    c = logits.shape[-1]
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise ValueError(f"labels out of range [0, {c})")
    ls = log_softmax_values(np.atleast_2d(logits))
    return float(-np.mean(ls[np.arange(len(labels)), labels]))


def batch_loss_and_gradient(params: ModelParams, x: np.ndarray, y: np.ndarray,
                            check_finite: bool = True) -> tuple[float, np.ndarray]:
    """Cross-entropy over (x, y) and its flat gradient in one pass."""
    tape = Tape(check_finite=check_finite)
    theta = tape.leaf(params.flat, name="theta")
    loss = cross_entropy_tensor(forward_tensor(theta, params.spec, x), y)
    grads = tape.backward(loss)
    return loss.item(), grads.wrt(theta).values


def accuracy(params: ModelParams, x: np.ndarray, y: np.ndarray) -> float:
    pred = np.argmax(forward_values(params, x), axis=1)
    return float(np.mean(pred == np.asarray(y)))


def sample_predictive_label(logits: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Draw one label per example from softmax(logits) by inverse CDF.

    One uniform draw per example, consumed in row order, so a fixed generator
    state reproduces the exact sample sequence.
    """
    logits = np.atleast_2d(np.asarray(logits, dtype=np.float64))
    if not np.all(np.isfinite(logits)):
        raise ValueError("non-finite logits")
    probs = softmax_values(logits)
    cum = np.cumsum(probs, axis=1)
    u = rng.random(logits.shape[0])
    idx = np.sum(cum < u[:, None], axis=1)
    return np.minimum(idx, logits.shape[1] - 1).astype(np.int64)


def per_example_jacobian(params: ModelParams, x: np.ndarray) -> np.ndarray:
    """Dense (p, C) Jacobian of the logits for one example; test-scale only."""
    if params.count > JACOBIAN_PARAM_GUARD:
        raise ValueError(
            f"{params.count} parameters exceed the dense-Jacobian guard of {JACOBIAN_PARAM_GUARD}"
        )
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if x.shape[0] != 1:
        raise ValueError("per_example_jacobian expects a single example")
    c = params.spec.class_count
    jac = np.zeros((params.count, c))
    for cls in range(c):
        tape = Tape()
        theta = tape.leaf(params.flat, name="theta")
        z = forward_tensor(theta, params.spec, x)
        zc = ad.sum(ad.gather(z, np.array([cls])))
        jac[:, cls] = tape.backward(zc).wrt(theta).values
    return jac


def grad_via_decomposition(params: ModelParams, x: np.ndarray,
                           weight_vector: np.ndarray) -> np.ndarray:
    """Flat gradient of <logits, v> for one example, i.e. the Jacobian times v.

    With v = softmax(z) - onehot(y) this reproduces the cross-entropy
    gradient, which is the identity the regularizer tests cross-check.
    """
    if params.count > JACOBIAN_PARAM_GUARD:
        raise ValueError(
            f"{params.count} parameters exceed the dense-Jacobian guard of {JACOBIAN_PARAM_GUARD}"
        )
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    v = np.asarray(weight_vector, dtype=np.float64).reshape(1, -1)
    if v.shape[1] != params.spec.class_count:
        raise ValueError("weight vector length must equal the class count")
    tape = Tape()
    theta = tape.leaf(params.flat, name="theta")
    z = forward_tensor(theta, params.spec, x)
    s = ad.sum(ad.mul(z, Tensor(v)))
    return tape.backward(s).wrt(theta).values


def onehot(labels: np.ndarray, class_count: int) -> np.ndarray:
    labels = np.asarray(labels)
    out = np.zeros((labels.size, class_count))
    out[np.arange(labels.size), labels] = 1.0
    return out


# ---------------------------------------------------------------------------
# parameter checkpoints
# ---------------------------------------------------------------------------
#
# Binary layout (all integers little-endian):
#   magic   4 bytes  b"BGCP"
#   version u32
#   ntens   u32
#   per tensor: ndim u32, extents u32[ndim]
#   payload: concatenated float64 little-endian values in tensor order
# Tensor order is the canonical flat ordering: W0, b0, W1, b1, ...

def save_checkpoint(params: ModelParams, path) -> None:
    shapes = []
    for (wshape, bshape) in params.spec.layer_shapes():
        shapes.append(wshape)
        shapes.append(bshape)
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(shapes)))
        for shape in shapes:
            fh.write(struct.pack("<I", len(shape)))
            fh.write(struct.pack(f"<{len(shape)}I", *shape))
        fh.write(params.flat.astype("<f8").tobytes())


def load_checkpoint(path) -> ModelParams:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"bad checkpoint magic {magic!r} at offset 0")
        version, ntens = struct.unpack("<II", fh.read(8))
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        shapes = []
        for _ in range(ntens):
            (ndim,) = struct.unpack("<I", fh.read(4))
            shapes.append(struct.unpack(f"<{ndim}I", fh.read(4 * ndim)))
        total = sum(int(np.prod(s)) for s in shapes)
        payload = fh.read(8 * total)
        if len(payload) != 8 * total:
            raise ValueError(
                f"truncated checkpoint: expected {8 * total} payload bytes, got {len(payload)}"
            )
        flat = np.frombuffer(payload, dtype="<f8").astype(np.float64)
    spec = _infer_spec(shapes)
    return ModelParams(spec, flat)


def _infer_spec(shapes: list[tuple[int, ...]]) -> ModelSpec:
    """Recover the MLP spec from an alternating (W, b) shape table."""
    if len(shapes) % 2 != 0:
        raise ValueError("shape table must alternate weight and bias tensors")
    widths = []
    for i in range(0, len(shapes), 2):
        w, b = shapes[i], shapes[i + 1]
        if len(w) != 2 or len(b) != 1 or w[1] != b[0]:
            raise ValueError(f"tensor pair {i // 2} is not a dense layer: {w}, {b}")
        if widths and w[0] != widths[-1]:
            raise ValueError("layer widths do not chain")
        if not widths:
            widths.append(w[0])
        widths.append(w[1])
    return ModelSpec(input_dim=widths[0], class_count=widths[-1], hidden=tuple(widths[1:-1]))
