"""Model specifications, forward passes and checkpoint persistence."""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .errors import DimensionError, FormatError, NonFiniteError
from .rng import generator

MLP = "mlp"
MNIST_CONVNET = "mnist_convnet"

# conv(1->32, 5x5, pad 2) -> pool -> conv(32->64, 5x5, pad 2) -> pool -> fc 3136 -> 1024 -> 10
_CONVNET_LAYERS = (
    ("conv1.weight", (32, 1, 5, 5)),
    ("conv1.bias", (32,)),
    ("conv2.weight", (64, 32, 5, 5)),
    ("conv2.bias", (64,)),
    ("fc1.weight", (3136, 1024)),
    ("fc1.bias", (1024,)),
    ("fc2.weight", (1024, 10)),
    ("fc2.bias", (10,)),
)


@dataclass(frozen=True)
class ModelSpec:
    """Which network to build.

    ``kind`` is ``"mlp"`` (fully connected, ReLU between layers, ``widths``
    lists every layer including input and output) or ``"mnist_convnet"``.
    """

    kind: str
    widths: tuple = ()
    n_classes: int = 10

    def __post_init__(self):
        if self.kind == MLP:
            widths = tuple(int(w) for w in self.widths)
            if len(widths) < 2 or min(widths) < 1:
                raise ValueError(f"MLP needs at least two positive widths, got {self.widths}")
            object.__setattr__(self, "widths", widths)
            object.__setattr__(self, "n_classes", widths[-1])
        elif self.kind == MNIST_CONVNET:
            object.__setattr__(self, "widths", ())
            object.__setattr__(self, "n_classes", 10)
        else:
            raise ValueError(f"unknown model kind {self.kind!r}")

    @classmethod
    def mlp(cls, widths=(2, 64, 64, 64, 2)):
        return cls(MLP, tuple(widths))

    @classmethod
    def mnist_convnet(cls):
        return cls(MNIST_CONVNET)

    @property
    def input_shape(self):
        return (self.widths[0],) if self.kind == MLP else (1, 28, 28)

    def layer_shapes(self):
        """Ordered ``(name, shape)`` of every parameter tensor."""
        if self.kind == MNIST_CONVNET:
            return list(_CONVNET_LAYERS)
        shapes = []
        for i, (fan_in, fan_out) in enumerate(zip(self.widths[:-1], self.widths[1:])):
            shapes.append((f"fc{i}.weight", (fan_in, fan_out)))
            shapes.append((f"fc{i}.bias", (fan_out,)))
        return shapes

    def parameter_count(self):
        return sum(math.prod(shape) for _, shape in self.layer_shapes())

    def to_dict(self):
        if self.kind == MLP:
            return {"kind": MLP, "widths": list(self.widths)}
        return {"kind": MNIST_CONVNET}

    @classmethod
    def from_dict(cls, d):
        if d.get("kind") == MLP:
            return cls.mlp(d["widths"])
        if d.get("kind") == MNIST_CONVNET:
            return cls.mnist_convnet()
        raise ValueError(f"unknown model spec {d!r}")


@dataclass(frozen=True, eq=False)
class ModelParams:
    """Parameter tensors for one :class:`ModelSpec` (read-only arrays)."""

    spec: ModelSpec
    tensors: dict
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        expected = dict(self.spec.layer_shapes())
        if set(expected) != set(self.tensors):
            raise DimensionError(
                f"parameter names {sorted(self.tensors)} do not match spec {sorted(expected)}"
            )
        frozen = {}
        dtypes = set()
        for name, shape in self.spec.layer_shapes():
            arr = np.asarray(self.tensors[name])
            if arr.shape != shape:
                raise DimensionError(f"{name}: shape {arr.shape}, expected {shape}")
            if not np.all(np.isfinite(arr)):
                raise NonFiniteError(f"{name} has non-finite values")
            if arr.flags.writeable:
                arr = arr.copy()
                arr.flags.writeable = False
            frozen[name] = arr
            dtypes.add(arr.dtype)
        if len(dtypes) != 1:
            raise TypeError(f"mixed parameter precision {dtypes}")
        object.__setattr__(self, "tensors", frozen)

    def __getitem__(self, name):
        return self.tensors[name]

    def names(self):
        return [name for name, _ in self.spec.layer_shapes()]

    @property
    def dtype(self):
        return next(iter(self.tensors.values())).dtype

    def astype(self, dtype):
        return ModelParams(
            self.spec, {k: v.astype(dtype) for k, v in self.tensors.items()}, dict(self.metadata)
        )

    def replace(self, tensors):
        return ModelParams(self.spec, tensors, dict(self.metadata))

    def bitwise_equal(self, other):
        return (
            self.spec == other.spec
            and self.names() == other.names()
            and all(
                self[n].dtype == other[n].dtype and self[n].tobytes() == other[n].tobytes()
                for n in self.names()
            )
        )


def init_params(spec: ModelSpec, seed: int, dtype=np.float32) -> ModelParams:
    """He-style uniform weights ``U[-sqrt(6/fan_in), sqrt(6/fan_in)]``, zero biases."""
    rng = generator(seed, "init")
    tensors = {}
    for name, shape in spec.layer_shapes():
        if name.endswith(".bias"):
            tensors[name] = np.zeros(shape, dtype=dtype)
            continue
        fan_in = shape[0] if len(shape) == 2 else math.prod(shape[1:])
        bound = math.sqrt(6.0 / fan_in)
        tensors[name] = rng.uniform(-bound, bound, size=shape).astype(dtype)
    return ModelParams(spec, tensors)


def _param_tensors(params, tape, param_grads):
    if tape is not None and param_grads:
        return {name: tape.watch(params[name], name) for name in params.names()}
    return {name: T.Tensor._wrap(params[name]) for name in params.names()}


def forward_logits(params: ModelParams, x, tape=None, param_grads=False) -> T.Tensor:
    """Logits for one sample ``x`` or a batch ``(N, *input_shape)``.

    Pass a tape on which ``x`` is a watched leaf to get input gradients;
    ``param_grads=True`` additionally watches every parameter under its
    own name.
    """
    spec = params.spec
    if not isinstance(x, T.Tensor):
        x = T.Tensor._wrap(np.asarray(x, dtype=params.dtype))
    in_shape = spec.input_shape
    if x.shape == in_shape:
        single = True
        x = T.reshape(x, (1,) + in_shape)
    elif x.ndim == len(in_shape) + 1 and x.shape[1:] == in_shape:
        single = False
    else:
        raise DimensionError(f"input shape {x.shape} does not match model input {in_shape}")
    w = _param_tensors(params, tape, param_grads)

    if spec.kind == MLP:
        h = x
        n_layers = len(spec.widths) - 1
        for i in range(n_layers):
            h = T.add(T.matmul(h, w[f"fc{i}.weight"]), w[f"fc{i}.bias"])
            if i < n_layers - 1:
                h = T.relu(h)
    else:
        h = T.maxpool2d(T.relu(T.conv2d(x, w["conv1.weight"], w["conv1.bias"], padding=2)))
        h = T.maxpool2d(T.relu(T.conv2d(h, w["conv2.weight"], w["conv2.bias"], padding=2)))
        h = T.reshape(h, (h.shape[0], -1))
        h = T.relu(T.add(T.matmul(h, w["fc1.weight"]), w["fc1.bias"]))
        h = T.add(T.matmul(h, w["fc2.weight"]), w["fc2.bias"])
    if not np.all(np.isfinite(h.data)):
        raise NonFiniteError("forward pass produced non-finite logits")
    if single:
        h = T.reshape(h, (spec.n_classes,))
    return h


def loss(params, x, y_label, tape=None, reduction="sum", param_grads=False) -> T.Tensor:
    """Cross-entropy of the model's logits against ``y_label``."""
    return T.softmax_cross_entropy(
        forward_logits(params, x, tape, param_grads=param_grads), y_label, reduction=reduction
    )


def predict(params, x):
    """``(label, probabilities)``; ties go to the lowest class index."""
    probs = T.softmax(forward_logits(params, x))
    return np.argmax(probs, axis=-1), probs


def input_gradient(params, x, labels, reduction="sum"):
    """Per-sample gradient of the loss w.r.t. the input, and the loss values."""
    tape = T.Tape()
    xt = tape.watch(np.asarray(x, dtype=params.dtype), "x")
    rows = loss(params, xt, labels, tape, reduction="none")
    total = T.sum(rows) if rows.ndim else rows
    grads = T.backward(total, tape)
    return grads["x"].data, rows.data


# ----------------------------------------------------------------- container

MAGIC = b"APNMLCK\x00"
VERSION = 1


class CheckpointError(Exception):
    """Base class for checkpoint load failures."""


class CheckpointFormatError(CheckpointError, FormatError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointSpecError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError, OSError):
    pass


def write_container(path, arrays, header=None):
    """Write ``arrays`` (ordered name -> array) with a JSON header.

    Layout: 8-byte magic, u32 version, u32 header length (little-endian),
    UTF-8 JSON header, then each array's raw little-endian values in order.
    """
    records = []
    blobs = []
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        le = arr.dtype.newbyteorder("<")
        records.append({"name": name, "shape": list(arr.shape), "dtype": le.str})
        blobs.append(np.ascontiguousarray(arr, dtype=le).tobytes())
    head = dict(header or {})
    head["records"] = records
    text = json.dumps(head, sort_keys=True).encode("utf-8")
    path = Path(path)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", VERSION, len(text)))
        f.write(text)
        for blob in blobs:
            f.write(blob)


def read_container(path):
    """Inverse of :func:`write_container`: ``(header, {name: array})``."""
    raw = Path(path).read_bytes()
    if len(raw) < 16:
        if raw[: len(MAGIC)] != MAGIC[: len(raw)]:
            raise CheckpointFormatError("bad magic")
        raise CheckpointTruncatedError("file shorter than fixed header")
    if raw[:8] != MAGIC:
        raise CheckpointFormatError(f"bad magic {raw[:8]!r}")
    version, head_len = struct.unpack("<II", raw[8:16])
    if version != VERSION:
        raise CheckpointVersionError(f"version {version}, expected {VERSION}")
    if len(raw) < 16 + head_len:
        raise CheckpointTruncatedError("header cut short")
    try:
        header = json.loads(raw[16 : 16 + head_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointFormatError(f"unreadable header: {exc}") from exc
    offset = 16 + head_len
    arrays = {}
    for rec in header["records"]:
        dtype = np.dtype(rec["dtype"])
        shape = tuple(rec["shape"])
        nbytes = dtype.itemsize * math.prod(shape)
        if offset + nbytes > len(raw):
            raise CheckpointTruncatedError(f"record {rec['name']!r} cut short")
        arr = np.frombuffer(raw, dtype=dtype, count=math.prod(shape), offset=offset)
        arrays[rec["name"]] = arr.reshape(shape).astype(dtype.newbyteorder("="))
        offset += nbytes
    if offset != len(raw):
        raise CheckpointFormatError(f"{len(raw) - offset} trailing bytes")
    return header, arrays


def save_checkpoint(params: ModelParams, path, metadata=None):
    meta = dict(params.metadata)
    meta.update(metadata or {})
    arrays = {name: params[name] for name in params.names()}
    write_container(path, arrays, {"kind": "model", "spec": params.spec.to_dict(), "metadata": meta})


def load_checkpoint(path, expected_spec: ModelSpec | None = None) -> ModelParams:
    header, arrays = read_container(path)
    if header.get("kind") != "model":
        raise CheckpointFormatError("container does not hold model parameters")
    try:
        spec = ModelSpec.from_dict(header["spec"])
    except (KeyError, ValueError) as exc:
        raise CheckpointSpecError(f"bad spec descriptor: {exc}") from exc
    if expected_spec is not None and spec != expected_spec:
        raise CheckpointSpecError(f"checkpoint holds {spec}, expected {expected_spec}")
    if list(arrays) != [name for name, _ in spec.layer_shapes()]:
        raise CheckpointSpecError("parameter records do not match the spec")
    try:
        return ModelParams(spec, arrays, header.get("metadata", {}))
    except DimensionError as exc:
        raise CheckpointSpecError(str(exc)) from exc
