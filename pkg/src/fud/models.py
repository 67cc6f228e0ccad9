"""Classifier, remover and identifier networks on top of :mod:`fud.tensor`."""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from fud import tensor as T
from fud.data import FormatError
from fud.tensor import ContractError, Tensor

CHECKPOINT_MAGIC = b"FUMC"
CHECKPOINT_VERSION = 1


class BuildError(ValueError):
    """A model spec does not produce consistent layer shapes."""


# ---------------------------------------------------------------------------
# specs


@dataclass
class ClassifierSpec:
    conv: list[tuple[int, int, int]] = field(default_factory=lambda: [(8, 3, 1), (16, 3, 1)])
    pool: int = 2
    hidden: int = 64
    outputs: int = 2
    head: str = "softmax"
    input_shape: tuple[int, int, int] = (1, 32, 32)

    def validate(self) -> None:
        if len(self.conv) < 2:
            raise BuildError("classifier needs at least 2 conv layers so a higher layer can be targeted")
        if self.head not in ("softmax", "sigmoid"):
            raise BuildError(f"unknown head {self.head!r}")
        if self.outputs < 1 or self.hidden < 1:
            raise BuildError("outputs and hidden width must be positive")


@dataclass
class RemoverSpec:
    encoder: list[int] = field(default_factory=lambda: [8, 16])
    decoder: list[int] = field(default_factory=lambda: [16, 8])
    kernel: int = 3
    head_bias: float = 3.0
    input_shape: tuple[int, int, int] = (1, 32, 32)
    skips: bool = True
    coords: bool = True

    def validate(self) -> None:
        if len(self.encoder) != len(self.decoder):
            raise BuildError("remover needs one decoder block per encoder block so the mask matches the input size")
        _, h, w = self.input_shape
        scale = 2 ** len(self.encoder)
        if h % scale or w % scale:
            raise BuildError(f"remover input {h}x{w} is not divisible by 2^{len(self.encoder)}")


@dataclass
class FilterPartition:
    """Grouping of target-layer filters; ``assignment[i]`` is the 1-based group of filter i."""

    assignment: list[int]

    def __post_init__(self):
        self.assignment = [int(a) for a in self.assignment]
        self.validate()

    @property
    def k(self) -> int:
        return max(self.assignment) if self.assignment else 0

    @property
    def d(self) -> int:
        return len(self.assignment)

    def validate(self, d: int | None = None) -> None:
        if not self.assignment:
            raise ContractError("partition is empty")
        if d is not None and len(self.assignment) != d:
            raise ContractError(f"partition covers {len(self.assignment)} filters, layer has {d}")
        k = max(self.assignment)
        if min(self.assignment) < 1:
            raise ContractError("group ids must start at 1")
        present = set(self.assignment)
        missing = set(range(1, k + 1)) - present
        if missing:
            raise ContractError(f"partition has empty groups {sorted(missing)}")

    def groups(self) -> list[list[int]]:
        out = [[] for _ in range(self.k)]
        for i, g in enumerate(self.assignment):
            out[g - 1].append(i)
        return out

    def indicator(self) -> np.ndarray:
        """One-hot d x K membership matrix."""
        m = np.zeros((self.d, self.k))
        m[np.arange(self.d), np.asarray(self.assignment) - 1] = 1.0
        return m


# ---------------------------------------------------------------------------
# layers


class Conv2d:
    def __init__(self, cin: int, cout: int, k: int, stride: int, rng: np.random.Generator):
        self.stride = stride
        self.pad = k // 2
        self.weight = Tensor(T.he_uniform(rng, (cout, cin, k, k), cin * k * k), requires_grad=True)
        self.bias = Tensor(np.zeros(cout), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        y = T.conv2d(x, self.weight, self.stride, self.pad)
        return y + T.reshape(self.bias, (1, -1, 1, 1))

    def parameters(self) -> list[Tensor]:
        return [self.weight, self.bias]


class Linear:
    def __init__(self, fan_in: int, fan_out: int, rng: np.random.Generator):
        self.weight = Tensor(T.he_uniform(rng, (fan_in, fan_out), fan_in), requires_grad=True)
        self.bias = Tensor(np.zeros(fan_out), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return x @ self.weight + self.bias

    def parameters(self) -> list[Tensor]:
        return [self.weight, self.bias]


# ---------------------------------------------------------------------------
# models


class Model:
    kind = "model"

    def parameters(self) -> list[Tensor]:
        raise NotImplementedError

    def set_trainable(self, flag: bool) -> None:
        for p in self.parameters():
            p.requires_grad = flag

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def state(self) -> list[np.ndarray]:
        return [p.data.copy() for p in self.parameters()]

    def load_state(self, arrays) -> None:
        params = self.parameters()
        if len(arrays) != len(params):
            raise ContractError(f"state has {len(arrays)} arrays, model has {len(params)} parameters")
        for p, a in zip(params, arrays):
            if p.data.shape != np.shape(a):
                raise ContractError(f"state shape {np.shape(a)} does not match parameter {p.data.shape}")
            p.data[...] = a

    def copy(self) -> "Model":
        clone = build(self.spec_dict(), seed=0)
        clone.load_state(self.state())
        if isinstance(self, Identifier) and self.partition is not None:
            clone.partition = FilterPartition(list(self.partition.assignment))
        return clone

    def spec_dict(self) -> dict:
        raise NotImplementedError


class Classifier(Model):
    """conv-relu-pool blocks, a relu hidden layer, and a softmax or sigmoid head."""

    kind = "classifier"

    def __init__(self, spec: ClassifierSpec, seed: int = 0):
        spec.validate()
        self.spec = spec
        rng = np.random.default_rng([seed, 0xC1A5])
        c, h, w = spec.input_shape
        self.convs: list[Conv2d] = []
        self.block_shapes: list[tuple[int, int, int]] = []
        for i, (filters, k, stride) in enumerate(spec.conv):
            if k > h + 2 * (k // 2) or k > w + 2 * (k // 2):
                raise BuildError(f"conv layer {i}: kernel {k} larger than its {h}x{w} input")
            self.convs.append(Conv2d(c, filters, k, stride, rng))
            h = (h + 2 * (k // 2) - k) // stride + 1
            w = (w + 2 * (k // 2) - k) // stride + 1
            h, w = h // spec.pool, w // spec.pool
            if h < 1 or w < 1:
                raise BuildError(f"conv layer {i}: spatial size collapses to {h}x{w}")
            c = filters
            self.block_shapes.append((c, h, w))
        self.hidden = Linear(c * h * w, spec.hidden, rng)
        self.head = Linear(spec.hidden, spec.outputs, rng)

    @property
    def n_conv(self) -> int:
        return len(self.convs)

    def parameters(self) -> list[Tensor]:
        out = []
        for conv in self.convs:
            out += conv.parameters()
        return out + self.hidden.parameters() + self.head.parameters()

    def forward(self, x, hook: int | None = None):
        """Return the model output; with ``hook`` also the post-relu output of that conv block."""
        if hook is not None and not 0 <= hook < self.n_conv:
            raise ContractError(f"layer id {hook} is not a conv layer (model has {self.n_conv})")
        h = T.as_tensor(x)
        if h.ndim == 3:
            h = T.reshape(h, (1,) + h.shape)
        activation = None
        for i, conv in enumerate(self.convs):
            h = T.max_pool2d(T.relu(conv(h)), self.spec.pool)
            if i == hook:
                activation = h
        h = T.reshape(h, (h.shape[0], -1))
        h = T.relu(self.hidden(h))
        out = self.head(h)
        if self.spec.head == "sigmoid":
            out = T.sigmoid(out)
        return (out, activation) if hook is not None else out

    __call__ = forward

    def spec_dict(self) -> dict:
        return {"kind": self.kind, "spec": _spec_json(self.spec)}


class Remover(Model):
    """Encoder-decoder that outputs a sigmoid mask with the input's shape."""

    kind = "remover"

    def __init__(self, spec: RemoverSpec, seed: int = 0):
        spec.validate()
        self.spec = spec
        rng = np.random.default_rng([seed, 0x2E30])
        c, h, w = spec.input_shape
        k = spec.kernel
        self.coord_grid = None
        if spec.coords:
            rows, cols = np.meshgrid(np.linspace(-1, 1, h), np.linspace(-1, 1, w), indexing="ij")
            self.coord_grid = np.stack([rows, cols])[None]
        self.encoder = []
        cin = c + (2 if spec.coords else 0)
        widths = [cin]
        for filters in spec.encoder:
            self.encoder.append(Conv2d(cin, filters, k, 1, rng))
            cin = filters
            widths.append(filters)
        # decoder block j restores the resolution of encoder input len-1-j
        self.decoder = []
        for j, filters in enumerate(spec.decoder):
            skip = widths[len(spec.encoder) - 1 - j] if spec.skips else 0
            self.decoder.append(Conv2d(cin + skip, filters, k, 1, rng))
            cin = filters
        self.mask_head = Conv2d(cin, c, 1, 1, rng)
        self.mask_head.bias.data[...] = spec.head_bias

    def parameters(self) -> list[Tensor]:
        out = []
        for conv in self.encoder + self.decoder:
            out += conv.parameters()
        return out + self.mask_head.parameters()

    def mask(self, x) -> Tensor:
        """Per-pixel keep probability in (0, 1), same shape as ``x``."""
        h = T.as_tensor(x)
        if self.coord_grid is not None:
            h = T.concat([h, np.broadcast_to(self.coord_grid, (h.shape[0],) + self.coord_grid.shape[1:])], axis=1)
        skips = []
        for conv in self.encoder:
            skips.append(h)
            h = T.max_pool2d(T.relu(conv(h)), 2)
        for conv in self.decoder:
            h = T.upsample_nearest(h, 2)
            if self.spec.skips:
                h = T.concat([h, skips.pop()], axis=1)
            h = T.relu(conv(h))
        return T.sigmoid(self.mask_head(h))

    def forward(self, x) -> Tensor:
        return apply_remover(self, x)

    __call__ = forward

    def spec_dict(self) -> dict:
        return {"kind": self.kind, "spec": _spec_json(self.spec)}


class Identifier(Classifier):
    """Classifier whose ``target_layer`` filters carry a :class:`FilterPartition`."""

    kind = "identifier"

    def __init__(self, spec: ClassifierSpec, target_layer: int | None = None, seed: int = 0):
        super().__init__(spec, seed)
        self.target_layer = self.n_conv - 1 if target_layer is None else target_layer
        if not 0 <= self.target_layer < self.n_conv:
            raise BuildError(f"target layer {self.target_layer} is not a conv layer")
        self._partition: FilterPartition | None = None

    @property
    def target_filters(self) -> int:
        return self.block_shapes[self.target_layer][0]

    @property
    def partition(self) -> FilterPartition | None:
        return self._partition

    @partition.setter
    def partition(self, value: FilterPartition | None) -> None:
        if value is not None:
            value.validate(self.target_filters)
        self._partition = value

    def spec_dict(self) -> dict:
        d = {"kind": self.kind, "spec": _spec_json(self.spec), "target_layer": self.target_layer}
        d["partition"] = (
            {"K": self.partition.k, "assignment": self.partition.assignment} if self.partition else None
        )
        return d


def _spec_json(spec) -> dict:
    d = asdict(spec)
    for key, value in d.items():
        if isinstance(value, tuple):
            d[key] = list(value)
        elif isinstance(value, list):
            d[key] = [list(v) if isinstance(v, tuple) else v for v in value]
    return d


def build(spec, seed: int = 0) -> Model:
    """Build a model from a spec object or from a ``spec_dict()`` document."""
    if isinstance(spec, ClassifierSpec):
        return Classifier(spec, seed)
    if isinstance(spec, RemoverSpec):
        return Remover(spec, seed)
    if isinstance(spec, dict):
        kind = spec.get("kind")
        body = dict(spec["spec"])
        body["input_shape"] = tuple(body["input_shape"])
        if kind in ("classifier", "identifier"):
            body["conv"] = [tuple(c) for c in body["conv"]]
            cs = ClassifierSpec(**body)
            if kind == "classifier":
                return Classifier(cs, seed)
            model = Identifier(cs, spec.get("target_layer"), seed)
            part = spec.get("partition")
            if part:
                model.partition = FilterPartition(part["assignment"])
            return model
        if kind == "remover":
            return Remover(RemoverSpec(**body), seed)
        raise BuildError(f"unknown model kind {kind!r}")
    raise BuildError(f"cannot build a model from {type(spec).__name__}")


def forward_hooked(model: Classifier, x, layer_id: int):
    return model.forward(x, hook=layer_id)


def apply_remover(remover: Remover, x) -> Tensor:
    """Masked instance ``x * mask(x)``."""
    x = T.as_tensor(x)
    return x * remover.mask(x)


# ---------------------------------------------------------------------------
# checkpoints


def checkpoint_bytes(model: Model, extra: dict | None = None) -> bytes:
    meta = model.spec_dict()
    if extra:
        meta["extra"] = extra
    block = json.dumps(meta, sort_keys=True).encode()
    params = b"".join(np.ascontiguousarray(p.data, dtype="<f8").tobytes() for p in model.parameters())
    return CHECKPOINT_MAGIC + struct.pack("<II", CHECKPOINT_VERSION, len(block)) + block + params


def save_checkpoint(model: Model, path, extra: dict | None = None) -> None:
    """Layout: ``FUMC``, u32 version, u32 JSON length, JSON spec block, float64 LE parameters."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(checkpoint_bytes(model, extra))
    tmp.replace(path)


def read_checkpoint(raw: bytes) -> tuple[Model, dict]:
    if len(raw) < 12 or raw[:4] != CHECKPOINT_MAGIC:
        raise FormatError("not a FUMC checkpoint")
    version, length = struct.unpack("<II", raw[4:12])
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    if len(raw) < 12 + length:
        raise FormatError("checkpoint truncated inside the spec block")
    try:
        meta = json.loads(raw[12 : 12 + length])
    except ValueError as exc:
        raise FormatError(f"corrupt checkpoint spec block: {exc}") from None
    model = build(meta, seed=0)
    sizes = [p.data.size for p in model.parameters()]
    expected = 12 + length + 8 * sum(sizes)
    if len(raw) != expected:
        raise FormatError(f"checkpoint has {len(raw)} bytes, expected {expected}")
    flat = np.frombuffer(raw, dtype="<f8", offset=12 + length)
    arrays, at = [], 0
    for p, size in zip(model.parameters(), sizes):
        arrays.append(flat[at : at + size].reshape(p.data.shape))
        at += size
    model.load_state(arrays)
    return model, meta.get("extra", {})


def load_checkpoint(path) -> Model:
    return read_checkpoint(Path(path).read_bytes())[0]
