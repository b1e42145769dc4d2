"""Trainable cell network and its gradient entry points."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .errors import FormatError, NumericError, ShapeError
from .genome import FIRST_NODE, OPS, CellSpec, NetworkSpec, cell_output_nodes
from .tensor import Tensor


def _uniform(rng: np.random.Generator, shape, fan_in: int, gain: float) -> np.ndarray:
    bound = gain * np.sqrt(3.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(T.default_dtype())


@dataclass
class _Edge:
    op: int
    src: int
    depthwise: Tensor | None = None
    pointwise: Tensor | None = None


class _Cell:
    def __init__(self, spec: CellSpec, channels: int, reduction: bool, rng, prefix: str):
        self.spec = spec
        self.reduction = reduction
        self.outputs = sorted(cell_output_nodes(spec))
        self.edges: list[list[_Edge]] = []
        self.params: list[Tensor] = []
        for k, pair in enumerate(spec.nodes, start=FIRST_NODE):
            node_edges = []
            for e, (op, src) in enumerate(pair):
                edge = _Edge(op, src)
                name = OPS[op]
                if name.startswith(("sep", "dil")):
                    ks = int(name[-1])
                    edge.depthwise = T.tensor(
                        _uniform(rng, (channels, ks, ks), ks * ks, np.sqrt(2.0)),
                        requires_grad=True, name=f"{prefix}.n{k}e{e}.{name}.dw")
                    edge.pointwise = T.tensor(
                        _uniform(rng, (channels, channels), channels, 1.0),
                        requires_grad=True, name=f"{prefix}.n{k}e{e}.{name}.pw")
                    self.params += [edge.depthwise, edge.pointwise]
                node_edges.append(edge)
            self.edges.append(node_edges)
        fan_in = channels * len(self.outputs)
        self.proj_w = T.tensor(_uniform(rng, (channels, fan_in), fan_in, 1.0),
                               requires_grad=True, name=f"{prefix}.proj.w")
        self.proj_b = T.tensor(np.zeros(channels), requires_grad=True, name=f"{prefix}.proj.b")
        self.params += [self.proj_w, self.proj_b]

    @staticmethod
    def _apply(edge: _Edge, x: Tensor) -> Tensor:
        name = OPS[edge.op]
        if name == "max_3x3":
            return T.max_pool2d(x, 3, 1, 1)
        if name == "avg_3x3":
            return T.avg_pool2d(x, 3, 1, 1)
        if name == "identity":
            return x
        k = int(name[-1])
        dilation = 2 if name.startswith("dil") else 1
        h = T.relu(x)
        h = T.depthwise_conv2d(h, edge.depthwise, padding=dilation * (k - 1) // 2,
                               dilation=dilation)
        return T.conv1x1(h, edge.pointwise)

    def forward(self, s0: Tensor, s1: Tensor) -> Tensor:
        target = (s1.shape[2] + 1) // 2 if self.reduction else s1.shape[2]
        states = [_downsample_to(s0, target), _downsample_to(s1, target)]
        for node_edges in self.edges:
            a, b = (self._apply(e, states[e.src]) for e in node_edges)
            states.append(T.add(a, b))
        cat = T.concat([states[k] for k in self.outputs], axis=1)
        return T.conv1x1(cat, self.proj_w, self.proj_b)


def _downsample_to(x: Tensor, size: int) -> Tensor:
    # stride-2 entry transform: parameter-free 3x3 max pool
    while x.shape[2] > size:
        x = T.max_pool2d(x, 3, 2, 1)
    if x.shape[2] != size:
        raise ShapeError("cell input", f"spatial {size}", x.shape)
    return x


class Model:
    """Stem, stacked cells, global average pooling and a linear classifier.

    Parameters are created in a fixed order from ``seed``, so two models
    built from the same spec and seed are bit-identical.
    """

    def __init__(self, spec: NetworkSpec, seed: int = 0):
        self.spec = spec
        self.seed = seed
        rng = np.random.default_rng(seed)
        c = spec.channels
        fan = spec.in_channels * 9
        self.stem_w = T.tensor(_uniform(rng, (c, spec.in_channels, 3, 3), fan, 1.0),
                               requires_grad=True, name="stem.w")
        self.stem_b = T.tensor(np.zeros(c), requires_grad=True, name="stem.b")
        self.cells: list[_Cell] = []
        for i, kind in enumerate(spec.layout()):
            cell_spec = spec.reduction if kind == "reduction" else spec.normal
            self.cells.append(_Cell(cell_spec, c, kind == "reduction", rng, f"cell{i}"))
        self.fc_w = T.tensor(_uniform(rng, (spec.num_classes, c), c, 1.0),
                             requires_grad=True, name="fc.w")
        self.fc_b = T.tensor(np.zeros(spec.num_classes), requires_grad=True, name="fc.b")
        self.params: list[Tensor] = [self.stem_w, self.stem_b]
        for cell in self.cells:
            self.params += cell.params
        self.params += [self.fc_w, self.fc_b]

    @property
    def num_params(self) -> int:
        return int(sum(p.data.size for p in self.params))

    @property
    def dtype(self):
        return self.stem_w.data.dtype

    def __call__(self, x: Tensor) -> Tensor:
        return self.forward_tensor(x)

    def forward_tensor(self, x: Tensor) -> Tensor:
        if x.data.ndim != 4 or x.shape[1] != self.spec.in_channels:
            raise ShapeError("stem", f"(N, {self.spec.in_channels}, H, W)", x.shape)
        if x.shape[3] != x.shape[2]:
            raise ShapeError("stem", "square input", x.shape)
        # fixed centring of [0, 1] pixels; attacks still operate in pixel space
        x = T.add(x, T.Tensor(np.full(x.shape, -0.5, dtype=x.data.dtype)))
        s = T.conv2d(x, self.stem_w, self.stem_b, padding=1)
        s0 = s1 = s
        for cell in self.cells:
            s0, s1 = s1, cell.forward(s0, s1)
        pooled = T.global_avg_pool(s1)
        logits = T.linear(pooled, self.fc_w, self.fc_b)
        if not np.all(np.isfinite(logits.data)):
            raise NumericError("non-finite logits")
        return logits

    # parameter plumbing -------------------------------------------------

    def get_params(self) -> list[np.ndarray]:
        return [p.data.copy() for p in self.params]

    def set_params(self, arrays) -> None:
        arrays = list(arrays)
        if len(arrays) != len(self.params):
            raise ValueError(f"expected {len(self.params)} arrays, got {len(arrays)}")
        for p, a in zip(self.params, arrays):
            if a.shape != p.data.shape:
                raise ShapeError(p.name, p.data.shape, a.shape)
            p.data = np.array(a, dtype=p.data.dtype)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def _set_requires_grad(self, flag: bool) -> None:
        for p in self.params:
            p.requires_grad = flag

    def save(self, path, meta: dict | None = None) -> None:
        header = {"spec": self.spec.to_dict(), "seed": self.seed, "meta": meta or {}}
        arrays = {f"p{i:04d}": p.data for i, p in enumerate(self.params)}
        with open(path, "wb") as fh:
            np.savez(fh, header=np.frombuffer(json.dumps(header).encode(), dtype=np.uint8),
                     **arrays)

    @classmethod
    def load(cls, path) -> "Model":
        model, _ = load_model(path)
        return model


def load_model(path) -> tuple[Model, dict]:
    """Load a model file written by :meth:`Model.save`; returns ``(model, meta)``."""
    path = Path(path)
    try:
        with np.load(path) as z:
            header = json.loads(bytes(z["header"]).decode())
            arrays = [z[f"p{i:04d}"] for i in range(len(z.files) - 1)]
    except (OSError, KeyError, ValueError) as exc:
        raise FormatError(f"cannot read model file {path}: {exc}") from exc
    spec = NetworkSpec.from_dict(header["spec"])
    with T.precision(arrays[0].dtype):
        model = Model(spec, header["seed"])
    model.set_params(arrays)
    return model, header.get("meta", {})


def build_model(spec: NetworkSpec, seed: int = 0) -> Model:
    return Model(spec, seed)


def _as_input(model: Model, batch, requires_grad: bool) -> Tensor:
    x = np.asarray(batch, dtype=model.dtype)
    if x.ndim != 4:
        raise ShapeError("stem", "(N, C, H, W)", x.shape)
    return Tensor(x, requires_grad=requires_grad)


def forward(model: Model, batch) -> np.ndarray:
    """Logits for ``batch`` without recording a graph."""
    model._set_requires_grad(False)
    try:
        return model.forward_tensor(_as_input(model, batch, False)).data
    finally:
        model._set_requires_grad(True)


def predict(model: Model, images, batch_size: int = 256) -> np.ndarray:
    """Arg-max class per image (ties go to the lowest index)."""
    out = [forward(model, images[i:i + batch_size]).argmax(axis=1)
           for i in range(0, len(images), batch_size)]
    return np.concatenate(out) if out else np.empty(0, dtype=np.int64)


def loss_and_input_grad(model: Model, batch, labels) -> tuple[float, np.ndarray]:
    """Mean cross-entropy and its gradient with respect to the input batch."""
    model._set_requires_grad(False)
    try:
        x = _as_input(model, batch, True)
        loss = T.softmax_cross_entropy(model.forward_tensor(x), labels)
        loss.backward()
    finally:
        model._set_requires_grad(True)
    return float(loss.data), x.grad


def loss_and_param_grad(model: Model, batch, labels) -> tuple[float, list[np.ndarray]]:
    """Mean cross-entropy and one gradient array per parameter (zeros if unused)."""
    model.zero_grad()
    x = _as_input(model, batch, False)
    loss = T.softmax_cross_entropy(model.forward_tensor(x), labels)
    loss.backward()
    grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in model.params]
    model.zero_grad()
    return float(loss.data), grads
