"""Sequential CNN graphs: description parsing, shape inference, forward and
backward passes, structured channel removal and MAC accounting."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Iterable, NamedTuple, Union

import numpy as np
import yaml

from . import tensor as T
from . import tensorfile


class ModelError(ValueError):
    """Invalid model description or graph operation."""


class PruneError(ModelError):
    pass


# ------------------------------------------------------------------ layer specs


@dataclass(frozen=True)
class Conv:
    out: int
    k: int
    stride: int = 1
    pad: int = 0
    bias: bool = True


@dataclass(frozen=True)
class BatchNorm:
    eps: float = 1e-5
    momentum: float = 0.1


@dataclass(frozen=True)
class ReLU:
    pass


@dataclass(frozen=True)
class MaxPool:
    k: int
    stride: int | None = None
    pad: int = 0

    @property
    def step(self) -> int:
        return self.k if self.stride is None else self.stride


@dataclass(frozen=True)
class Flatten:
    pass


@dataclass(frozen=True)
class FC:
    out: int
    bias: bool = True


LayerSpec = Union[Conv, BatchNorm, ReLU, MaxPool, Flatten, FC]

LAYER_KINDS: dict[str, type] = {
    "conv": Conv,
    "bn": BatchNorm,
    "relu": ReLU,
    "maxpool": MaxPool,
    "flatten": Flatten,
    "fc": FC,
}
_KIND_NAMES = {v: k for k, v in LAYER_KINDS.items()}
_BRANCH_KINDS = {"branch", "concat", "add", "residual", "split", "merge", "attention", "stream"}


def kind_name(spec: LayerSpec) -> str:
    return _KIND_NAMES[type(spec)]


class ChannelId(NamedTuple):
    layer: int
    channel: int


class LayerShape(NamedTuple):
    in_dims: tuple[int, ...]
    out_dims: tuple[int, ...]


# -------------------------------------------------------------------- the graph


@dataclass
class ModelGraph:
    """An ordered layer list plus its parameters.

    ``params`` maps a layer index to that layer's named arrays (``weight``,
    ``bias`` for conv/FC; ``gamma``, ``beta``, ``running_mean``,
    ``running_var`` for batch norm).  Graphs are treated as values: pruning
    and training return new graphs.
    """

    name: str
    input_dims: tuple[int, int, int]
    classes: int
    layers: tuple[LayerSpec, ...]
    params: dict[int, dict[str, np.ndarray]] = field(default_factory=dict)
    seed: int = 0

    def __post_init__(self):
        self.input_dims = tuple(int(d) for d in self.input_dims)
        self.layers = tuple(self.layers)
        validate_layers(self.layers, self.input_dims, self.classes)

    def copy(self) -> "ModelGraph":
        params = {i: {k: v.copy() for k, v in p.items()} for i, p in self.params.items()}
        return dataclasses.replace(self, params=params)

    @property
    def shapes(self) -> list[LayerShape]:
        return shape_inference(self.layers, self.input_dims)

    @property
    def final_fc(self) -> int:
        return len(self.layers) - 1

    def prunable_layers(self) -> list[int]:
        return [i for i, s in enumerate(self.layers) if isinstance(s, (Conv, FC)) and i != self.final_fc]

    def channels(self, layer: int) -> int:
        return self.layers[layer].out

    def prunable_channels(self) -> list[ChannelId]:
        """Channels that :func:`prune_channel` would accept, in (layer, channel) order."""
        return [ChannelId(l, c) for l in self.prunable_layers() if self.layers[l].out >= 2
                for c in range(self.layers[l].out)]

    def check_params(self) -> None:
        expected = param_shapes(self.layers, self.input_dims)
        for idx, shapes in expected.items():
            have = self.params.get(idx)
            if have is None:
                raise ModelError(f"layer {idx} ({kind_name(self.layers[idx])}) has no parameters")
            for key, shape in shapes.items():
                if key not in have:
                    raise ModelError(f"layer {idx} is missing parameter {key!r}")
                if have[key].shape != shape:
                    raise ModelError(f"layer {idx} parameter {key!r} has shape {have[key].shape}, expected {shape}")


def validate_layers(layers: Iterable[LayerSpec], input_dims, classes: int) -> None:
    layers = list(layers)
    if not layers or not isinstance(layers[0], Conv):
        raise ModelError("the first layer must be a conv layer")
    if not isinstance(layers[-1], FC):
        raise ModelError("the last layer must be a fully connected layer")
    if layers[-1].out != classes:
        raise ModelError(f"final FC has {layers[-1].out} outputs but the model has {classes} classes")
    flat = [i for i, s in enumerate(layers) if isinstance(s, Flatten)]
    if len(flat) != 1:
        raise ModelError(f"exactly one flatten layer is required, found {len(flat)}")
    first_fc = next(i for i, s in enumerate(layers) if isinstance(s, FC))
    if flat[0] > first_fc:
        raise ModelError("flatten must precede the first FC layer")
    for i, s in enumerate(layers):
        if i > flat[0] and isinstance(s, (Conv, MaxPool)):
            raise ModelError(f"layer {i}: {kind_name(s)} cannot follow flatten")
        if isinstance(s, (Conv, FC)) and s.out < 1:
            raise ModelError(f"layer {i}: needs at least one output channel")
        if isinstance(s, Conv) and (s.k < 1 or s.stride < 1 or s.pad < 0):
            raise ModelError(f"layer {i}: invalid conv geometry {s}")
    if len(input_dims) != 3:
        raise ModelError(f"input dims must be [C, H, W], got {input_dims}")
    shape_inference(layers, input_dims)


def shape_inference(layers, input_dims) -> list[LayerShape]:
    dims = tuple(int(d) for d in input_dims)
    shapes = []
    for i, s in enumerate(layers):
        if isinstance(s, Conv):
            c, h, w = dims
            ho, wo = T.out_size(h, s.k, s.stride, s.pad), T.out_size(w, s.k, s.stride, s.pad)
            if ho < 1 or wo < 1:
                raise ModelError(f"layer {i}: conv K={s.k} does not fit a {h}x{w} map with padding {s.pad}")
            out = (s.out, ho, wo)
        elif isinstance(s, MaxPool):
            c, h, w = dims
            ho, wo = T.out_size(h, s.k, s.step, s.pad), T.out_size(w, s.k, s.step, s.pad)
            if ho < 1 or wo < 1:
                raise ModelError(f"layer {i}: pool window {s.k} larger than {h}x{w} map")
            out = (c, ho, wo)
        elif isinstance(s, Flatten):
            out = (int(np.prod(dims)),)
        elif isinstance(s, FC):
            if len(dims) != 1:
                raise ModelError(f"layer {i}: FC needs a flattened input, got {dims}")
            out = (s.out,)
        else:
            out = dims
        shapes.append(LayerShape(dims, out))
        dims = out
    return shapes


def param_shapes(layers, input_dims) -> dict[int, dict[str, tuple[int, ...]]]:
    shapes = shape_inference(layers, input_dims)
    out = {}
    for i, (s, sh) in enumerate(zip(layers, shapes)):
        if isinstance(s, Conv):
            out[i] = {"weight": (s.out, sh.in_dims[0], s.k, s.k)}
            if s.bias:
                out[i]["bias"] = (s.out,)
        elif isinstance(s, FC):
            out[i] = {"weight": (s.out, sh.in_dims[0])}
            if s.bias:
                out[i]["bias"] = (s.out,)
        elif isinstance(s, BatchNorm):
            c = sh.in_dims[0]
            out[i] = {k: (c,) for k in ("gamma", "beta", "running_mean", "running_var")}
    return out


def init_params(layers, input_dims, seed: int) -> dict[int, dict[str, np.ndarray]]:
    """He-normal weights, zero biases, identity batch norm."""
    rng = np.random.default_rng(seed)
    params = {}
    for i, shapes in param_shapes(layers, input_dims).items():
        if "gamma" in shapes:
            c = shapes["gamma"][0]
            params[i] = {
                "gamma": np.ones(c, np.float32),
                "beta": np.zeros(c, np.float32),
                "running_mean": np.zeros(c, np.float32),
                "running_var": np.ones(c, np.float32),
            }
            continue
        wshape = shapes["weight"]
        fan_in = int(np.prod(wshape[1:]))
        params[i] = {"weight": (rng.standard_normal(wshape) * np.sqrt(2.0 / fan_in)).astype(np.float32)}
        if "bias" in shapes:
            params[i]["bias"] = np.zeros(shapes["bias"], np.float32)
    return params


def build_model(name, input_dims, classes, layers, seed: int = 0) -> ModelGraph:
    layers = tuple(layers)
    validate_layers(layers, input_dims, classes)
    return ModelGraph(name, tuple(input_dims), classes, layers, init_params(layers, input_dims, seed), seed)


# ------------------------------------------------------------ description files

_TOP_FIELDS = {"name", "input", "classes", "layers", "seed"}


def layer_from_entry(i: int, entry) -> LayerSpec:
    if isinstance(entry, str):
        entry = {entry: {}}
    if not isinstance(entry, dict) or len(entry) != 1:
        raise ModelError(f"layers[{i}]: each entry must be a single 'kind: {{params}}' mapping")
    (kind, args), = entry.items()
    if kind in _BRANCH_KINDS:
        raise ModelError(f"layers[{i}]: '{kind}' implies a branching topology; only sequential chains are supported")
    if kind not in LAYER_KINDS:
        raise ModelError(f"layers[{i}]: unknown layer kind {kind!r}")
    cls = LAYER_KINDS[kind]
    args = args or {}
    if not isinstance(args, dict):
        raise ModelError(f"layers[{i}]: parameters of {kind!r} must be a mapping")
    allowed = {f.name for f in dataclasses.fields(cls)}
    unknown = set(args) - allowed
    if unknown:
        raise ModelError(f"layers[{i}]: unknown field(s) {sorted(unknown)} for {kind!r}")
    try:
        return cls(**args)
    except TypeError as exc:
        raise ModelError(f"layers[{i}]: {exc}") from None


def parse_description(text: str) -> dict:
    """Parse a model description document into its validated fields."""
    doc = yaml.safe_load(text)
    if not isinstance(doc, dict):
        raise ModelError("model description must be a mapping")
    unknown = set(doc) - _TOP_FIELDS
    if unknown:
        raise ModelError(f"unknown top-level field(s): {sorted(unknown)}")
    for key in ("input", "classes", "layers"):
        if key not in doc:
            raise ModelError(f"missing required field {key!r}")
    layers = tuple(layer_from_entry(i, e) for i, e in enumerate(doc["layers"]))
    input_dims = tuple(int(d) for d in doc["input"])
    classes = int(doc["classes"])
    validate_layers(layers, input_dims, classes)
    return {
        "name": str(doc.get("name", "model")),
        "input_dims": input_dims,
        "classes": classes,
        "layers": layers,
        "seed": int(doc.get("seed", 0)),
    }


def model_from_description(text: str, seed: int | None = None) -> ModelGraph:
    d = parse_description(text)
    return build_model(d["name"], d["input_dims"], d["classes"], d["layers"],
                       d["seed"] if seed is None else seed)


def layer_to_entry(spec: LayerSpec) -> dict:
    args = {f.name: getattr(spec, f.name) for f in dataclasses.fields(spec)
            if f.default is dataclasses.MISSING or getattr(spec, f.name) != f.default}
    return {kind_name(spec): args}


def to_description(graph: ModelGraph) -> str:
    doc = {
        "name": graph.name,
        "input": list(graph.input_dims),
        "classes": graph.classes,
        "seed": graph.seed,
        "layers": [layer_to_entry(s) for s in graph.layers],
    }
    return yaml.safe_dump(doc, sort_keys=False, default_flow_style=None)


# -------------------------------------------------------------- serialization

MAGIC = b"ARMG"


def serialize(graph: ModelGraph) -> bytes:
    header = {
        "name": graph.name,
        "input": list(graph.input_dims),
        "classes": graph.classes,
        "seed": graph.seed,
        "layers": [layer_to_entry(s) for s in graph.layers],
    }
    arrays = {f"{i}.{k}": v for i in sorted(graph.params) for k, v in sorted(graph.params[i].items())}
    return tensorfile.pack(MAGIC, header, arrays)


def deserialize(blob: bytes) -> ModelGraph:
    header, arrays = tensorfile.unpack(MAGIC, blob)
    layers = tuple(layer_from_entry(i, e) for i, e in enumerate(header["layers"]))
    params: dict[int, dict[str, np.ndarray]] = {}
    for key, arr in arrays.items():
        idx, name = key.split(".", 1)
        params.setdefault(int(idx), {})[name] = arr
    graph = ModelGraph(header["name"], tuple(header["input"]), header["classes"], layers, params, header["seed"])
    graph.check_params()
    return graph


def save_model(graph: ModelGraph, path) -> None:
    with open(path, "wb") as fh:
        fh.write(serialize(graph))


def load_model(path) -> ModelGraph:
    with open(path, "rb") as fh:
        return deserialize(fh.read())


# ------------------------------------------------------------ forward/backward


@dataclass
class LayerCache:
    """Per-layer forward intermediates, aligned with ``graph.layers``."""

    mode: str
    input: np.ndarray
    outputs: list = field(default_factory=list)
    caches: list = field(default_factory=list)
    bn_stats: dict = field(default_factory=dict)


@dataclass
class Gradients:
    params: dict[int, dict[str, np.ndarray]]
    input: np.ndarray
    outputs: list | None = None  # d loss / d (output of layer i)


def forward(graph: ModelGraph, x, mode: str = "eval"):
    """Run the network on a batch ``N x C x H x W`` (or one ``C x H x W`` image)."""
    x = np.asarray(x)
    single = x.ndim == 3
    if single:
        x = x[None]
    if tuple(x.shape[1:]) != graph.input_dims:
        raise T.ShapeError(f"input is {x.shape[1:]}, model expects {graph.input_dims}")
    cache = LayerCache(mode, x)
    h = x
    for i, s in enumerate(graph.layers):
        p = graph.params.get(i, {})
        if isinstance(s, Conv):
            h, c = T.conv2d_fwd(h, p["weight"], p.get("bias"), s.stride, s.pad)
        elif isinstance(s, BatchNorm):
            h, c, stats = T.batchnorm_fwd(h, p["gamma"], p["beta"], p["running_mean"], p["running_var"],
                                          mode, s.momentum, s.eps)
            if mode == "train":
                cache.bn_stats[i] = stats
        elif isinstance(s, ReLU):
            h, c = T.relu_fwd(h)
        elif isinstance(s, MaxPool):
            h, c = T.maxpool_fwd(h, s.k, s.step, s.pad)
        elif isinstance(s, Flatten):
            c = h.shape
            h = h.reshape(h.shape[0], -1)
        elif isinstance(s, FC):
            h, c = T.fc_fwd(h, p["weight"], p.get("bias"))
        else:  # pragma: no cover
            raise ModelError(f"unsupported layer {s!r}")
        cache.outputs.append(h)
        cache.caches.append(c)
    return (h[0] if single else h), cache


def backward(graph: ModelGraph, cache: LayerCache, grad_logits, keep_outputs: bool = False) -> Gradients:
    g = np.asarray(grad_logits)
    if g.ndim == 1:
        g = g[None]
    grads: dict[int, dict[str, np.ndarray]] = {}
    outs = [None] * len(graph.layers) if keep_outputs else None
    for i in range(len(graph.layers) - 1, -1, -1):
        if keep_outputs:
            outs[i] = g
        s, c = graph.layers[i], cache.caches[i]
        if isinstance(s, Conv):
            g, gw, gb = T.conv2d_bwd(c, g)
            grads[i] = {"weight": gw}
            if s.bias:
                grads[i]["bias"] = gb
        elif isinstance(s, BatchNorm):
            g, gg, gbeta = T.batchnorm_bwd(c, g)
            grads[i] = {"gamma": gg, "beta": gbeta}
        elif isinstance(s, ReLU):
            g = T.relu_bwd(c, g)
        elif isinstance(s, MaxPool):
            g = T.maxpool_bwd(c, g)
        elif isinstance(s, Flatten):
            g = g.reshape(c)
        elif isinstance(s, FC):
            g, gw, gb = T.fc_bwd(c, g)
            grads[i] = {"weight": gw}
            if s.bias:
                grads[i]["bias"] = gb
    return Gradients(grads, g, outs)


def predict(graph: ModelGraph, x, batch_size: int = 256) -> np.ndarray:
    x = np.asarray(x)
    preds = [forward(graph, x[i:i + batch_size])[0].argmax(axis=1) for i in range(0, len(x), batch_size)]
    return np.concatenate(preds) if preds else np.zeros(0, dtype=np.int64)


# -------------------------------------------------------------------- pruning


def _next_consumer(layers, start: int) -> int:
    for j in range(start + 1, len(layers)):
        if isinstance(layers[j], (Conv, FC)):
            return j
    raise PruneError(f"layer {start} has no downstream consumer")


def prune_layers(graph: ModelGraph, layer: int) -> tuple[LayerSpec, ...]:
    """The layer list after removing one channel of ``layer`` (dimensions only)."""
    _check_prunable(graph, ChannelId(layer, 0))
    layers = list(graph.layers)
    layers[layer] = dataclasses.replace(layers[layer], out=layers[layer].out - 1)
    return tuple(layers)


def _check_prunable(graph: ModelGraph, cid: ChannelId) -> None:
    l, c = cid
    if not 0 <= l < len(graph.layers):
        raise PruneError(f"layer index {l} out of range")
    spec = graph.layers[l]
    if not isinstance(spec, (Conv, FC)):
        raise PruneError(f"layer {l} is {kind_name(spec)}; only conv and FC channels can be pruned")
    if l == graph.final_fc:
        raise PruneError("the final classifier layer cannot be pruned")
    if spec.out < 2:
        raise PruneError(f"layer {l} has a single channel left")
    if not 0 <= c < spec.out:
        raise PruneError(f"channel {c} out of range for layer {l} with {spec.out} channels")


def prune_channel(graph: ModelGraph, cid) -> ModelGraph:
    """Remove output channel ``cid.channel`` of layer ``cid.layer`` and the
    matching input slice of the next conv/FC layer."""
    cid = ChannelId(*cid)
    _check_prunable(graph, cid)
    l, c = cid
    shapes = graph.shapes
    params = {i: dict(p) for i, p in graph.params.items()}
    params[l] = {k: np.delete(v, c, axis=0) for k, v in params[l].items()}
    spatial = 1
    j = l + 1
    while True:
        s = graph.layers[j]
        if isinstance(s, BatchNorm):
            params[j] = {k: np.delete(v, c, axis=0) for k, v in params[j].items()}
        elif isinstance(s, Flatten):
            _, h, w = shapes[j].in_dims
            spatial = h * w
        elif isinstance(s, Conv):
            params[j] = dict(params[j], weight=np.delete(params[j]["weight"], c, axis=1))
            break
        elif isinstance(s, FC):
            cols = np.arange(c * spatial, (c + 1) * spatial)
            params[j] = dict(params[j], weight=np.delete(params[j]["weight"], cols, axis=1))
            break
        j += 1
    layers = prune_layers(graph, l)
    return ModelGraph(graph.name, graph.input_dims, graph.classes, layers, params, graph.seed)


# ----------------------------------------------------------------------- MACs


@dataclass(frozen=True)
class MacCount:
    per_layer: dict[int, int]
    total: int


def count_macs(layers, input_dims) -> MacCount:
    if isinstance(layers, ModelGraph):
        layers = layers.layers
    per = {}
    for i, (s, sh) in enumerate(zip(layers, shape_inference(layers, input_dims))):
        if isinstance(s, Conv):
            c_out, ho, wo = sh.out_dims
            per[i] = sh.in_dims[0] * c_out * s.k * s.k * ho * wo
        elif isinstance(s, FC):
            per[i] = sh.in_dims[0] * s.out
    return MacCount(per, sum(per.values()))
