"""Nested MIL network: MLP feature extractor, gated-attention MI blocks, classifier.

Levels are numbered from the inside out. The level-1 block pools instances
into innermost-bag embeddings, the level-2 block pools those into the bags
that contain them, and the level-J block produces the single bag-of-bags
embedding that the classifier sees. J = 1 is ordinary (flat) MIL.

Bags are handed to :func:`forward` as a :class:`BagLayout`: all instances of
the sample stacked in depth-first order, plus the member counts of every bag
at every level. Members of one bag are always contiguous, so each level is a
single segmented softmax and a single segmented reduction.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import gradcore as gc
from .exceptions import (
    ContractError,
    DegenerateInputError,
    DimensionError,
    FormatError,
    StructureError,
)
from .gradcore import Tensor

AGGREGATORS = ("mean", "max", "sum")


@dataclass(frozen=True)
class ModelDims:
    input_dim: int
    hidden_dims: tuple = (128,)
    embed_dim: int = 64
    attention_dim: int = 64
    levels: int = 2

    def __post_init__(self):
        dims = (self.input_dim, *self.hidden_dims, self.embed_dim, self.attention_dim, self.levels)
        if any(int(d) < 1 for d in dims):
            raise ContractError(f"all model dimensions must be positive, got {self}")
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))


@dataclass
class FeatureExtractorParams:
    """Dense layers with ReLU between them (none after the last)."""

    weights: list
    biases: list

    @property
    def input_dim(self):
        return self.weights[0].shape[0]

    @property
    def output_dim(self):
        return self.weights[-1].shape[1]

    def tensors(self):
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out


@dataclass
class GatedAttentionParams:
    """``w`` is H x 1, ``V`` and ``U`` are H x M."""

    w: Tensor
    V: Tensor
    U: Tensor

    def __post_init__(self):
        if self.V.shape != self.U.shape:
            raise DimensionError(f"V {self.V.shape} and U {self.U.shape} must match")
        if self.w.shape != (self.V.shape[0], 1):
            raise DimensionError(f"w must be {(self.V.shape[0], 1)}, got {self.w.shape}")

    def tensors(self):
        return [self.w, self.V, self.U]


@dataclass(frozen=True)
class MiBlockConfig:
    aggregator: str = "sum"
    attention_enabled: bool = True
    level: int = 1

    def __post_init__(self):
        if self.aggregator not in AGGREGATORS:
            raise ContractError(f"aggregator must be one of {AGGREGATORS}, got {self.aggregator!r}")
        if self.level < 1:
            raise ContractError(f"level index must be >= 1, got {self.level}")


@dataclass
class ClassifierParams:
    weight: Tensor  # M x 1
    bias: Tensor  # (1,)

    def tensors(self):
        return [self.weight, self.bias]


@dataclass
class NmilModel:
    extractor: FeatureExtractorParams
    blocks: list  # [(GatedAttentionParams, MiBlockConfig)], level 1 first
    classifier: ClassifierParams

    def __post_init__(self):
        if not self.blocks:
            raise StructureError("a model needs at least one MI block")
        m = self.extractor.output_dim
        for j, (att, cfg) in enumerate(self.blocks, start=1):
            if att.V.shape[1] != m:
                raise DimensionError(f"block {j} expects embeddings of size {att.V.shape[1]}, extractor gives {m}")
            if cfg.level != j:
                raise StructureError(f"block {j} is configured as level {cfg.level}")
        if self.classifier.weight.shape != (m, 1):
            raise DimensionError(f"classifier weight must be {(m, 1)}, got {self.classifier.weight.shape}")

    @property
    def levels(self):
        return len(self.blocks)

    @property
    def input_dim(self):
        return self.extractor.input_dim

    @property
    def embed_dim(self):
        return self.extractor.output_dim

    @property
    def aggregator(self):
        return self.blocks[0][1].aggregator

    @property
    def attention_enabled(self):
        return self.blocks[0][1].attention_enabled

    @property
    def dims(self):
        hidden = tuple(w.shape[1] for w in self.extractor.weights[:-1])
        return ModelDims(
            self.input_dim, hidden, self.embed_dim, self.blocks[0][0].V.shape[0], self.levels
        )

    def parameters(self):
        params = self.extractor.tensors()
        for att, _ in self.blocks:
            params += att.tensors()
        params += self.classifier.tensors()
        return params

    def named_parameters(self):
        names = []
        for i in range(len(self.extractor.weights)):
            names += [f"extractor.{i}.weight", f"extractor.{i}.bias"]
        for j in range(1, self.levels + 1):
            names += [f"block.{j}.w", f"block.{j}.V", f"block.{j}.U"]
        names += ["classifier.weight", "classifier.bias"]
        return list(zip(names, self.parameters()))

    def get_state(self):
        return [p.values.copy() for p in self.parameters()]

    def set_state(self, state):
        params = self.parameters()
        if len(state) != len(params):
            raise StructureError(f"state has {len(state)} arrays, model has {len(params)}")
        for p, v in zip(params, state):
            if p.shape != np.shape(v):
                raise DimensionError(f"cannot load {np.shape(v)} into {p.shape}")
            p.values[...] = v

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()


@dataclass
class BagLayout:
    """Depth-first stacking of one nested sample.

    ``sizes[0]`` holds the instance counts of the innermost bags, ``sizes[j]``
    the member counts of the level-(j+1) bags; ``sizes[-1]`` is always a
    single entry, the root.
    """

    instances: np.ndarray
    sizes: list = field(default_factory=list)

    @property
    def levels(self):
        return len(self.sizes)

    @classmethod
    def from_nested(cls, bag):
        """Build from nested lists whose leaves are (n, D) arrays of instances."""
        rows, sizes = [], []

        def depth(node):
            if isinstance(node, np.ndarray):
                return 1
            if not isinstance(node, (list, tuple)) or len(node) == 0:
                raise DegenerateInputError("every bag needs at least one member")
            return 1 + depth(node[0])

        levels = depth(bag)
        sizes = [[] for _ in range(levels)]

        def walk(node, level):
            if level == 1:
                arr = np.asarray(node, dtype=np.float64)
                if arr.ndim != 2:
                    raise StructureError(f"innermost bag must be a 2-D array, got shape {arr.shape}")
                if arr.shape[0] == 0:
                    raise DegenerateInputError("innermost bag has no instances")
                rows.append(arr)
                sizes[0].append(arr.shape[0])
                return
            if isinstance(node, np.ndarray) or not isinstance(node, (list, tuple)):
                raise StructureError("bag tree leaves are not all at the same depth")
            if len(node) == 0:
                raise DegenerateInputError(f"empty bag at level {level}")
            for child in node:
                walk(child, level - 1)
            sizes[level - 1].append(len(node))

        walk(bag, levels)
        dims = {r.shape[1] for r in rows}
        if len(dims) != 1:
            raise DimensionError(f"instances have mixed dimensions {sorted(dims)}")
        return cls(np.vstack(rows), [np.asarray(s, dtype=np.intp) for s in sizes])

    def validate(self, levels=None, input_dim=None):
        if levels is not None and self.levels != levels:
            raise StructureError(f"sample has depth {self.levels}, model expects {levels}")
        if input_dim is not None and self.instances.shape[1] != input_dim:
            raise DimensionError(f"instances have dimension {self.instances.shape[1]}, model expects {input_dim}")
        expected = self.instances.shape[0]
        for j, s in enumerate(self.sizes, start=1):
            if s.size == 0 or np.any(s < 1):
                raise DegenerateInputError(f"empty bag at level {j}")
            if s.sum() != expected:
                raise StructureError(f"level {j} sizes sum to {s.sum()}, expected {expected}")
            expected = s.size
        if expected != 1:
            raise StructureError(f"outermost level has {expected} bags, expected one root")
        return self

    def flatten(self):
        """The same instances as a single flat bag (J = 1)."""
        return BagLayout(self.instances, [np.array([self.instances.shape[0]], dtype=np.intp)])


@dataclass
class AttentionTree:
    """Per-level attention weights, each level a list of per-bag vectors.

    ``levels[0]`` holds one vector per innermost bag (weights over its
    instances), in depth-first order; ``levels[-1]`` has a single vector, the
    weights over the root's members. Without attention the recorded weights
    are the uniform 1/n that plain pooling implies.
    """

    levels: list

    def nested(self):
        """Weights rearranged into the bag tree, e.g. ``[[w, w], [w]]`` for J=2."""
        current = [list(map(float, v)) for v in self.levels[0]]
        for level in self.levels[1:]:
            grouped, i = [], 0
            for v in level:
                grouped.append({"weights": list(map(float, v)), "members": current[i : i + len(v)]})
                i += len(v)
            current = grouped
        return current[0]

    def shape(self):
        return [[len(v) for v in level] for level in self.levels]


# ------------------------------------------------------------------------ init


def _glorot(rng, fan_in, fan_out, shape):
    a = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=shape)


def init_params(dims: ModelDims, seed=0, aggregator="sum", attention=True) -> NmilModel:
    """Glorot-uniform weights, zero biases, fully determined by ``seed``."""
    rng = np.random.default_rng(seed)
    widths = [dims.input_dim, *dims.hidden_dims, dims.embed_dim]
    weights, biases = [], []
    for i, (fi, fo) in enumerate(zip(widths[:-1], widths[1:])):
        weights.append(Tensor(_glorot(rng, fi, fo, (fi, fo)), requires_grad=True, name=f"extractor.{i}.weight"))
        biases.append(Tensor(np.zeros(fo), requires_grad=True, name=f"extractor.{i}.bias"))
    m, h = dims.embed_dim, dims.attention_dim
    blocks = []
    for j in range(1, dims.levels + 1):
        att = GatedAttentionParams(
            w=Tensor(_glorot(rng, h, 1, (h, 1)), requires_grad=True, name=f"block.{j}.w"),
            V=Tensor(_glorot(rng, m, h, (h, m)), requires_grad=True, name=f"block.{j}.V"),
            U=Tensor(_glorot(rng, m, h, (h, m)), requires_grad=True, name=f"block.{j}.U"),
        )
        blocks.append((att, MiBlockConfig(aggregator, attention, j)))
    clf = ClassifierParams(
        Tensor(_glorot(rng, m, 1, (m, 1)), requires_grad=True, name="classifier.weight"),
        Tensor(np.zeros(1), requires_grad=True, name="classifier.bias"),
    )
    return NmilModel(FeatureExtractorParams(weights, biases), blocks, clf)


# --------------------------------------------------------------------- forward


def _as_matrix(x):
    return x if isinstance(x, Tensor) else Tensor(np.atleast_2d(np.asarray(x, dtype=np.float64)))


def embed_instance(extractor: FeatureExtractorParams, x) -> Tensor:
    """Embed one instance vector, or every row of an instance matrix."""
    single = not isinstance(x, Tensor) and np.ndim(x) == 1
    h = _as_matrix(x)
    if h.shape[1] != extractor.input_dim:
        raise DimensionError(f"instance has dimension {h.shape[1]}, extractor expects {extractor.input_dim}")
    last = len(extractor.weights) - 1
    for i, (w, b) in enumerate(zip(extractor.weights, extractor.biases)):
        h = gc.add_bias(gc.matmul(h, w), b)
        if i < last:
            h = gc.relu(h)
    return gc.reshape(h, (h.shape[1],)) if single else h


def attention_logits(embeddings: Tensor, params: GatedAttentionParams) -> Tensor:
    """``w^T (tanh(V x) * sigm(U x))`` for every row x."""
    gate = gc.hadamard(
        gc.tanh(gc.matmul(embeddings, gc.transpose(params.V))),
        gc.sigmoid(gc.matmul(embeddings, gc.transpose(params.U))),
    )
    return gc.reshape(gc.matmul(gate, params.w), (embeddings.shape[0],))


def attention_scores(embeddings, params: GatedAttentionParams, sizes=None) -> Tensor:
    """Gated attention weights, normalised within each bag."""
    e = _as_matrix(embeddings)
    if e.shape[0] == 0:
        raise DegenerateInputError("attention over an empty bag")
    sizes = [e.shape[0]] if sizes is None else sizes
    return gc.segment_softmax(attention_logits(e, params), sizes)


def aggregate(embeddings, weights, aggregator="sum", sizes=None, attention_enabled=True) -> Tensor:
    """Pool attention-scaled member embeddings into one row per bag.

    With ``attention_enabled=False`` the weights are ignored and the members
    are pooled as they are.
    """
    e = _as_matrix(embeddings)
    if e.shape[0] == 0:
        raise DegenerateInputError("aggregate over an empty bag")
    if aggregator not in AGGREGATORS:
        raise ContractError(f"aggregator must be one of {AGGREGATORS}, got {aggregator!r}")
    sizes = [e.shape[0]] if sizes is None else sizes
    if attention_enabled:
        w = weights if isinstance(weights, Tensor) else Tensor(np.asarray(weights, dtype=np.float64))
        if w.shape != (e.shape[0],):
            raise DimensionError(f"{w.shape[0]} weights for {e.shape[0]} embeddings")
        e = gc.scale_rows(e, w)
    return gc.segment_reduce(aggregator, e, sizes)


def _uniform_weights(sizes):
    sizes = np.asarray(sizes)
    return Tensor(np.repeat(1.0 / sizes, sizes))


def mi_block(members, params: GatedAttentionParams, config: MiBlockConfig, sizes=None):
    """One multiple-instance block: returns (bag embeddings, member weights)."""
    e = _as_matrix(members)
    if e.shape[0] == 0:
        raise DegenerateInputError("MI block over an empty bag")
    sizes = [e.shape[0]] if sizes is None else sizes
    if config.attention_enabled:
        a = attention_scores(e, params, sizes)
    else:
        a = _uniform_weights(sizes)
    z = aggregate(e, a, config.aggregator, sizes, config.attention_enabled)
    return z, a


def classify(classifier: ClassifierParams, z: Tensor) -> Tensor:
    return gc.sigmoid(gc.add_bias(gc.matmul(z, classifier.weight), classifier.bias))


def forward_tensor(model: NmilModel, layout: BagLayout):
    """Differentiable forward pass; returns (probability tensor of shape (1,), per-level weights)."""
    layout.validate(model.levels, model.input_dim)
    h = embed_instance(model.extractor, Tensor(layout.instances))
    weights = []
    for (att, cfg), sizes in zip(model.blocks, layout.sizes):
        h, a = mi_block(h, att, cfg, sizes)
        weights.append((a.values, sizes))
    p = gc.reshape(classify(model.classifier, h), (1,))
    return p, weights


def _split(values, sizes):
    return np.split(values.copy(), np.cumsum(sizes)[:-1])


def forward(model: NmilModel, sample):
    """Predicted probability and the attention tree for one sample.

    ``sample`` may be a :class:`BagLayout`, nested lists of instance arrays,
    or anything with a ``layout()`` method.
    """
    layout = as_layout(sample)
    p, weights = forward_tensor(model, layout)
    tree = AttentionTree([_split(a, s) for a, s in weights])
    return p.item(), tree


def bag_embedding(model: NmilModel, sample) -> np.ndarray:
    """The bag-of-bags embedding fed to the classifier."""
    layout = as_layout(sample)
    layout.validate(model.levels, model.input_dim)
    h = embed_instance(model.extractor, Tensor(layout.instances))
    for (att, cfg), sizes in zip(model.blocks, layout.sizes):
        h, _ = mi_block(h, att, cfg, sizes)
    return h.values[0].copy()


def as_layout(sample) -> BagLayout:
    if isinstance(sample, BagLayout):
        return sample
    if hasattr(sample, "layout"):
        return sample.layout()
    return BagLayout.from_nested(sample)


# --------------------------------------------------------------- serialization

MAGIC = b"NMILMDL\x00"
FORMAT_VERSION = 1


def save_model(model: NmilModel, path) -> None:
    """Write the model as magic, header length, JSON header, float64 payload.

    Layout (all integers little-endian)::

        bytes 0-7    b"NMILMDL\\0"
        bytes 8-11   uint32 format version
        bytes 12-19  uint64 header length N
        next N bytes UTF-8 JSON header: dims, config, parameter table
        remainder    parameters as little-endian float64, row-major, in
                     header order; each entry's "offset" is relative to the
                     start of the payload
    """
    arrays, table, offset = [], [], 0
    for name, p in model.named_parameters():
        data = np.ascontiguousarray(p.values, dtype="<f8")
        table.append({"name": name, "shape": list(p.shape), "offset": offset})
        offset += data.nbytes
        arrays.append(data.tobytes())
    dims = model.dims
    header = {
        "format": "nmil-model",
        "version": FORMAT_VERSION,
        "dims": {
            "input_dim": dims.input_dim,
            "hidden_dims": list(dims.hidden_dims),
            "embed_dim": dims.embed_dim,
            "attention_dim": dims.attention_dim,
            "levels": dims.levels,
        },
        "config": {"aggregator": model.aggregator, "attention": model.attention_enabled},
        "parameters": table,
        "payload_bytes": offset,
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<IQ", FORMAT_VERSION, len(blob)))
        f.write(blob)
        for a in arrays:
            f.write(a)


def load_model(path) -> NmilModel:
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise FormatError("not an nmil model file", offset=0)
    if len(raw) < 20:
        raise FormatError("truncated model header", offset=len(raw))
    version, n = struct.unpack_from("<IQ", raw, 8)
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported model format version {version}", offset=8)
    try:
        header = json.loads(raw[20 : 20 + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"corrupt model header: {exc}", offset=20) from None
    payload = raw[20 + n :]
    if len(payload) != header["payload_bytes"]:
        raise FormatError(
            f"payload has {len(payload)} bytes, header declares {header['payload_bytes']}",
            offset=20 + n,
        )
    d = header["dims"]
    dims = ModelDims(d["input_dim"], tuple(d["hidden_dims"]), d["embed_dim"], d["attention_dim"], d["levels"])
    cfg = header["config"]
    model = init_params(dims, seed=0, aggregator=cfg["aggregator"], attention=cfg["attention"])
    lookup = dict(model.named_parameters())
    for entry in header["parameters"]:
        p = lookup[entry["name"]]
        count = int(np.prod(entry["shape"]))
        values = np.frombuffer(payload, dtype="<f8", count=count, offset=entry["offset"])
        p.values[...] = values.reshape(entry["shape"])
    return model
