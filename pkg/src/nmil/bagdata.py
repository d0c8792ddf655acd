"""Nested bag datasets: instance pools, label oracles and the experiment generators.

An :class:`InstancePool` holds feature vectors and their (hidden) digit
labels. Samples reference pool rows by index, so a dataset manifest only has
to store index trees, labels and the recipe for rebuilding the pool.

Three constructions are supported, all with digit 9 as the default positive
class:

``exp1``
    A bag is positive iff it contains a positive instance. J=2 samples group
    the instances into random inner bags, which carry no information.
``exp2``
    An inner bag is positive iff it holds more than one positive instance;
    the sample is positive iff some inner bag is. Negatives always contain
    two or three positives spread over different inner bags, and positives
    draw their total positive count from the same distribution, so the flat
    multiset of digits says nothing about the label.
``exp3``
    Three levels. Innermost bags are all-even (0), all-odd (1) or mixed (2);
    a middle bag is 0 if it holds an all-even bag and no all-odd bag, 1 if
    the reverse, 2 otherwise; the sample is positive iff some middle bag is 1.
"""

from __future__ import annotations

import gzip
import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .exceptions import (
    ContractError,
    DegenerateInputError,
    FormatError,
    GenerationError,
    StructureError,
)
from .model import BagLayout

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801

EXPERIMENTS = ("exp1", "exp2", "exp3")
EVEN = (0, 2, 4, 6, 8)
ODD = (1, 3, 5, 7, 9)

MANIFEST_FORMAT = "nmil-manifest"
MANIFEST_VERSION = 1


@dataclass(frozen=True)
class Instance:
    features: np.ndarray
    latent_label: int


@dataclass
class InstancePool:
    features: np.ndarray  # (n, D) in [0, 1]
    labels: np.ndarray  # (n,) integer classes
    source: dict = field(default_factory=dict)

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2 or self.features.shape[0] != self.labels.shape[0]:
            raise StructureError(
                f"pool features {self.features.shape} do not match labels {self.labels.shape}"
            )

    def __len__(self):
        return self.labels.shape[0]

    def __getitem__(self, i):
        return Instance(self.features[i], int(self.labels[i]))

    @property
    def dim(self):
        return self.features.shape[1]

    def by_class(self):
        return {int(c): np.flatnonzero(self.labels == c) for c in np.unique(self.labels)}

    def checksum(self):
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.features, dtype="<f8").tobytes())
        h.update(np.ascontiguousarray(self.labels, dtype="<i8").tobytes())
        return h.hexdigest()


# ------------------------------------------------------------------------- IDX


def _read_maybe_gzip(path):
    path = Path(path)
    raw = path.read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def _idx_header(raw, magic, ndim, what):
    need = 4 + 4 * ndim
    if len(raw) < need:
        raise FormatError(f"{what}: header truncated, need {need} bytes", offset=len(raw))
    (found,) = struct.unpack_from(">I", raw, 0)
    if found != magic:
        raise FormatError(f"{what}: bad magic 0x{found:08x}, expected 0x{magic:08x}", offset=0)
    return struct.unpack_from(f">{ndim}I", raw, 4), need


def read_idx_images(path):
    raw = _read_maybe_gzip(path)
    (count, rows, cols), start = _idx_header(raw, IMAGE_MAGIC, 3, "image file")
    end = start + count * rows * cols
    if len(raw) < end:
        raise FormatError(f"image file: {count} images need {end} bytes, file has {len(raw)}", offset=len(raw))
    return np.frombuffer(raw, dtype=np.uint8, count=count * rows * cols, offset=start).reshape(count, rows, cols)


def read_idx_labels(path):
    raw = _read_maybe_gzip(path)
    (count,), start = _idx_header(raw, LABEL_MAGIC, 1, "label file")
    if len(raw) < start + count:
        raise FormatError(f"label file: {count} labels need {start + count} bytes", offset=len(raw))
    return np.frombuffer(raw, dtype=np.uint8, count=count, offset=start).copy()


def load_idx(images_path, labels_path) -> InstancePool:
    """Read an IDX image/label pair (optionally gzipped) into a pool scaled to [0, 1]."""
    images = read_idx_images(images_path)
    labels = read_idx_labels(labels_path)
    if images.shape[0] != labels.shape[0]:
        raise FormatError(
            f"{images.shape[0]} images but {labels.shape[0]} labels", offset=4
        )
    feats = images.reshape(images.shape[0], -1).astype(np.float64) / 255.0
    source = {"kind": "idx", "images": str(images_path), "labels": str(labels_path)}
    return InstancePool(feats, labels.astype(np.int64), source)


def write_idx(images, labels, images_path, labels_path, compress=None):
    """Write uint8 images (n, rows, cols) and labels (n,) as IDX files."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    if images.ndim != 3 or images.shape[0] != labels.shape[0]:
        raise StructureError(f"cannot write images {images.shape} with labels {labels.shape}")
    img = struct.pack(">4I", IMAGE_MAGIC, *images.shape) + images.tobytes()
    lab = struct.pack(">2I", LABEL_MAGIC, labels.shape[0]) + labels.tobytes()
    for path, blob in ((images_path, img), (labels_path, lab)):
        gz = compress if compress is not None else str(path).endswith(".gz")
        # mtime=0 keeps gzip output byte-stable
        Path(path).write_bytes(gzip.compress(blob, mtime=0) if gz else blob)


MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


def load_mnist_dir(data_dir, split="train") -> InstancePool:
    """Load the standard MNIST file pair for ``split`` from a directory (plain or .gz)."""
    data_dir = Path(data_dir)
    names = MNIST_FILES[split]
    paths = []
    for name in names:
        for candidate in (data_dir / name, data_dir / f"{name}.gz"):
            if candidate.exists():
                paths.append(candidate)
                break
        else:
            raise FileNotFoundError(f"{name}[.gz] not found in {data_dir}")
    return load_idx(*paths)


# ------------------------------------------------------------------- synthetic


def synth_pool(n_per_class, classes=tuple(range(10)), seed=0, dim=32, spread=0.06, means_seed=None) -> InstancePool:
    """Gaussian blobs, one per class, clipped to [0, 1].

    Class means sit near random corners of [0.2, 0.8]^dim, far apart relative
    to ``spread``. They come from ``means_seed`` (default ``seed``), so train
    and test pools drawn with different ``seed`` can share one set of classes.
    """
    if n_per_class < 1:
        raise ContractError(f"n_per_class must be >= 1, got {n_per_class}")
    classes = [int(c) for c in classes]
    means_seed = seed if means_seed is None else means_seed
    mrng = np.random.default_rng(means_seed)
    means = mrng.choice([0.2, 0.8], size=(len(classes), dim)) + mrng.uniform(-0.05, 0.05, (len(classes), dim))
    rng = np.random.default_rng([seed, means_seed])
    feats, labels = [], []
    for mean, c in zip(means, classes):
        feats.append(np.clip(mean + spread * rng.standard_normal((n_per_class, dim)), 0.0, 1.0))
        labels.append(np.full(n_per_class, c))
    source = {
        "kind": "synthetic",
        "n_per_class": int(n_per_class),
        "classes": classes,
        "seed": int(seed),
        "dim": int(dim),
        "spread": float(spread),
        "means_seed": int(means_seed),
    }
    return InstancePool(np.vstack(feats), np.concatenate(labels), source)


def pool_from_source(source: dict) -> InstancePool:
    """Rebuild a pool from the recipe stored in a manifest."""
    kind = source.get("kind")
    if kind == "synthetic":
        return synth_pool(
            source["n_per_class"], source["classes"], source["seed"], source["dim"], source["spread"], source["means_seed"]
        )
    if kind == "idx":
        return load_idx(source["images"], source["labels"])
    raise FormatError(f"unknown pool source {kind!r}")


# --------------------------------------------------------------------- oracles


def _nonempty(bag, what="bag"):
    if len(bag) == 0:
        raise DegenerateInputError(f"empty {what}")


def oracle_exp1(labels: Sequence[int], positive=9) -> int:
    """Standard MIL assumption: positive iff any instance is positive."""
    _nonempty(labels)
    return int(max(int(y) == positive for y in labels))


def oracle_exp2(bags: Sequence[Sequence[int]], positive=9):
    """(y, inner labels): an inner bag is positive iff it has more than one positive."""
    _nonempty(bags, "outer bag")
    inner = []
    for bag in bags:
        _nonempty(bag, "inner bag")
        inner.append(int(sum(int(y) == positive for y in bag) > 1))
    return int(any(v == 1 for v in inner)), inner


def parity_label(bag: Sequence[int]) -> int:
    """0 if all digits even, 1 if all odd, 2 if mixed."""
    _nonempty(bag, "innermost bag")
    odd = [int(y) % 2 for y in bag]
    if not any(odd):
        return 0
    if all(odd):
        return 1
    return 2


def region_label(inner: Sequence[int]) -> int:
    """0 if some member is 0 and none is 1, 1 if the reverse, else 2."""
    _nonempty(inner, "middle bag")
    has0, has1 = 0 in inner, 1 in inner
    if has0 and not has1:
        return 0
    if has1 and not has0:
        return 1
    return 2


def oracle_exp3(tree):
    """(y, y2 per innermost bag grouped by middle bag, y3 per middle bag)."""
    _nonempty(tree, "outer bag")
    y2, y3 = [], []
    for middle in tree:
        if not isinstance(middle, (list, tuple)) or not middle:
            raise StructureError("exp3 needs three levels of non-empty bags")
        labels = []
        for inner in middle:
            if not isinstance(inner, (list, tuple)) or any(isinstance(v, (list, tuple)) for v in inner):
                raise StructureError("exp3 innermost bags must be flat digit lists")
            labels.append(parity_label(inner))
        y2.append(labels)
        y3.append(region_label(labels))
    return int(any(v == 1 for v in y3)), y2, y3


# ------------------------------------------------------------------ structures


@dataclass
class BagNode:
    """A bag at ``level`` (1 = innermost). Exactly one of members/instances is set."""

    level: int
    members: Optional[list] = None
    instances: Optional[list] = None  # pool row indices
    latent_label: Optional[int] = None

    def __post_init__(self):
        if (self.members is None) == (self.instances is None):
            raise StructureError("a bag holds either member bags or instances")
        if self.level == 1 and self.instances is None:
            raise StructureError("level-1 bags hold instances")
        if self.level > 1 and self.members is None:
            raise StructureError(f"level-{self.level} bags hold member bags")
        items = self.members if self.members is not None else self.instances
        if not items:
            raise DegenerateInputError(f"empty bag at level {self.level}")
        if self.members is not None and any(m.level != self.level - 1 for m in self.members):
            raise StructureError("member bags must sit exactly one level below their parent")

    def index_tree(self):
        if self.instances is not None:
            return [int(i) for i in self.instances]
        return [m.index_tree() for m in self.members]

    def innermost(self):
        if self.instances is not None:
            return [self]
        return [b for m in self.members for b in m.innermost()]

    def bags_at(self, level):
        if self.level == level:
            return [self]
        if self.members is None:
            return []
        return [b for m in self.members for b in m.bags_at(level)]


@dataclass
class NestedSample:
    root: BagNode
    weak_label: int
    pool: InstancePool = field(repr=False)
    sample_id: int = 0

    @property
    def levels(self):
        return self.root.level

    def digit_tree(self):
        def walk(node):
            if node.instances is not None:
                return [int(self.pool.labels[i]) for i in node.instances]
            return [walk(m) for m in node.members]

        return walk(self.root)

    def features_tree(self):
        """Nested lists of (n, D) arrays; what a model is allowed to see."""

        def walk(node):
            if node.instances is not None:
                return self.pool.features[node.instances]
            return [walk(m) for m in node.members]

        return walk(self.root)

    def layout(self) -> BagLayout:
        cached = getattr(self, "_layout", None)
        if cached is None:
            rows = [i for b in self.root.innermost() for i in b.instances]
            sizes = [np.array([len(b.instances) for b in self.root.bags_at(1)], dtype=np.intp)]
            for j in range(2, self.levels + 1):
                sizes.append(np.array([len(b.members) for b in self.root.bags_at(j)], dtype=np.intp))
            cached = BagLayout(self.pool.features[rows], sizes)
            object.__setattr__(self, "_layout", cached)
        return cached

    def flatten(self) -> "NestedSample":
        """The same instances as one flat bag (ordinary MIL view)."""
        rows = [i for b in self.root.innermost() for i in b.instances]
        root = BagNode(1, instances=rows, latent_label=self.weak_label)
        return NestedSample(root, self.weak_label, self.pool, self.sample_id)

    def latent_tree(self):
        """Bag labels and instance digits mirroring the bag tree."""

        def walk(node):
            if node.instances is not None:
                return {"y": node.latent_label, "digits": [int(self.pool.labels[i]) for i in node.instances]}
            return {"y": node.latent_label, "members": [walk(m) for m in node.members]}

        return walk(self.root)


@dataclass
class DatasetSpec:
    levels: int = 2
    fanout: tuple = ((4, 8), (3, 6))  # (min, max) per level, level 1 first
    positive_class: int = 9
    positive_fraction: float = 0.5
    n_samples: int = 200
    seed: int = 0

    def __post_init__(self):
        self.fanout = tuple((int(lo), int(hi)) for lo, hi in self.fanout)
        if len(self.fanout) != self.levels:
            raise ContractError(f"{self.levels} levels need {self.levels} fan-out ranges, got {len(self.fanout)}")
        for lo, hi in self.fanout:
            if lo < 1 or hi < lo:
                raise ContractError(f"bad fan-out range ({lo}, {hi})")
        if not 0.0 < self.positive_fraction < 1.0:
            raise ContractError(f"positive fraction must lie in (0, 1), got {self.positive_fraction}")
        if self.n_samples < 1:
            raise ContractError("n_samples must be >= 1")

    @classmethod
    def default(cls, experiment, levels=None, **overrides):
        if experiment == "exp3":
            levels = 3 if levels is None else levels
            fanout = ((2, 5), (2, 4), (2, 4))
        else:
            levels = 2 if levels is None else levels
            fanout = ((4, 8), (3, 6))
        spec = dict(levels=levels, fanout=fanout[:levels])
        spec.update(overrides)
        return cls(**spec)

    def to_dict(self):
        d = asdict(self)
        d["fanout"] = [list(f) for f in self.fanout]
        return d


# ------------------------------------------------------------------ generation

MAX_RETRIES = 1000
# inclusive range of positives in an exp2 sample, for both classes
EXP2_POSITIVES = (2, 3)


class _Sampler:
    def __init__(self, pool, positive, rng):
        self.rng = rng
        self.pool = pool
        by_class = pool.by_class()
        self.by_class = by_class
        self.positive = positive
        if positive not in by_class:
            raise GenerationError(f"pool has no instances of the positive class {positive}")
        self.negatives = np.concatenate([v for c, v in by_class.items() if c != positive])
        if self.negatives.size == 0:
            raise GenerationError("pool has no negative instances")

    def pick(self, candidates):
        return int(candidates[self.rng.integers(len(candidates))])

    def from_classes(self, classes):
        classes = [c for c in classes if c in self.by_class]
        if not classes:
            raise GenerationError("pool lacks every class required by this construction")
        c = classes[self.rng.integers(len(classes))]
        return self.pick(self.by_class[c])

    def size(self, lo_hi):
        lo, hi = lo_hi
        return int(self.rng.integers(lo, hi + 1))


def _exp1_candidate(s: _Sampler, spec: DatasetSpec, want: int):
    outer = s.size(spec.fanout[-1]) if spec.levels == 2 else 1
    sizes = [s.size(spec.fanout[0]) for _ in range(outer)]
    total = sum(sizes)
    n_pos = int(s.rng.integers(1, min(3, total) + 1)) if want else 0
    pos_slots = set(s.rng.choice(total, size=n_pos, replace=False).tolist())
    flat = [s.pick(s.by_class[s.positive]) if i in pos_slots else s.pick(s.negatives) for i in range(total)]
    # random grouping: the flat bag is cut into consecutive chunks
    out, i = [], 0
    for n in sizes:
        out.append(flat[i : i + n])
        i += n
    return out if spec.levels == 2 else out[0]


def _exp2_candidate(s: _Sampler, spec: DatasetSpec, want: int):
    if spec.levels != 2:
        raise ContractError("exp2 needs a 2-level spec")
    k = s.size(spec.fanout[1])
    sizes = [s.size(spec.fanout[0]) for _ in range(k)]
    lo, hi = EXP2_POSITIVES
    total = int(s.rng.integers(lo, hi + 1))
    counts = [0] * k
    order = s.rng.permutation(k)
    if want:
        # one inner bag gets a pair, the rest are scattered one per bag
        eligible = [b for b in order if sizes[b] >= 2]
        if not eligible or total - 2 > k - 1:
            return None
        pair = eligible[0]
        counts[pair] = 2
        rest = [b for b in order if b != pair][: total - 2]
    else:
        if total > k:
            return None
        rest = list(order[:total])
    for b in rest:
        counts[b] = 1
    bags = []
    for n, c in zip(sizes, counts):
        slots = set(s.rng.choice(n, size=c, replace=False).tolist())
        bags.append([s.pick(s.by_class[s.positive]) if i in slots else s.pick(s.negatives) for i in range(n)])
    return bags


_PARITY_TYPES = (0, 1, 2)


def _parity_bag(s: _Sampler, n: int, kind: int):
    if kind == 0:
        return [s.from_classes(EVEN) for _ in range(n)]
    if kind == 1:
        return [s.from_classes(ODD) for _ in range(n)]
    if n < 2:
        return None
    parities = s.rng.integers(0, 2, size=n)
    # force at least one of each parity
    i, j = s.rng.choice(n, size=2, replace=False)
    parities[i], parities[j] = 0, 1
    return [s.from_classes(ODD if p else EVEN) for p in parities]


def _exp3_candidate(s: _Sampler, spec: DatasetSpec, want: int):
    if spec.levels != 3:
        raise ContractError("exp3 needs a 3-level spec")
    tree = []
    for _ in range(s.size(spec.fanout[2])):
        middle = []
        for _ in range(s.size(spec.fanout[1])):
            n = s.size(spec.fanout[0])
            kind = int(s.rng.choice(_PARITY_TYPES))
            bag = _parity_bag(s, n, kind)
            if bag is None:
                return None
            middle.append(bag)
        tree.append(middle)
    return tree


_CANDIDATES = {"exp1": _exp1_candidate, "exp2": _exp2_candidate, "exp3": _exp3_candidate}


def label_tree(tree_digits, experiment, levels, positive=9):
    """Weak label plus latent bag labels for a digit tree (nested lists).

    Returns (y, labels) where ``labels`` mirrors the bag tree: each bag is
    ``(label, [member labels...])`` and innermost bags are ``(label, None)``.
    """
    if experiment == "exp1":
        if levels == 1:
            y = oracle_exp1(tree_digits, positive)
            return y, (y, None)
        inner = [(oracle_exp1(b, positive), None) for b in tree_digits]
        y = oracle_exp1([d for b in tree_digits for d in b], positive)
        return y, (y, inner)
    if experiment == "exp2":
        if levels != 2:
            raise StructureError("exp2 samples have two levels")
        y, inner = oracle_exp2(tree_digits, positive)
        return y, (y, [(v, None) for v in inner])
    if experiment == "exp3":
        if levels != 3:
            raise StructureError("exp3 samples have three levels")
        y, y2, y3 = oracle_exp3(tree_digits)
        return y, (y, [(m, [(v, None) for v in inner]) for m, inner in zip(y3, y2)])
    raise ContractError(f"unknown experiment {experiment!r}")


def _build_node(index_tree, labels, level):
    label, children = labels
    if level == 1:
        return BagNode(1, instances=list(index_tree), latent_label=label)
    return BagNode(
        level,
        members=[_build_node(t, c, level - 1) for t, c in zip(index_tree, children)],
        latent_label=label,
    )


def _digits(pool, index_tree, level):
    if level == 1:
        return [int(pool.labels[i]) for i in index_tree]
    return [_digits(pool, t, level - 1) for t in index_tree]


def make_sample(pool, index_tree, experiment, levels, positive=9, sample_id=0) -> NestedSample:
    digits = _digits(pool, index_tree, levels)
    y, labels = label_tree(digits, experiment, levels, positive)
    return NestedSample(_build_node(index_tree, labels, levels), y, pool, sample_id)


def _check_levels(experiment, levels):
    allowed = {"exp1": (1, 2), "exp2": (2,), "exp3": (3,)}
    if experiment not in allowed:
        raise ContractError(f"unknown experiment {experiment!r}")
    if levels not in allowed[experiment]:
        raise StructureError(f"{experiment} supports {allowed[experiment]} levels, got {levels}")


def build_dataset(pool: InstancePool, spec: DatasetSpec, experiment: str):
    """Draw ``spec.n_samples`` samples by rejection, hitting the positive fraction.

    Exactly ``round(n * positive_fraction)`` samples are positive. Each slot
    draws candidates until the oracle agrees with the slot's target label,
    giving up after :data:`MAX_RETRIES` draws.
    """
    _check_levels(experiment, spec.levels)
    rng = np.random.default_rng(spec.seed)
    sampler = _Sampler(pool, spec.positive_class, rng)
    n_pos = int(round(spec.n_samples * spec.positive_fraction))
    targets = np.zeros(spec.n_samples, dtype=np.int64)
    targets[:n_pos] = 1
    rng.shuffle(targets)
    draw = _CANDIDATES[experiment]
    samples = []
    for sid, want in enumerate(targets):
        for _ in range(MAX_RETRIES):
            tree = draw(sampler, spec, int(want))
            if tree is None:
                continue
            sample = make_sample(pool, tree, experiment, spec.levels, spec.positive_class, sid)
            if sample.weak_label == want:
                samples.append(sample)
                break
        else:
            raise GenerationError(
                f"{experiment}: no label-{want} sample after {MAX_RETRIES} draws (sample {sid})"
            )
    return samples


# -------------------------------------------------------------------- manifest


@dataclass
class Dataset:
    """A generated dataset plus everything needed to regenerate or verify it."""

    samples: list
    pool: InstancePool
    spec: DatasetSpec
    experiment: str

    def __len__(self):
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)

    def __getitem__(self, i):
        return self.samples[i]

    @property
    def labels(self):
        return np.array([s.weak_label for s in self.samples], dtype=np.int64)

    def to_manifest(self):
        return {
            "format": MANIFEST_FORMAT,
            "version": MANIFEST_VERSION,
            "experiment": self.experiment,
            "spec": self.spec.to_dict(),
            "seed": self.spec.seed,
            "pool": {"source": self.pool.source, "checksum": self.pool.checksum(), "size": len(self.pool)},
            "samples": [
                {
                    "id": s.sample_id,
                    "label": s.weak_label,
                    "tree": s.root.index_tree(),
                    "latent": s.latent_tree(),
                }
                for s in self.samples
            ],
        }

    def dumps(self):
        return json.dumps(self.to_manifest(), sort_keys=True, separators=(",", ":")) + "\n"

    def save(self, path):
        Path(path).write_text(self.dumps(), encoding="utf-8")

    def checksum(self):
        return hashlib.sha256(self.dumps().encode("utf-8")).hexdigest()


def generate(pool, spec, experiment) -> Dataset:
    return Dataset(build_dataset(pool, spec, experiment), pool, spec, experiment)


def load_manifest(path, pool: Optional[InstancePool] = None, verify=True) -> Dataset:
    """Read a manifest; rebuild its pool from the stored recipe unless one is given.

    With ``verify`` every stored weak label is rechecked against its oracle.
    """
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise FormatError(f"manifest is not valid JSON: {exc}") from None
    if doc.get("format") != MANIFEST_FORMAT:
        raise FormatError(f"not an nmil manifest (format={doc.get('format')!r})")
    if doc.get("version") != MANIFEST_VERSION:
        raise FormatError(f"unsupported manifest version {doc.get('version')}")
    if pool is None:
        pool = pool_from_source(doc["pool"]["source"])
    if pool.checksum() != doc["pool"]["checksum"]:
        raise FormatError("instance pool does not match the manifest checksum")
    spec_d = dict(doc["spec"])
    spec = DatasetSpec(**spec_d)
    experiment = doc["experiment"]
    samples = []
    for entry in doc["samples"]:
        s = make_sample(pool, entry["tree"], experiment, spec.levels, spec.positive_class, entry["id"])
        if verify and s.weak_label != entry["label"]:
            raise FormatError(f"sample {entry['id']}: stored label {entry['label']} disagrees with oracle")
        samples.append(s)
    return Dataset(samples, pool, spec, experiment)


def flatten_dataset(ds: Dataset) -> Dataset:
    """The MIL view of a nested dataset: one flat bag per sample, labels unchanged."""
    spec = DatasetSpec(**{**ds.spec.to_dict(), "levels": 1, "fanout": [ds.spec.fanout[0]]})
    return Dataset([s.flatten() for s in ds.samples], ds.pool, spec, ds.experiment)
