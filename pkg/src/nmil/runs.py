"""Reproducible experiment runs: config resolution, datasets, reports, grids.

Everything a run reports is fixed by its :class:`RunConfig`. One ``seed``
drives the train dataset (``seed``), the test dataset (``seed + 1``), the
weight initialisation and the SGD shuffle order (both ``seed``).
"""

from __future__ import annotations

import hashlib
import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional

from .bagdata import (
    Dataset,
    DatasetSpec,
    flatten_dataset,
    generate,
    load_manifest,
    load_mnist_dir,
    synth_pool,
)
from .exceptions import ContractError, StructureError, UndefinedAUCError
from .model import ModelDims, init_params, save_model
from .train import (
    TrainConfig,
    attention_localization_auc,
    evaluate,
    extract_attention,
    instance_is,
    member_label_is,
    train,
)

logger = logging.getLogger(__name__)

ARCHITECTURES = ("mil", "nmil")
REPORT_VERSION = 1


@dataclass
class RunConfig:
    experiment: str = "exp1"
    architecture: str = "nmil"
    attention: bool = True
    aggregator: str = "sum"
    levels: Optional[int] = None  # nesting depth of the data; mil runs flatten it
    seed: int = 0
    # data
    data_dir: Optional[str] = None
    synthetic: bool = False
    synthetic_dim: int = 32
    synthetic_per_class: int = 60
    n_train: int = 1000
    n_test: int = 400
    positive_class: int = 9
    positive_fraction: float = 0.5
    fanout: Optional[list] = None
    # model
    hidden_dims: list = field(default_factory=lambda: [128])
    embed_dim: int = 64
    attention_dim: int = 64
    # training
    learning_rate: float = 0.01
    max_epochs: int = 100
    patience: int = 10
    validation_fraction: float = 0.2
    threshold: float = 0.5
    out: Optional[str] = None

    def __post_init__(self):
        if self.experiment not in ("exp1", "exp2", "exp3"):
            raise ContractError(f"unknown experiment {self.experiment!r}")
        if self.architecture not in ARCHITECTURES:
            raise ContractError(f"architecture must be one of {ARCHITECTURES}")
        if isinstance(self.attention, str):
            if self.attention not in ("on", "off"):
                raise ContractError(f"attention must be on/off, got {self.attention!r}")
            self.attention = self.attention == "on"
        if self.experiment == "exp3" and self.architecture == "mil":
            raise ContractError("exp3 is defined for nested models only; mil runs are rejected")
        natural = 3 if self.experiment == "exp3" else 2
        if self.levels is None:
            self.levels = natural
        if self.experiment in ("exp2", "exp3") and self.levels != natural:
            raise StructureError(f"{self.experiment} requires {natural} levels, got {self.levels}")
        if self.experiment == "exp1" and self.levels not in (1, 2):
            raise StructureError(f"exp1 uses 1 or 2 levels, got {self.levels}")
        if self.architecture == "nmil" and self.levels < 2:
            raise StructureError("nmil runs need at least 2 levels of data")
        if not self.synthetic and self.data_dir is None:
            raise ContractError("give a data directory with MNIST IDX files or choose synthetic data")

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ContractError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self):
        return asdict(self)

    @property
    def model_levels(self):
        return 1 if self.architecture == "mil" else self.levels

    def dataset_spec(self, split):
        n = self.n_train if split == "train" else self.n_test
        seed = self.seed if split == "train" else self.seed + 1
        extra = {}
        if self.fanout is not None:
            extra["fanout"] = tuple(tuple(f) for f in self.fanout)
        return DatasetSpec.default(
            self.experiment,
            levels=self.levels,
            positive_class=self.positive_class,
            positive_fraction=self.positive_fraction,
            n_samples=n,
            seed=seed,
            **extra,
        )

    def train_config(self):
        return TrainConfig(
            learning_rate=self.learning_rate,
            max_epochs=self.max_epochs,
            patience=self.patience,
            validation_fraction=self.validation_fraction,
            seed=self.seed,
            threshold=self.threshold,
        )


def load_pool(config: RunConfig, split):
    if config.synthetic:
        # shared class centres, disjoint draws per split
        seed = config.seed if split == "train" else config.seed + 1000
        return synth_pool(config.synthetic_per_class, seed=seed, dim=config.synthetic_dim, means_seed=config.seed)
    return load_mnist_dir(config.data_dir, split)


def make_dataset(config: RunConfig, split) -> Dataset:
    return generate(load_pool(config, split), config.dataset_spec(split), config.experiment)


def model_view(config: RunConfig, ds: Dataset) -> Dataset:
    """What the model is trained on: the flat MIL view for mil runs."""
    return flatten_dataset(ds) if config.architecture == "mil" else ds


def localization(records, experiment, levels, positive_class=9):
    """Attention localisation AUCs that are defined for this experiment."""
    checks = {}
    if experiment in ("exp1", "exp2"):
        checks["instance"] = (instance_is(positive_class), 1)
        if levels >= 2:
            checks["inner_bag"] = (member_label_is(1), 2)
    else:
        # odd-only innermost bags, then odd-only middle bags
        checks["instance_odd"] = (lambda bag, i: bag["digits"][i] % 2 == 1, 1)
        checks["inner_bag"] = (member_label_is(1), 2)
        checks["middle_bag"] = (member_label_is(1), 3)
    out = {}
    for name, (pred, level) in checks.items():
        try:
            out[name] = attention_localization_auc(records, pred, level)
        except UndefinedAUCError:
            out[name] = None
    return out


def report_checksum(report):
    """Hash of everything that determines the results; timing and output path excluded."""
    stable = {k: v for k, v in report.items() if k not in ("duration_seconds", "checksum")}
    stable["config"] = {k: v for k, v in stable["config"].items() if k != "out"}
    blob = json.dumps(stable, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def dataset_checksum(train_ds, test_ds):
    h = hashlib.sha256()
    h.update(train_ds.checksum().encode())
    h.update(test_ds.checksum().encode())
    return h.hexdigest()


def run(config: RunConfig, train_ds: Dataset = None, test_ds: Dataset = None, epoch_callback=None):
    """Generate (unless given), train, evaluate. Returns (report, model, train_ds, test_ds)."""
    start = time.perf_counter()
    train_ds = train_ds if train_ds is not None else make_dataset(config, "train")
    test_ds = test_ds if test_ds is not None else make_dataset(config, "test")
    tr, te = model_view(config, train_ds), model_view(config, test_ds)
    dims = ModelDims(
        train_ds.pool.dim, tuple(config.hidden_dims), config.embed_dim, config.attention_dim, config.model_levels
    )
    model = init_params(dims, seed=config.seed, aggregator=config.aggregator, attention=config.attention)
    model, history = train(model, tr.samples, config.train_config(), callback=epoch_callback)
    metrics = evaluate(model, te.samples, config.threshold)
    records = extract_attention(model, te.samples)
    report = {
        "format": "nmil-report",
        "version": REPORT_VERSION,
        "config": config.to_dict(),
        "dataset_checksum": dataset_checksum(train_ds, test_ds),
        "history": history.records(),
        "best_epoch": history.best_epoch,
        "stopped_early": history.stopped_early,
        "metrics": metrics.to_dict(),
        "localization_auc": localization(records, config.experiment, config.model_levels, config.positive_class),
    }
    report["duration_seconds"] = time.perf_counter() - start
    report["checksum"] = report_checksum(report)
    return report, model, train_ds, test_ds


def write_run(out_dir, report, model, train_ds, test_ds):
    """Write model, manifests, report and per-epoch history; versioned, never partial."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    staged = {
        "train.manifest.json": train_ds.dumps(),
        "test.manifest.json": test_ds.dumps(),
        "history.jsonl": "".join(json.dumps(r, sort_keys=True) + "\n" for r in report["history"]),
        "report.json": json.dumps(report, indent=2, sort_keys=True) + "\n",
    }
    tmp_model = out / "model.nmil.tmp"
    save_model(model, tmp_model)
    for name, text in staged.items():
        (out / f"{name}.tmp").write_text(text, encoding="utf-8")
    tmp_model.replace(out / "model.nmil")
    for name in staged:
        (out / f"{name}.tmp").replace(out / name)


def load_run_datasets(train_manifest, test_manifest):
    return load_manifest(train_manifest), load_manifest(test_manifest)


# ---------------------------------------------------------------------- grid

TABLE1_CELLS = [
    ("exp1", "mil", False),
    ("exp1", "mil", True),
    ("exp1", "nmil", False),
    ("exp1", "nmil", True),
    ("exp2", "mil", False),
    ("exp2", "mil", True),
    ("exp2", "nmil", False),
    ("exp2", "nmil", True),
    ("exp3", "nmil", False),
    ("exp3", "nmil", True),
]


def table1(base: dict, overrides=None, on_cell=None):
    """Run every Table-1 cell; a failing cell is recorded and the grid continues.

    ``overrides`` maps experiment name to config overrides for that column.
    """
    overrides = overrides or {}
    cells = {}
    datasets = {}
    for exp, arch, att in TABLE1_CELLS:
        key = f"{exp}/{arch}/{'att' if att else 'noatt'}"
        try:
            cfg = RunConfig.from_dict(
                {**base, **overrides.get(exp, {}), "experiment": exp, "architecture": arch, "attention": att, "levels": None}
            )
            if exp not in datasets:
                datasets[exp] = (make_dataset(cfg, "train"), make_dataset(cfg, "test"))
            report, *_ = run(cfg, *datasets[exp])
            cells[key] = {"f1": report["metrics"]["f1"], "report": report}
        except Exception as exc:  # keep the grid going
            logger.exception("cell %s failed", key)
            cells[key] = {"f1": None, "error": f"{type(exc).__name__}: {exc}"}
        if on_cell is not None:
            on_cell(key, cells[key])
    return cells


def format_table1(cells):
    def cell(exp, arch, att):
        c = cells.get(f"{exp}/{arch}/{'att' if att else 'noatt'}")
        if c is None:
            return "N/A"
        return "ERR" if c["f1"] is None else f"{c['f1']:.3f}"

    lines = [
        "|      |         | Exp1  | Exp2  | Exp3  |",
        "|------|---------|-------|-------|-------|",
    ]
    for arch in ("mil", "nmil"):
        for att in (False, True):
            label = arch.upper() if not att else ""
            row = [cell("exp1", arch, att), cell("exp2", arch, att)]
            row.append("N/A" if arch == "mil" else cell("exp3", arch, att))
            lines.append(f"| {label:<4} | {'w/ Att' if att else 'w/o Att':<7} | " + " | ".join(f"{v:<5}" for v in row) + " |")
    return "\n".join(lines)
