"""Command line: generate datasets, train, export attention, run the F1 grid."""

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

from . import runs
from .bagdata import flatten_dataset, load_manifest
from .exceptions import NmilError
from .model import load_model
from .svg import attention_svg, member_labels
from .train import extract_attention

log = logging.getLogger("nmil")

# flag name -> RunConfig field, for flags that map one to one
RUN_FLAGS = {
    "experiment": "experiment",
    "architecture": "architecture",
    "attention": "attention",
    "aggregator": "aggregator",
    "levels": "levels",
    "seed": "seed",
    "data_dir": "data_dir",
    "synthetic": "synthetic",
    "n_train": "n_train",
    "n_test": "n_test",
    "learning_rate": "learning_rate",
    "max_epochs": "max_epochs",
    "patience": "patience",
    "validation_fraction": "validation_fraction",
    "embed_dim": "embed_dim",
    "attention_dim": "attention_dim",
    "hidden_dims": "hidden_dims",
    "out": "out",
}


def add_run_flags(p, with_experiment=True):
    if with_experiment:
        p.add_argument("--experiment", choices=["exp1", "exp2", "exp3"])
        p.add_argument("--architecture", choices=["mil", "nmil"])
        p.add_argument("--attention", choices=["on", "off"])
        p.add_argument("--levels", type=int)
    p.add_argument("--aggregator", choices=["mean", "max", "sum"])
    p.add_argument("--seed", type=int)
    p.add_argument("--data-dir", help="directory holding MNIST IDX files (optionally gzipped)")
    p.add_argument("--synthetic", action="store_true", default=None, help="use the synthetic Gaussian pool")
    p.add_argument("--n-train", type=int)
    p.add_argument("--n-test", type=int)
    p.add_argument("--learning-rate", type=float)
    p.add_argument("--max-epochs", type=int)
    p.add_argument("--patience", type=int)
    p.add_argument("--validation-fraction", type=float)
    p.add_argument("--embed-dim", type=int)
    p.add_argument("--attention-dim", type=int)
    p.add_argument("--hidden-dims", type=int, nargs="+")
    p.add_argument("--config", help="JSON file of config values; command-line flags take precedence")


def read_config_file(path):
    if path is None:
        return {}
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise NmilError(f"config file {path}: {exc}") from None
    if not isinstance(doc, dict):
        raise NmilError(f"config file {path} must hold a JSON object")
    return doc


def resolve(args, file_cfg=None):
    """Config file values overlaid by any flag the user set."""
    cfg = dict(read_config_file(args.config) if file_cfg is None else file_cfg)
    for flag, key in RUN_FLAGS.items():
        v = getattr(args, flag, None)
        if v is not None:
            cfg[key] = v
    return cfg


def cmd_generate(args):
    cfg = runs.RunConfig.from_dict(resolve(args))
    ds = runs.make_dataset(cfg, args.split)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    ds.save(out)
    n = len(ds)
    pos = int(sum(ds.labels))
    print(f"wrote {out}: {n} samples, {pos} positive ({pos / n:.3f})")
    return 0


def cmd_train(args):
    cfg = runs.RunConfig.from_dict(resolve(args))
    train_ds = test_ds = None
    if args.train_manifest or args.test_manifest:
        if not (args.train_manifest and args.test_manifest):
            raise NmilError("give both --train-manifest and --test-manifest, or neither")
        train_ds, test_ds = load_manifest(args.train_manifest), load_manifest(args.test_manifest)
        if train_ds.experiment != cfg.experiment:
            raise NmilError(f"manifest is for {train_ds.experiment}, config says {cfg.experiment}")

    def on_epoch(rec):
        if not args.quiet:
            print(json.dumps(rec, sort_keys=True), flush=True)

    report, model, train_ds, test_ds = runs.run(cfg, train_ds, test_ds, epoch_callback=on_epoch)
    if cfg.out:
        runs.write_run(cfg.out, report, model, train_ds, test_ds)
    summary = {"metrics": report["metrics"], "localization_auc": report["localization_auc"], "checksum": report["checksum"]}
    print(json.dumps(summary, sort_keys=True))
    return 0


def attention_rows(records):
    """One row per (sample, level, bag, member)."""
    for rec in records:
        for level in range(1, len(rec.tree.levels) + 1):
            for b, (weights, bag) in enumerate(rec.members_at(level)):
                for m, (w, lab) in enumerate(zip(weights, member_labels(bag))):
                    yield rec.sample_id, level, b, m, float(w), lab


def cmd_attend(args):
    model = load_model(args.model)
    ds = load_manifest(args.manifest)
    if model.levels == 1 and ds.spec.levels > 1:
        ds = flatten_dataset(ds)  # mil models see the flat view
    records = extract_attention(model, ds.samples)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with out.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["sample_id", "level", "bag_index", "member_index", "weight", "latent_label"])
        for row in attention_rows(records):
            w.writerow([*row[:4], repr(row[4]), row[5]])
    print(f"wrote {out}: attention for {len(records)} samples")
    if args.svg:
        svg_dir = Path(args.svg)
        svg_dir.mkdir(parents=True, exist_ok=True)
        wanted = set(args.samples) if args.samples else None
        chosen = [r for r in records if wanted is None or r.sample_id in wanted]
        if wanted is None:
            chosen = chosen[: args.max_svg]
        for rec in chosen:
            (svg_dir / f"sample_{rec.sample_id}.svg").write_text(attention_svg(rec), encoding="utf-8")
        print(f"wrote {len(chosen)} charts to {svg_dir}")
    return 0


def cmd_table1(args):
    doc = read_config_file(args.config)
    overrides = doc.pop("per_experiment", {})
    base = resolve(args, doc)
    for key in ("experiment", "architecture", "attention", "levels"):
        base.pop(key, None)

    def on_cell(key, cell):
        f1 = "ERR " + cell["error"] if cell["f1"] is None else f"f1={cell['f1']:.3f}"
        print(f"{key}: {f1}", flush=True)

    cells = runs.table1(base, overrides, on_cell=on_cell)
    table = runs.format_table1(cells)
    print(table)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "table1.md").write_text(table + "\n", encoding="utf-8")
        (out / "table1.json").write_text(json.dumps(cells, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return 0 if all(c["f1"] is not None for c in cells.values()) else 1


def build_parser():
    parser = argparse.ArgumentParser(prog="nmil", description="Attention-based nested multiple instance learning.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a dataset manifest")
    add_run_flags(g)
    g.add_argument("--split", choices=["train", "test"], default="train")
    g.add_argument("--out", required=True, help="manifest path")
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="train and evaluate one configuration")
    add_run_flags(t)
    t.add_argument("--train-manifest")
    t.add_argument("--test-manifest")
    t.add_argument("--out", help="run directory for model, manifests and report")
    t.add_argument("--quiet", action="store_true", help="do not print per-epoch records")
    t.set_defaults(func=cmd_train)

    a = sub.add_parser("attend", help="export attention weights of a trained model")
    a.add_argument("--model", required=True)
    a.add_argument("--manifest", required=True)
    a.add_argument("--out", required=True, help="CSV path")
    a.add_argument("--svg", help="directory for per-sample bar charts")
    a.add_argument("--samples", type=int, nargs="+", help="sample ids to chart")
    a.add_argument("--max-svg", type=int, default=10, help="charts to draw when --samples is not given")
    a.set_defaults(func=cmd_attend)

    tb = sub.add_parser("table1", help="run the MIL/NMIL x attention F1 grid")
    add_run_flags(tb, with_experiment=False)
    tb.add_argument("--out", help="directory for table1.md and table1.json")
    tb.set_defaults(func=cmd_table1)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (NmilError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
