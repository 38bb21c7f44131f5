"""Command-line entry point: split, fit-preproc, synth-fixture, train, eval, bench, report.

Exit codes: 0 success, 2 validation error, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import yaml

from . import __version__
from .benchmark import (
    BenchmarkPlan,
    BenchmarkReport,
    compare_runs,
    emit_report,
    load_reference_table,
    render_csv,
    run_benchmark,
)
from .core import DatasetDescriptor, builtin_descriptor, DESCRIPTOR_DIR
from .dataset_io import FixtureSpec, SplitManifest, generate_fixture, list_samples, load_sample, load_samples, make_splits
from .errors import HS3Error, ValidationError
from .metrics import METRIC_LABELS, METRICS, percent
from .preprocessing import DEFAULT_SCOPES, VARIANTS, VariantTransform, fit_variant

log = logging.getLogger("hs3bench")


# --------------------------------------------------------------------------
# dataset resolution


def resolve_dataset(name: str, root=None) -> DatasetDescriptor:
    """A descriptor from a YAML path, a root holding descriptor.yaml, or a shipped name.

    Without --root the dataset lives at $HS3_DATA_ROOT/<name>.
    """
    p = Path(name)
    if p.suffix in (".yaml", ".yml") and p.is_file():
        return DatasetDescriptor.load(p, root=root)
    if root is None:
        root = Path(os.environ.get("HS3_DATA_ROOT", ".")) / name
    root = Path(root)
    if (root / "descriptor.yaml").is_file():
        return DatasetDescriptor.load(root / "descriptor.yaml", root=root)
    if (DESCRIPTOR_DIR / f"{name}.yaml").is_file():
        return builtin_descriptor(name, root=root)
    raise ValidationError(f"dataset not found: {name!r} (no descriptor at {root})")


def _sidecar_path(descriptor: DatasetDescriptor, variant: str, scope: str) -> Path:
    return descriptor.manifest_path.parent / f"preproc_{variant}_{scope}.json"


def _load_yaml(path) -> dict:
    if not path:
        return {}
    with open(path) as fh:
        return yaml.safe_load(fh) or {}


# --------------------------------------------------------------------------
# commands


def cmd_split(args) -> int:
    desc = resolve_dataset(args.dataset, args.root)
    ids = list_samples(desc)
    manifest = make_splits(desc, ids, seed=args.seed)
    out = Path(args.out) if args.out else desc.manifest_path
    out.parent.mkdir(parents=True, exist_ok=True)
    manifest.save(out)
    tr, va, te = manifest.sizes
    print(f"{desc.name}: train {tr}, val {va}, test {te} -> {out}")
    return 0


def cmd_fit_preproc(args) -> int:
    desc = resolve_dataset(args.dataset, args.root)
    manifest = SplitManifest.load(args.manifest or desc.manifest_path)
    scope = args.scope or DEFAULT_SCOPES[args.variant]
    every = list(manifest.train) + list(manifest.val) + list(manifest.test)
    transform = fit_variant(
        args.variant, desc,
        train_cubes=lambda: (load_sample(desc, i).cube for i in manifest.train),
        all_cubes=lambda: (load_sample(desc, i).cube for i in every),
        scope=scope, seed=args.seed)
    out = Path(args.out) if args.out else _sidecar_path(desc, args.variant, scope)
    out.parent.mkdir(parents=True, exist_ok=True)
    transform.save(out)
    extra = f", bands {list(transform.prgb_bands)}" if transform.prgb_bands else ""
    print(f"{desc.name}: fitted {args.variant} ({scope}{extra}) -> {out}")
    return 0


def cmd_synth_fixture(args) -> int:
    spec = FixtureSpec(n_images=args.n_images, height=args.height, width=args.width,
                       channels=args.channels, K=args.classes, noise_sigma=args.noise, seed=args.seed)
    fractions = tuple(float(x) for x in args.fractions.split(","))
    desc = generate_fixture(spec, args.out, name=args.name or Path(args.out).name,
                            split_fractions=fractions)
    print(f"wrote {spec.n_images} samples for {desc.name} under {args.out}")
    if args.splits:
        manifest = make_splits(desc, list_samples(desc))
        manifest.save(desc.manifest_path)
        print(f"split manifest -> {desc.manifest_path}")
    return 0


def _effective_configs(args, desc):
    """Shipped defaults < --config file < command-line flags."""
    from .training import config_for

    file_cfg = _load_yaml(args.config)
    train_over = dict(file_cfg.get("training") or {})
    model_over = dict(file_cfg.get("model") or {})
    flags = {"max_epochs": args.max_epochs, "batch_size": args.batch_size,
             "learning_rate": args.lr, "patience": args.patience, "seed": args.seed,
             "crop": args.crop}
    train_over.update({k: v for k, v in flags.items() if v is not None})
    for k, v in (("base_width", args.base_width), ("dropout_p", args.dropout)):
        if v is not None:
            model_over[k] = v
    return config_for(desc, **train_over), model_over, file_cfg


def cmd_train(args) -> int:
    from .benchmark import _model_defaults
    from .models import ModelConfig, apply_pretrain, build_model
    from .plotting import render_side_by_side
    from .models import predict_labels
    from .training import RunRecord, stable_hash, train

    desc = resolve_dataset(args.dataset, args.root)
    manifest_path = Path(args.manifest) if args.manifest else desc.manifest_path
    manifest = SplitManifest.load(manifest_path)
    tcfg, model_over, file_cfg = _effective_configs(args, desc)
    arch = args.arch or file_cfg.get("architecture", "runet")
    variant = args.variant or file_cfg.get("variant", "hsi")
    pretrain = args.pretrain or file_cfg.get("pretrain", "none")
    weights = args.weights or file_cfg.get("weights")
    scope = args.scope or DEFAULT_SCOPES[variant]
    run_id = args.run_id or f"{desc.name}_{arch}_{variant}_s{tcfg.seed}"
    run_dir = Path(args.out) / run_id
    if (run_dir / "record.json").exists() and not args.force:
        raise ValidationError(f"run {run_dir} exists; pass --force to overwrite")
    run_dir.mkdir(parents=True, exist_ok=True)

    train_s = load_samples(desc, manifest.train)
    val_s = load_samples(desc, manifest.val)
    every = list(manifest.train) + list(manifest.val) + list(manifest.test)
    transform = fit_variant(
        variant, desc,
        train_cubes=lambda: (s.cube for s in train_s),
        all_cubes=lambda: (load_sample(desc, i).cube for i in every),
        scope=scope, seed=tcfg.seed)
    transform.save(run_dir / "preproc.json")
    train_s = [transform.apply_sample(s) for s in train_s]
    val_s = [transform.apply_sample(s) for s in val_s]

    mcfg = ModelConfig(architecture=arch, in_channels=transform.out_channels, num_classes=desc.K,
                       pretrain_mode=pretrain, **_model_defaults(arch, model_over))
    model = build_model(mcfg, seed=tcfg.seed)
    if pretrain != "none":
        if not weights:
            raise ValidationError("--weights is required with --pretrain")
        apply_pretrain(model, pretrain, weights)

    record = RunRecord(run_id=run_id, dataset=desc.name, variant=variant)
    record.data_source = {"descriptor": desc.to_dict(), "manifest": str(manifest_path.resolve())}
    record.preprocessing = {"variant": variant, "scope": scope, "sidecar": "preproc.json"}
    record.config_hashes.update({"dataset": stable_hash(desc.to_dict() | {"root_path": None}),
                                 "splits": stable_hash(manifest.to_text()),
                                 "preprocessing": stable_hash(transform.to_dict())})
    if scope == "whole_dataset":
        record.add_deviation("preprocessing extrema derived from the whole dataset, including test images")
    if file_cfg or any(v is not None for v in (args.max_epochs, args.batch_size, args.lr, args.patience, args.crop)):
        record.add_deviation("training parameters overridden from the shipped defaults")
    model, record = train(model, train_s, val_s, tcfg, record=record, run_dir=run_dir, num_classes=desc.K)
    if val_s:
        s = val_s[0]
        render_side_by_side(s.labels, predict_labels(model, s.cube), desc.K,
                            run_dir / "val_example.png", image=s.cube,
                            class_names=desc.catalog.names, title=f"{run_id} validation {s.id}")
    record.save(run_dir / "record.json")
    print(f"{run_id}: best epoch {record.best_epoch}, val J_M {percent(record.best_val_jaccard)} -> {run_dir}")
    return 0


def cmd_eval(args) -> int:
    from .models import load_checkpoint, predict_labels
    from .plotting import render_side_by_side
    from .training import RunRecord, evaluate

    run_dir = Path(args.run)
    record = RunRecord.load(run_dir / "record.json")
    # refuse before touching any test data
    if record.test_consumed and not args.override:
        from .errors import ProtocolViolation

        raise ProtocolViolation("test reuse")
    src = record.data_source
    desc = DatasetDescriptor.from_dict(src["descriptor"])
    if args.root:
        desc = desc.with_root(args.root)
    manifest = SplitManifest.load(src["manifest"])
    transform = VariantTransform.load(run_dir / "preproc.json")
    model = load_checkpoint(run_dir / "ckpt" / "best.pt")
    test_s = [transform.apply_sample(s) for s in load_samples(desc, manifest.test)]
    result = evaluate(model, test_s, record=record, num_classes=desc.K, override=args.override)
    record.save(run_dir / "record.json")
    row = ",".join(percent(getattr(result, m)) for m in METRICS)
    (run_dir / "test_scores.csv").write_text(
        "Dataset,Run,Data," + ",".join(METRIC_LABELS[m] for m in METRICS) + "\n"
        + f"{desc.name},{record.run_id},{record.variant},{row}\n")
    s = test_s[0]
    render_side_by_side(s.labels, predict_labels(model, s.cube), desc.K, run_dir / "test_example.png",
                        image=s.cube, class_names=desc.catalog.names, title=f"{record.run_id} test {s.id}")
    print(f"{record.run_id}: " + "  ".join(f"{METRIC_LABELS[m]} {percent(getattr(result, m))}" for m in METRICS))
    return 0


def cmd_bench(args) -> int:
    plan = BenchmarkPlan.load(args.plan, output_dir=args.out)
    if args.parallelism:
        plan.parallelism = args.parallelism
    report = run_benchmark(plan)
    paths = emit_report(report, plan.output_dir, figures=not args.no_figures)
    (Path(plan.output_dir) / "report.json").write_text(json.dumps(
        {"provenance": report.provenance}, indent=2, sort_keys=True, default=str) + "\n")
    for p in paths:
        print(p)
    failed = [c for c in report.cells.values() if c.status != "ok"]
    if failed:
        print(f"{len(failed)} cell(s) failed; see provenance.md", file=sys.stderr)
        return 3
    return 0


def _report_source(source: str) -> BenchmarkReport:
    if source == "reference":
        return load_reference_table()
    p = Path(source)
    if p.is_dir():
        p = p / "report.csv"
    if not p.exists():
        raise ValidationError(f"report not found: {source}")
    return BenchmarkReport.from_csv(p.read_text())


def _approach_arg(text):
    if not text:
        return None
    name, _, data = text.rpartition(":")
    if not name:
        raise ValidationError(f"expected NAME:DATA, got {text!r}")
    return (name, data)


def cmd_report(args) -> int:
    if args.compare:
        a, b = (_report_source(x) for x in args.compare)
        table = compare_runs(a, b, _approach_arg(args.approach_a), _approach_arg(args.approach_b))
        text = table.render()
        if args.out:
            Path(args.out).parent.mkdir(parents=True, exist_ok=True)
            Path(args.out).write_text(text)
        sys.stdout.write(text)
        return 0
    if not args.input:
        raise ValidationError("report needs --input or --compare")
    report = _report_source(args.input)
    if args.out:
        for p in emit_report(report, args.out, figures=not args.no_figures):
            print(p)
    else:
        sys.stdout.write(render_csv(report))
    return 0


# --------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hs3bench", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("--log-level", default="WARNING",
                        choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    sub = parser.add_subparsers(dest="command", required=True)

    def dataset_args(p):
        p.add_argument("--dataset", required=True,
                       help="shipped name (hyko2, hcv, hsidrive), fixture name, or descriptor YAML")
        p.add_argument("--root", help="dataset root (default $HS3_DATA_ROOT/<dataset>)")

    p = sub.add_parser("split", help="write a seeded train/val/test manifest")
    dataset_args(p)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", help="manifest path (default: <root>/splits.txt)")
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("fit-preproc", help="fit min-max / PCA1 / pseudo-RGB preprocessing")
    dataset_args(p)
    p.add_argument("--variant", required=True, choices=VARIANTS)
    p.add_argument("--scope", choices=["whole_dataset", "train_split"])
    p.add_argument("--manifest")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="sidecar path (default: beside the manifest)")
    p.set_defaults(func=cmd_fit_preproc)

    p = sub.add_parser("synth-fixture", help="generate a synthetic fixture dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--name")
    p.add_argument("--n-images", type=int, default=16)
    p.add_argument("--height", type=int, default=32)
    p.add_argument("--width", type=int, default=32)
    p.add_argument("--channels", type=int, default=8)
    p.add_argument("--classes", type=int, default=3)
    p.add_argument("--noise", type=float, default=0.01)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--fractions", default="0.5,0.25,0.25", help="train,val,test")
    p.add_argument("--splits", action="store_true", help="also write the split manifest")
    p.set_defaults(func=cmd_synth_fixture)

    p = sub.add_parser("train", help="train one model on one dataset and data variant")
    dataset_args(p)
    p.add_argument("--arch", choices=["runet", "dl3"])
    p.add_argument("--variant", choices=VARIANTS)
    p.add_argument("--scope", choices=["whole_dataset", "train_split"])
    p.add_argument("--pretrain", choices=["none", "backbone_bb", "transfer_pt"])
    p.add_argument("--weights")
    p.add_argument("--config", help="YAML with optional training:/model: blocks")
    p.add_argument("--manifest")
    p.add_argument("--out", default="runs")
    p.add_argument("--run-id")
    p.add_argument("--seed", type=int)
    p.add_argument("--max-epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--patience", type=int)
    p.add_argument("--crop", type=int)
    p.add_argument("--base-width", type=int)
    p.add_argument("--dropout", type=float)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a trained run once on its test split")
    p.add_argument("--run", required=True, help="run directory (runs/<id>)")
    p.add_argument("--root", help="override the dataset root stored in the run")
    p.add_argument("--override", action="store_true",
                   help="allow re-evaluation; recorded as a deviation")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", help="run a benchmark plan and emit reports")
    p.add_argument("--plan", required=True)
    p.add_argument("--out")
    p.add_argument("--parallelism", type=int)
    p.add_argument("--no-figures", action="store_true")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("report", help="re-render a report or compare two reports")
    p.add_argument("--input", help="report.csv, its directory, or 'reference'")
    p.add_argument("--compare", nargs=2, metavar=("A", "B"))
    p.add_argument("--approach-a", help="NAME:DATA row group of A")
    p.add_argument("--approach-b", help="NAME:DATA row group of B")
    p.add_argument("--out")
    p.add_argument("--no-figures", action="store_true")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=args.log_level, stream=sys.stderr,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except HS3Error as e:
        print(f"error: {e}", file=sys.stderr)
        return e.exit_code
    except Exception as e:  # noqa: BLE001
        log.debug("unhandled", exc_info=True)
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
