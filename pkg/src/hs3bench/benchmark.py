"""Experiment-matrix orchestration, guideline enforcement and Table-III-style reports."""

from __future__ import annotations

import csv
import io
import logging
import traceback
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import yaml

from .core import BENCHMARK_DATASETS, DatasetDescriptor, builtin_descriptor
from .dataset_io import SplitManifest, load_samples
from .errors import ProtocolViolation, ValidationError
from .metrics import METRIC_LABELS, METRICS, ZERO_SUPPORT_POLICY, summary_avg, summary_worst_case
from .models import ModelConfig, apply_pretrain, build_model, sha256_file
from .preprocessing import DEFAULT_SCOPES, VARIANTS, fit_variant
from .training import RunRecord, TABLE_DEFAULTS, config_for, evaluate, stable_hash, train

log = logging.getLogger(__name__)

AVERAGE = "Average"
WORST_CASE = "Worst-Case"
VARIANT_LABELS = {"hsi": "HSI", "pca1": "PCA1", "prgb": "pRGB"}


@dataclass
class Approach:
    """One row group of the report: an architecture plus a data variant.

    ``fit`` lets Python callers plug in a non-network method: it receives
    (descriptor, train_samples, val_samples) and returns an object with ``predict(cube)``.
    """

    name: str
    architecture: str = "runet"
    variant: str = "hsi"
    pretrain_mode: str = "none"
    weights: Optional[str] = None
    model: dict = field(default_factory=dict)
    training: dict = field(default_factory=dict)
    per_dataset: dict = field(default_factory=dict)
    preprocessing_scope: Optional[str] = None
    fit: Optional[Callable] = None

    @classmethod
    def from_dict(cls, d: dict) -> "Approach":
        return cls(
            name=d["name"],
            architecture=d.get("architecture", "runet"),
            variant=d.get("variant", "hsi"),
            pretrain_mode=d.get("pretrain", d.get("pretrain_mode", "none")),
            weights=d.get("weights"),
            model=dict(d.get("model") or {}),
            training=dict(d.get("training") or {}),
            per_dataset={k: dict(v or {}) for k, v in (d.get("per_dataset") or {}).items()},
            preprocessing_scope=d.get("preprocessing_scope"),
        )

    def architecture_for(self, dataset: str) -> str:
        return self.per_dataset.get(dataset, {}).get("architecture", self.architecture)

    def variant_for(self, dataset: str) -> str:
        return self.per_dataset.get(dataset, {}).get("variant", self.variant)

    def training_for(self, dataset: str) -> dict:
        return {**self.training, **self.per_dataset.get(dataset, {}).get("training", {})}

    def model_for(self, dataset: str) -> dict:
        return {**self.model, **self.per_dataset.get(dataset, {}).get("model", {})}

    @property
    def data_label(self) -> str:
        return VARIANT_LABELS.get(self.variant, self.variant)


@dataclass
class BenchmarkPlan:
    approaches: list
    datasets: list  # DatasetDescriptor, in registration order
    output_dir: Path
    registry: tuple = BENCHMARK_DATASETS
    seed: int = 0
    parallelism: int = 1

    @classmethod
    def from_dict(cls, d: dict, base_dir=None) -> "BenchmarkPlan":
        base = Path(base_dir or ".")

        def resolve(p):
            p = Path(p)
            return p if p.is_absolute() else base / p

        datasets = []
        for entry in d.get("datasets") or []:
            if isinstance(entry, str):
                entry = {"name": entry}
            if "descriptor" in entry:
                desc = DatasetDescriptor.load(resolve(entry["descriptor"]),
                                              root=resolve(entry["root"]) if "root" in entry else None)
            else:
                import os

                default_root = Path(os.environ.get("HS3_DATA_ROOT", ".")) / entry["name"]
                desc = builtin_descriptor(entry["name"],
                                          root=resolve(entry["root"]) if "root" in entry else default_root)
            datasets.append(desc)
        return cls(
            approaches=[Approach.from_dict(a) for a in d.get("approaches") or []],
            datasets=datasets,
            output_dir=resolve(d.get("output", "bench_out")),
            registry=tuple(d.get("registry") or BENCHMARK_DATASETS),
            seed=int(d.get("seed", 0)),
            parallelism=int(d.get("parallelism", 1)),
        )

    @classmethod
    def load(cls, path, output_dir=None) -> "BenchmarkPlan":
        path = Path(path)
        with open(path) as fh:
            plan = cls.from_dict(yaml.safe_load(fh) or {}, base_dir=path.parent)
        if output_dir is not None:
            plan.output_dir = Path(output_dir)
        return plan

    def validate(self) -> list:
        """Reject plans breaking the benchmark rules before any compute; returns warnings."""
        names = [d.name for d in self.datasets]
        if len(set(names)) != len(names):
            raise ValidationError(f"duplicate datasets in plan: {names}")
        missing = [r for r in self.registry if r not in names]
        if missing:
            raise ProtocolViolation(f"guideline 1: every registered dataset must be evaluated, missing {missing}")
        extra = [n for n in names if n not in self.registry]
        if extra:
            raise ProtocolViolation(f"guideline 1: datasets {extra} are not in the registry {list(self.registry)}")
        if not self.approaches:
            raise ValidationError("plan has no approaches")
        keys = [(a.name, a.variant) for a in self.approaches]
        if len(set(keys)) != len(keys):
            raise ValidationError(f"duplicate (approach, variant) pairs: {keys}")
        for a in self.approaches:
            archs = {a.architecture_for(n) for n in names}
            if len(archs) > 1:
                raise ProtocolViolation(
                    f"guideline 2: approach {a.name!r} mixes architectures {sorted(archs)} across datasets")
            variants = {a.variant_for(n) for n in names}
            if len(variants) > 1:
                raise ProtocolViolation(
                    f"guideline 2: approach {a.name!r} mixes data variants {sorted(variants)} across datasets")
            if a.variant not in VARIANTS:
                raise ValidationError(f"unknown data variant {a.variant!r}")
            if a.fit is None:
                ModelConfig(architecture=a.architecture, pretrain_mode=a.pretrain_mode)
                if a.pretrain_mode != "none" and not (a.weights and Path(a.weights).exists()):
                    raise ValidationError(f"approach {a.name!r}: pretrained weights not found: {a.weights}")
        for d in self.datasets:
            if not d.manifest_path.exists():
                raise ValidationError(f"split manifest missing for {d.name}: {d.manifest_path}")
        warnings = []
        if tuple(self.registry) != BENCHMARK_DATASETS:
            warnings.append(f"non-standard dataset registry {list(self.registry)}")
        return warnings


@dataclass
class CellResult:
    dataset: str
    approach: str
    data: str
    status: str = "ok"  # ok | failed
    scores: dict = field(default_factory=dict)  # metric -> fraction in [0, 1]
    error: str = ""
    record_path: str = ""


@dataclass
class BenchmarkReport:
    """Scores per (dataset, approach, data) cell plus provenance.

    Approaches are (name, data label) pairs; the same name may appear with several data variants.
    """

    datasets: list  # names in registration order
    approaches: list  # (name, data label) in plan order
    cells: dict = field(default_factory=dict)  # (dataset, name, data) -> CellResult
    provenance: dict = field(default_factory=dict)

    def add(self, cell: CellResult) -> None:
        self.cells[(cell.dataset, cell.approach, cell.data)] = cell

    def cell(self, dataset: str, approach: str, data: str) -> Optional[CellResult]:
        return self.cells.get((dataset, approach, data))

    def complete(self, approach: str, data: str) -> bool:
        return all((c := self.cell(d, approach, data)) is not None and c.status == "ok"
                   for d in self.datasets)

    def values(self, approach: str, data: str, metric: str) -> dict:
        return {d: self.cells[(d, approach, data)].scores[metric] for d in self.datasets}

    def summary(self, approach: str, data: str, metric: str, kind: str) -> Optional[float]:
        """S_avg (kind=Average) or S_wc (kind=Worst-Case); None when any cell is missing."""
        if not self.complete(approach, data):
            return None
        values = self.values(approach, data, metric)
        return summary_avg(values) if kind == AVERAGE else summary_worst_case(values)

    def rows(self) -> list:
        """Rendered rows: dataset rows in registration order, then Average, then Worst-Case."""
        out = []
        for d in self.datasets:
            for name, data in self.approaches:
                c = self.cell(d, name, data)
                if c is None or c.status != "ok":
                    vals = ["failed"] * len(METRICS)
                    status = "failed" if c is not None else "missing"
                else:
                    vals = [_pct(c.scores[m]) for m in METRICS]
                    status = "ok"
                out.append([d, name, data, *vals, status])
        for kind in (AVERAGE, WORST_CASE):
            for name, data in self.approaches:
                vals = [self.summary(name, data, m, kind) for m in METRICS]
                if any(v is None for v in vals):
                    out.append([kind, name, data, *(["incomplete"] * len(METRICS)), "incomplete"])
                else:
                    out.append([kind, name, data, *[_pct(v) for v in vals], "ok"])
        return out

    def select(self, approach: str, data: str) -> "BenchmarkReport":
        """Sub-report holding one (approach, data) row group."""
        if (approach, data) not in self.approaches:
            raise ValidationError(f"no approach {approach!r} with data {data!r} in report")
        sub = BenchmarkReport(list(self.datasets), [(approach, data)])
        for d in self.datasets:
            if (c := self.cell(d, approach, data)) is not None:
                sub.add(c)
        return sub

    @classmethod
    def from_csv(cls, path_or_text) -> "BenchmarkReport":
        """Rebuild a report from its CSV rendering (dataset rows only; summaries are recomputed)."""
        text = str(path_or_text)
        if "\n" not in text and Path(text).exists():
            text = Path(text).read_text()
        reader = csv.reader(io.StringIO(text))
        header = next(reader)
        if header[:3] != CSV_HEADER[:3]:
            raise ValidationError("not a benchmark report CSV")
        report = cls([], [])
        for row in reader:
            if not row:
                continue
            d, a, data, *vals = row
            vals = vals[:len(METRICS)]
            if d in (AVERAGE, WORST_CASE):
                continue
            if d not in report.datasets:
                report.datasets.append(d)
            if (a, data) not in report.approaches:
                report.approaches.append((a, data))
            try:
                sc = {m: float(v) / 100.0 for m, v in zip(METRICS, vals)}
                report.add(CellResult(d, a, data, "ok", sc))
            except ValueError:
                report.add(CellResult(d, a, data, "failed", error="failed in source report"))
        return report


CSV_HEADER = ["Dataset", "Approach", "Data", *[METRIC_LABELS[m] for m in METRICS], "Status"]


def _pct(x: float) -> str:
    return f"{100.0 * x:.2f}"


# --------------------------------------------------------------------------
# running


def _load_split_samples(descriptor: DatasetDescriptor):
    manifest = SplitManifest.load(descriptor.manifest_path)
    return manifest, {s: load_samples(descriptor, getattr(manifest, s)) for s in ("train", "val", "test")}


def run_cell(approach: Approach, descriptor: DatasetDescriptor, manifest: SplitManifest, splits: dict,
             run_dir: Path, seed: int = 0) -> tuple:
    """Train and test one (approach, dataset) cell; returns (ScoreSet, RunRecord)."""
    run_dir.mkdir(parents=True, exist_ok=True)
    variant = approach.variant
    K = descriptor.K
    record = RunRecord(run_id=run_dir.name, dataset=descriptor.name, variant=variant)
    record.config_hashes["dataset"] = stable_hash(descriptor.to_dict() | {"root_path": None})
    record.config_hashes["splits"] = stable_hash(manifest.to_text())

    scope = approach.preprocessing_scope or DEFAULT_SCOPES[variant]
    all_samples = splits["train"] + splits["val"] + splits["test"]
    transform = fit_variant(
        variant, descriptor,
        train_cubes=lambda: (s.cube for s in splits["train"]),
        all_cubes=lambda: (s.cube for s in all_samples),
        scope=scope, seed=seed)
    transform.save(run_dir / f"preproc_{variant}.json")
    record.preprocessing = {"variant": variant, "scope": scope,
                            "sidecar": f"preproc_{variant}.json",
                            "hsi_normalization": "per-channel min-max (train split)"}
    record.config_hashes["preprocessing"] = stable_hash(transform.to_dict())
    if scope == "whole_dataset":
        record.add_deviation("preprocessing extrema derived from the whole dataset, including test images")
    prepared = {k: [transform.apply_sample(s) for s in v] for k, v in splits.items()}

    if approach.fit is not None:
        model = approach.fit(descriptor, prepared["train"], prepared["val"])
        record.model_config = {"architecture": "custom", "name": approach.name}
        record.status = "trained"
    else:
        cfg = ModelConfig(architecture=approach.architecture, in_channels=transform.out_channels,
                          num_classes=K, pretrain_mode=approach.pretrain_mode,
                          **_model_defaults(approach.architecture, approach.model_for(descriptor.name)))
        model = build_model(cfg, seed=seed)
        if approach.pretrain_mode != "none":
            apply_pretrain(model, approach.pretrain_mode, approach.weights)
        overrides = approach.training_for(descriptor.name)
        tcfg = config_for(descriptor, seed=seed, **overrides)
        if descriptor.name in TABLE_DEFAULTS and overrides:
            record.add_deviation(f"training overrides vs fixed defaults: {overrides}")
        model, record = train(model, prepared["train"], prepared["val"], tcfg, record=record,
                              run_dir=run_dir, num_classes=K)
    score = evaluate(model, prepared["test"], record=record, num_classes=K)
    record.save(run_dir / "record.json")
    return score, record


def _model_defaults(architecture: str, overrides: dict) -> dict:
    base = {"dropout_p": 0.25 if architecture == "runet" else 0.1, "batchnorm": True}
    if architecture == "runet":
        base["base_width"] = 64
    base.update({k: v for k, v in overrides.items() if k != "architecture"})
    return base


def run_benchmark(plan: BenchmarkPlan) -> BenchmarkReport:
    warnings = plan.validate()
    out = Path(plan.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    report = BenchmarkReport(
        datasets=[d.name for d in plan.datasets],
        approaches=[(a.name, a.data_label) for a in plan.approaches],
    )
    prov = report.provenance
    prov["warnings"] = list(warnings)
    prov["seed"] = plan.seed
    prov["zero_support_policy"] = ZERO_SUPPORT_POLICY
    prov["pretraining"] = {
        a.name: {"mode": a.pretrain_mode,
                 "weights": a.weights,
                 "sha256": sha256_file(a.weights) if a.weights and Path(a.weights).exists() else None}
        for a in plan.approaches}
    prov["hyperparameters"] = {}
    prov["compute"] = {}
    prov["local_conventions"] = [
        "full-spectrum inputs min-max normalized per channel over the train split",
        "PCA1 fitted on min-max normalized train-split pixels (<= 2,000,000 sampled)",
        "pseudo-RGB extrema over the whole dataset",
        "augmentation: horizontal flip with probability 0.1",
        "early stopping on validation macro Jaccard",
        f"macro means exclude classes without ground truth and predictions ({ZERO_SUPPORT_POLICY})",
    ]

    jobs = []
    for desc in plan.datasets:
        try:
            manifest, splits = _load_split_samples(desc)
        except Exception as e:  # whole dataset unavailable: every cell fails, visibly
            for a in plan.approaches:
                report.add(CellResult(desc.name, a.name, a.data_label, "failed", error=str(e)))
            continue
        for a in plan.approaches:
            jobs.append((a, desc, manifest, splits))

    def run(job):
        a, desc, manifest, splits = job
        run_dir = out / "runs" / f"{desc.name}__{_slug(a.name)}__{a.variant}"
        try:
            score, record = run_cell(a, desc, manifest, splits, run_dir, seed=plan.seed)
            cell = CellResult(desc.name, a.name, a.data_label, "ok", score.summary(),
                              record_path=str(run_dir / "record.json"))
            return cell, record
        except Exception as e:
            log.error("cell %s / %s failed: %s", desc.name, a.name, e)
            log.debug(traceback.format_exc())
            return CellResult(desc.name, a.name, a.data_label, "failed",
                              error=f"{type(e).__name__}: {e}"), None

    if plan.parallelism > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(plan.parallelism) as pool:
            results = list(pool.map(run, jobs))
    else:
        results = [run(j) for j in jobs]

    for cell, record in results:
        report.add(cell)
        if record is not None:
            key = f"{cell.dataset} / {cell.approach} / {cell.data}"
            prov["hyperparameters"][key] = {"model": record.model_config, "train": record.train_config,
                                            "deviations": record.deviations}
            prov["compute"][key] = {"wall_clock_s": round(record.wall_clock_s, 2),
                                    "peak_memory_mb": round(record.peak_memory_mb, 1),
                                    "hardware": record.hardware}
    prov["failed_cells"] = [f"{c.dataset} / {c.approach} / {c.data}: {c.error}"
                            for c in report.cells.values() if c.status != "ok"]
    return report


def _slug(name: str) -> str:
    return "".join(ch if ch.isalnum() or ch in "-_" else "_" for ch in name)


# --------------------------------------------------------------------------
# rendering


def _check_summaries(report: BenchmarkReport, rows: list) -> None:
    for row in rows:
        if row[0] not in (AVERAGE, WORST_CASE) or row[-1] != "ok":
            continue
        for m, rendered in zip(METRICS, row[3:3 + len(METRICS)]):
            values = report.values(row[1], row[2], m)
            fn = summary_avg if row[0] == AVERAGE else summary_worst_case
            if _pct(fn(values)) != rendered:
                raise AssertionError(f"summary row {row[:2]} {m} inconsistent with its cells")


def render_csv(report: BenchmarkReport) -> str:
    rows = report.rows()
    _check_summaries(report, rows)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_HEADER)
    writer.writerows(rows)
    return buf.getvalue()


def render_provenance(report: BenchmarkReport) -> str:
    prov = report.provenance
    lines = ["## Provenance", ""]
    if not prov:
        lines.append("No provenance recorded.")
        return "\n".join(lines) + "\n"
    for key in ("warnings", "local_conventions", "failed_cells"):
        items = prov.get(key) or []
        lines.append(f"### {key.replace('_', ' ').capitalize()}")
        lines.extend([f"- {x}" for x in items] or ["- none"])
        lines.append("")
    lines.append("### Pre-training disclosure")
    for name, info in (prov.get("pretraining") or {}).items():
        lines.append(f"- {name}: mode={info['mode']}, weights={info['weights']}, sha256={info['sha256']}")
    lines.append("")
    lines.append("### Hyperparameters per cell")
    for key, info in (prov.get("hyperparameters") or {}).items():
        lines.append(f"- {key}: model={info['model']}, train={info['train']}")
        for dev in info.get("deviations") or []:
            lines.append(f"  - deviation: {dev}")
    lines.append("")
    lines.append("### Compute")
    for key, info in (prov.get("compute") or {}).items():
        lines.append(f"- {key}: {info['wall_clock_s']} s, peak {info['peak_memory_mb']} MB, {info['hardware']}")
    return "\n".join(lines) + "\n"


def render_markdown(report: BenchmarkReport) -> str:
    rows = report.rows()
    _check_summaries(report, rows)
    header = CSV_HEADER
    lines = ["# Benchmark scores (%) on the test splits", "",
             "| " + " | ".join(header) + " |",
             "|" + "|".join(["---"] * 3 + ["---:"] * len(METRICS) + ["---"]) + "|"]
    for row in rows:
        lines.append("| " + " | ".join(row) + " |")
    lines.append("")
    return "\n".join(lines) + "\n" + render_provenance(report)


def emit_report(report: BenchmarkReport, out_dir, formats: Sequence[str] = ("csv", "markdown"),
                figures: bool = True) -> list:
    """Write report.csv / report.md / provenance.md (and a summary figure); returns the paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for fmt in formats:
        if fmt == "csv":
            p = out / "report.csv"
            p.write_text(render_csv(report))
        elif fmt == "markdown":
            p = out / "report.md"
            p.write_text(render_markdown(report))
        else:
            raise ValidationError(f"unknown report format {fmt!r}")
        paths.append(p)
    p = out / "provenance.md"
    p.write_text(render_provenance(report))
    paths.append(p)
    if figures:
        from .plotting import plot_report_jaccard

        paths.append(plot_report_jaccard(report, out / "report_jaccard.png"))
    return paths


# --------------------------------------------------------------------------
# comparison


@dataclass
class DeltaTable:
    """Signed percentage-point deltas (b - a) on the rendered two-decimal values."""

    rows: list  # (group, label_a, label_b, {metric: delta})

    def render(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["Group", "A", "B", *[f"delta {METRIC_LABELS[m]}" for m in METRICS]])
        for group, a, b, deltas in self.rows:
            w.writerow([group, a, b, *[f"{deltas[m]:+.2f}" for m in METRICS]])
        return buf.getvalue()

    def delta(self, group: str, metric: str) -> float:
        for row in self.rows:
            if row[0] == group:
                return row[3][metric]
        raise KeyError(group)


def _rendered(report: BenchmarkReport) -> dict:
    out = {}
    for row in report.rows():
        if row[-1] == "ok":
            out[(row[0], row[1], row[2])] = {m: float(v) for m, v in zip(METRICS, row[3:3 + len(METRICS)])}
    return out


def compare_runs(a: BenchmarkReport, b: BenchmarkReport, approach_a: Optional[tuple] = None,
                 approach_b: Optional[tuple] = None) -> DeltaTable:
    """Per-cell and per-summary deltas (b - a) between two reports.

    Rows are matched by (group, approach, data). When both reports hold a single approach,
    or ``approach_a``/``approach_b`` name (approach, data) pairs, those two are paired instead.
    Deltas use the rendered two-decimal percentages.
    """
    ra, rb = _rendered(a), _rendered(b)
    if approach_a is None and approach_b is None and len(a.approaches) == 1 and len(b.approaches) == 1:
        approach_a, approach_b = tuple(a.approaches[0]), tuple(b.approaches[0])
    # summaries are only comparable over the same dataset set
    groups = [d for d in a.datasets if d in b.datasets]
    if groups and set(a.datasets) == set(b.datasets):
        groups += [AVERAGE, WORST_CASE]
    pairs = []
    if approach_a is not None or approach_b is not None:
        approach_a = tuple(approach_a or approach_b)
        approach_b = tuple(approach_b or approach_a)
        for g in groups:
            if (g, *approach_a) in ra and (g, *approach_b) in rb:
                pairs.append(((g, *approach_a), (g, *approach_b)))
    else:
        pairs = [(k, k) for k in ra if k in rb and k[0] in groups]
    if not pairs:
        raise ValidationError("nothing to compare")
    rows = []
    for ka, kb in pairs:
        va, vb = ra[ka], rb[kb]
        rows.append((ka[0], f"{ka[1]} {ka[2]}", f"{kb[1]} {kb[2]}", {m: round(vb[m] - va[m], 2) for m in METRICS}))
    return DeltaTable(rows)


def load_reference_table() -> BenchmarkReport:
    """Published per-dataset test scores shipped with the package."""
    return BenchmarkReport.from_csv((Path(__file__).parent / "reference" / "table3.csv").read_text())
