"""Shared domain types: spectral cubes, label maps, class catalogs, dataset descriptors."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

import numpy as np
import yaml

from .errors import SchemaMismatch, ValidationError

LABEL_DTYPE = np.uint8
# Single global ignore sentinel; class 0 stays a real class.
IGNORE = int(np.iinfo(LABEL_DTYPE).max)
CUBE_DTYPE = np.float32

DESCRIPTOR_DIR = Path(__file__).parent / "descriptors"
BENCHMARK_DATASETS = ("hyko2", "hcv", "hsidrive")


def _frozen(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class SpectralCube:
    """H x W x C array of per-pixel spectra stored as float32."""

    values: np.ndarray
    band_centers: Optional[tuple] = None

    def __post_init__(self):
        v = np.array(self.values, dtype=CUBE_DTYPE, copy=True)
        if v.ndim == 2:
            v = v[:, :, None]
        if v.ndim != 3:
            raise SchemaMismatch(f"schema mismatch: cube must be 3-D, got shape {v.shape}")
        object.__setattr__(self, "values", _frozen(v))
        if self.band_centers is not None:
            object.__setattr__(self, "band_centers", tuple(float(b) for b in self.band_centers))

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def channels(self) -> int:
        return self.values.shape[2]

    def violations(self) -> list[str]:
        out = []
        if self.channels < 1:
            out.append("cube has no channels")
        if not np.all(np.isfinite(self.values)):
            out.append("non-finite cube values")
        if self.band_centers is not None:
            bc = np.asarray(self.band_centers)
            if len(bc) != self.channels:
                out.append("band_centers length differs from channel count")
            elif np.any(np.diff(bc) <= 0):
                out.append("band_centers not strictly increasing")
        return out


@dataclass(frozen=True)
class LabelMap:
    """H x W map of class indices; IGNORE marks pixels excluded from loss and metrics."""

    labels: np.ndarray

    def __post_init__(self):
        lab = np.asarray(self.labels)
        if lab.ndim != 2:
            raise SchemaMismatch(f"schema mismatch: label map must be 2-D, got shape {lab.shape}")
        if lab.size and (lab.min() < 0 or lab.max() > IGNORE):
            raise SchemaMismatch("schema mismatch: label values outside label dtype range")
        object.__setattr__(self, "labels", _frozen(lab.astype(LABEL_DTYPE, copy=True)))

    @property
    def height(self) -> int:
        return self.labels.shape[0]

    @property
    def width(self) -> int:
        return self.labels.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.labels.shape

    def violations(self, num_classes: int) -> list[str]:
        bad = (self.labels >= num_classes) & (self.labels != IGNORE)
        if np.any(bad):
            vals = sorted(set(int(v) for v in np.unique(self.labels[bad])))
            return [f"invalid class index {vals}"]
        return []


@dataclass(frozen=True)
class ClassCatalog:
    """Ordered class list. Unevaluated classes are mapped to IGNORE at load time.

    Evaluated classes get consecutive indices 0..K-1 in catalog order.
    """

    classes: tuple  # of (name, evaluated)

    def __post_init__(self):
        object.__setattr__(self, "classes", tuple((str(n), bool(e)) for n, e in self.classes))
        names = [n for n, _ in self.classes]
        if len(set(names)) != len(names):
            raise ValidationError("class names must be unique")
        if not any(e for _, e in self.classes):
            raise ValidationError("at least one class must be evaluated")

    @property
    def K(self) -> int:
        return sum(1 for _, e in self.classes if e)

    @property
    def names(self) -> list[str]:
        """Names of the evaluated classes, in index order."""
        return [n for n, e in self.classes if e]

    @property
    def ignored_names(self) -> list[str]:
        return [n for n, e in self.classes if not e]

    def raw_lookup(self) -> np.ndarray:
        """Table mapping raw catalog position -> evaluated index (IGNORE for dropped classes)."""
        table = np.full(IGNORE + 1, IGNORE, dtype=LABEL_DTYPE)
        k = 0
        for i, (_, evaluated) in enumerate(self.classes):
            if evaluated:
                table[i] = k
                k += 1
        return table


@dataclass(frozen=True)
class DatasetDescriptor:
    name: str
    catalog: ClassCatalog
    expected_channels: int
    prgb_bands: tuple
    split_fractions: tuple  # (train, val, test)
    split_seed: int
    root_path: Path
    adapter: str = "hs3f"
    image_size: Optional[tuple] = None
    spectral_range_nm: Optional[tuple] = None
    n_images: Optional[int] = None
    fixed_test_split: bool = False
    manifest_file: str = "splits.txt"
    layout: dict = field(default_factory=dict)
    training: dict = field(default_factory=dict)
    notes: str = ""

    def __post_init__(self):
        object.__setattr__(self, "root_path", Path(self.root_path))
        object.__setattr__(self, "prgb_bands", tuple(int(b) for b in self.prgb_bands))
        object.__setattr__(self, "split_fractions", tuple(float(f) for f in self.split_fractions))
        problems = self.violations()
        if problems:
            raise ValidationError(f"descriptor {self.name!r}: " + "; ".join(problems))

    def violations(self) -> list[str]:
        out = []
        b = self.prgb_bands
        if len(b) != 3 or len(set(b)) != 3:
            out.append("prgb_bands must be three distinct indices")
        elif any(i < 0 or i >= self.expected_channels for i in b):
            out.append("prgb_bands index out of range")
        f = self.split_fractions
        if len(f) != 3 or any(x < 0 for x in f) or not math.isclose(sum(f), 1.0, abs_tol=1e-9):
            out.append("split_fractions must be three nonnegative values summing to 1")
        if self.expected_channels < 1:
            out.append("expected_channels must be >= 1")
        return out

    @property
    def K(self) -> int:
        return self.catalog.K

    @property
    def manifest_path(self) -> Path:
        return self.root_path / self.manifest_file

    def with_root(self, root) -> "DatasetDescriptor":
        from dataclasses import replace

        return replace(self, root_path=Path(root))

    def to_dict(self) -> dict:
        d = {
            "name": self.name,
            "adapter": self.adapter,
            "classes": [{"name": n, "evaluated": e} for n, e in self.catalog.classes],
            "expected_channels": self.expected_channels,
            "prgb_bands": list(self.prgb_bands),
            "split_fractions": {
                "train": self.split_fractions[0],
                "val": self.split_fractions[1],
                "test": self.split_fractions[2],
            },
            "split_seed": self.split_seed,
            "root_path": str(self.root_path),
            "fixed_test_split": self.fixed_test_split,
            "manifest_file": self.manifest_file,
        }
        if self.image_size is not None:
            d["image_size"] = list(self.image_size)
        if self.spectral_range_nm is not None:
            d["spectral_range_nm"] = list(self.spectral_range_nm)
        if self.n_images is not None:
            d["n_images"] = self.n_images
        if self.layout:
            d["layout"] = dict(self.layout)
        if self.training:
            d["training"] = dict(self.training)
        if self.notes:
            d["notes"] = self.notes
        return d

    @classmethod
    def from_dict(cls, d: dict[str, Any], root=None) -> "DatasetDescriptor":
        fr = d["split_fractions"]
        if isinstance(fr, dict):
            fr = (fr["train"], fr["val"], fr["test"])
        catalog = ClassCatalog(
            tuple((c["name"], c.get("evaluated", True)) for c in d["classes"])
        )
        return cls(
            name=d["name"],
            catalog=catalog,
            expected_channels=int(d["expected_channels"]),
            prgb_bands=tuple(d["prgb_bands"]),
            split_fractions=tuple(fr),
            split_seed=int(d.get("split_seed", 0)),
            root_path=Path(root if root is not None else d.get("root_path", ".")),
            adapter=d.get("adapter", "hs3f"),
            image_size=tuple(d["image_size"]) if d.get("image_size") else None,
            spectral_range_nm=tuple(d["spectral_range_nm"]) if d.get("spectral_range_nm") else None,
            n_images=d.get("n_images"),
            fixed_test_split=bool(d.get("fixed_test_split", False)),
            manifest_file=d.get("manifest_file", "splits.txt"),
            layout=dict(d.get("layout") or {}),
            training=dict(d.get("training") or {}),
            notes=d.get("notes", ""),
        )

    def save(self, path) -> None:
        """Write as YAML; the root is omitted so the file resolves relative to its directory."""
        d = self.to_dict()
        d.pop("root_path")
        Path(path).write_text(yaml.safe_dump(d, sort_keys=False))

    @classmethod
    def load(cls, path, root=None) -> "DatasetDescriptor":
        path = Path(path)
        with open(path) as fh:
            d = yaml.safe_load(fh)
        if root is None and "root_path" not in d:
            root = path.parent
        return cls.from_dict(d, root=root)


def builtin_descriptor(name: str, root=None) -> DatasetDescriptor:
    """One of the shipped benchmark descriptors (hyko2, hcv, hsidrive)."""
    path = DESCRIPTOR_DIR / f"{name}.yaml"
    if not path.exists():
        raise ValidationError(f"unknown dataset {name!r}")
    return DatasetDescriptor.load(path, root=root if root is not None else Path("."))


@dataclass(frozen=True)
class Sample:
    cube: SpectralCube
    labels: LabelMap
    id: str


@dataclass
class ValidationReport:
    violations: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    def __bool__(self) -> bool:
        return self.ok


def validate_sample(sample: Sample, descriptor: DatasetDescriptor) -> ValidationReport:
    """Collect every invariant violation of a sample; never raises."""
    v = []
    v.extend(sample.cube.violations())
    if sample.cube.channels != descriptor.expected_channels:
        v.append(
            f"channel count {sample.cube.channels} != expected {descriptor.expected_channels}"
        )
    if (sample.cube.height, sample.cube.width) != sample.labels.shape:
        v.append(
            f"shape mismatch: cube {sample.cube.height}x{sample.cube.width} "
            f"vs labels {sample.labels.height}x{sample.labels.width}"
        )
    v.extend(sample.labels.violations(descriptor.K))
    if not sample.id:
        v.append("empty sample id")
    return ValidationReport(v)


def as_values(x) -> np.ndarray:
    """Raw array from a SpectralCube or anything array-like."""
    return x.values if isinstance(x, SpectralCube) else np.asarray(x)
