"""Dataset loading, split manifests and synthetic fixture datasets."""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional

import numpy as np

from .core import (
    CUBE_DTYPE,
    IGNORE,
    LABEL_DTYPE,
    ClassCatalog,
    DatasetDescriptor,
    LabelMap,
    Sample,
    SpectralCube,
    validate_sample,
)
from .errors import (
    DatasetNotFound,
    DecodeError,
    DegenerateSplit,
    SchemaMismatch,
    ValidationError,
)

log = logging.getLogger(__name__)

MAGIC = b"HS3F"
_HEADER = struct.Struct("<4s4I")
SPLITS = ("train", "val", "test")


# --------------------------------------------------------------------------
# HS3F container: magic, little-endian u32 H, W, C, K, float32 cube (H, W, C), uint8 labels (H, W)


def write_hs3f(path, cube: np.ndarray, labels: np.ndarray, num_classes: int) -> None:
    cube = np.ascontiguousarray(cube, dtype="<f4")
    labels = np.ascontiguousarray(labels, dtype=LABEL_DTYPE)
    h, w, c = cube.shape
    if labels.shape != (h, w):
        raise SchemaMismatch("schema mismatch: labels do not match cube shape")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, h, w, c, num_classes))
        fh.write(cube.tobytes())
        fh.write(labels.tobytes())


def read_hs3f(path) -> tuple[np.ndarray, np.ndarray, int]:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as e:
        raise DecodeError(path, str(e)) from e
    if len(raw) < _HEADER.size:
        raise DecodeError(path, "truncated header")
    magic, h, w, c, k = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise DecodeError(path, "bad magic")
    n_cube = h * w * c * 4
    if len(raw) != _HEADER.size + n_cube + h * w:
        raise DecodeError(path, "size does not match header")
    cube = np.frombuffer(raw, dtype="<f4", count=h * w * c, offset=_HEADER.size)
    labels = np.frombuffer(raw, dtype=LABEL_DTYPE, count=h * w, offset=_HEADER.size + n_cube)
    return cube.reshape(h, w, c).astype(CUBE_DTYPE), labels.reshape(h, w).copy(), k


# --------------------------------------------------------------------------
# adapters


class DatasetAdapter:
    """Maps a dataset's on-disk layout to (cube, raw catalog labels) pairs."""

    def list_ids(self, descriptor: DatasetDescriptor) -> list[str]:
        raise NotImplementedError

    def read(self, descriptor: DatasetDescriptor, sample_id: str) -> tuple[np.ndarray, np.ndarray]:
        """Return (H x W x C cube, H x W labels as catalog positions or IGNORE)."""
        raise NotImplementedError


class HS3FAdapter(DatasetAdapter):
    subdir = "samples"

    def list_ids(self, descriptor):
        return [p.stem for p in (descriptor.root_path / self.subdir).glob("*.hs3f")]

    def read(self, descriptor, sample_id):
        cube, labels, _ = read_hs3f(descriptor.root_path / self.subdir / f"{sample_id}.hs3f")
        return cube, labels


class LayoutAdapter(DatasetAdapter):
    """Generic file-layout adapter driven by the descriptor's ``layout`` block.

    Recognised keys: cube_glob, cube_format (mat|h5|npy), cube_key, cube_axes (HWC|CHW),
    label_source ("same" or a pattern using {id}, {dir}, {stem}), label_format (png|npy|mat),
    label_key, unlabeled_values, label_offset.
    """

    defaults: dict = {}

    def _layout(self, descriptor):
        return {**self.defaults, **descriptor.layout}

    def list_ids(self, descriptor):
        lay = self._layout(descriptor)
        root = descriptor.root_path
        return [p.relative_to(root).with_suffix("").as_posix() for p in root.glob(lay["cube_glob"])]

    def _cube_path(self, descriptor, sample_id):
        lay = self._layout(descriptor)
        suffix = Path(lay["cube_glob"]).suffix
        return descriptor.root_path / f"{sample_id}{suffix}"

    def _read_array(self, path: Path, fmt: str, key: Optional[str]):
        if fmt == "npy":
            return np.load(path, allow_pickle=False)
        if fmt == "mat":
            try:
                from scipy.io import loadmat

                return np.asarray(loadmat(str(path))[key])
            except NotImplementedError:
                # MATLAB v7.3 files are HDF5
                return self._read_array(path, "h5", key)
        if fmt == "h5":
            import h5py

            with h5py.File(path, "r") as f:
                return np.asarray(f[key])
        if fmt == "png":
            from PIL import Image

            with Image.open(path) as im:
                return np.asarray(im)
        raise ValueError(f"unknown format {fmt!r}")

    def read(self, descriptor, sample_id):
        lay = self._layout(descriptor)
        cube_path = self._cube_path(descriptor, sample_id)
        try:
            cube = self._read_array(cube_path, lay["cube_format"], lay.get("cube_key"))
        except Exception as e:
            raise DecodeError(cube_path, str(e)) from e
        if cube.ndim == 3 and lay.get("cube_axes", "HWC") == "CHW":
            cube = np.moveaxis(cube, 0, -1)

        source = lay.get("label_source", "same")
        if source == "same":
            label_path = cube_path
            fmt, key = lay["cube_format"], lay.get("label_key")
        else:
            sid = Path(sample_id)
            label_path = descriptor.root_path / source.format(
                id=sample_id, dir=sid.parent.as_posix(), stem=sid.name
            )
            fmt, key = lay.get("label_format", "png"), lay.get("label_key")
        try:
            raw = self._read_array(label_path, fmt, key)
        except Exception as e:
            raise DecodeError(label_path, str(e)) from e
        if raw.ndim == 3:
            raw = raw[..., 0]
        return cube, self._to_positions(raw, lay)

    @staticmethod
    def _to_positions(raw: np.ndarray, lay: dict) -> np.ndarray:
        raw = raw.astype(np.int64)
        unlabeled = np.isin(raw, lay.get("unlabeled_values", []))
        pos = raw - int(lay.get("label_offset", 0))
        pos = np.where(unlabeled | (pos < 0), IGNORE, pos)
        return np.clip(pos, 0, IGNORE).astype(LABEL_DTYPE)


class HyKo2Adapter(LayoutAdapter):
    defaults = {"cube_glob": "*.mat", "cube_format": "mat", "cube_key": "data",
                "cube_axes": "CHW", "label_source": "same", "label_key": "label"}


class HCVAdapter(LayoutAdapter):
    defaults = {"cube_glob": "*/*.h5", "cube_format": "h5", "cube_key": "cube",
                "label_source": "{dir}/{stem}_gray.png", "label_format": "png",
                "train_dir": "train", "test_dir": "test"}


class HSIDriveAdapter(LayoutAdapter):
    defaults = {"cube_glob": "cubes/*.npy", "cube_format": "npy",
                "label_source": "labels/{stem}.png", "label_format": "png"}


ADAPTERS: dict[str, DatasetAdapter] = {
    "hs3f": HS3FAdapter(),
    "layout": LayoutAdapter(),
    "hyko2": HyKo2Adapter(),
    "hcv": HCVAdapter(),
    "hsidrive": HSIDriveAdapter(),
}


def get_adapter(descriptor: DatasetDescriptor) -> DatasetAdapter:
    try:
        return ADAPTERS[descriptor.adapter]
    except KeyError:
        raise ValidationError(f"no adapter registered for {descriptor.adapter!r}") from None


# --------------------------------------------------------------------------
# loading


def list_samples(descriptor: DatasetDescriptor) -> list[str]:
    root = descriptor.root_path
    if not root.is_dir():
        raise DatasetNotFound(f"dataset not found: {root}")
    ids = sorted(get_adapter(descriptor).list_ids(descriptor))
    if not ids:
        raise ValidationError(f"no samples under {root}")
    return ids


def load_sample(descriptor: DatasetDescriptor, sample_id: str) -> Sample:
    cube, positions = get_adapter(descriptor).read(descriptor, sample_id)
    if cube.ndim != 3 or cube.shape[-1] != descriptor.expected_channels:
        raise SchemaMismatch(
            f"schema mismatch: {sample_id} has cube shape {cube.shape}, "
            f"expected {descriptor.expected_channels} channels"
        )
    labels = descriptor.catalog.raw_lookup()[positions]
    sample = Sample(SpectralCube(cube), LabelMap(labels), sample_id)
    report = validate_sample(sample, descriptor)
    if not report.ok:
        raise SchemaMismatch(f"schema mismatch: {sample_id}: " + "; ".join(report.violations))
    return sample


def load_samples(descriptor: DatasetDescriptor, ids: Iterable[str]) -> list[Sample]:
    return [load_sample(descriptor, i) for i in ids]


# --------------------------------------------------------------------------
# splits


@dataclass(frozen=True)
class SplitManifest:
    dataset: str
    seed: int
    train: tuple
    val: tuple
    test: tuple

    def __post_init__(self):
        for s in SPLITS:
            object.__setattr__(self, s, tuple(getattr(self, s)))
        sets = [set(getattr(self, s)) for s in SPLITS]
        if any(len(a & b) for a, b in ((sets[0], sets[1]), (sets[0], sets[2]), (sets[1], sets[2]))):
            raise ValidationError("split manifest lists overlap")

    @property
    def sizes(self) -> tuple[int, int, int]:
        return len(self.train), len(self.val), len(self.test)

    def all_ids(self) -> set:
        return set(self.train) | set(self.val) | set(self.test)

    def to_text(self) -> str:
        lines = [f"# dataset: {self.dataset}", f"# seed: {self.seed}"]
        for s in SPLITS:
            lines.append(f"[{s}]")
            lines.extend(getattr(self, s))
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "SplitManifest":
        meta = {}
        parts: dict[str, list] = {s: [] for s in SPLITS}
        current = None
        for line in text.splitlines():
            line = line.strip()
            if not line:
                continue
            if line.startswith("#"):
                key, _, value = line[1:].partition(":")
                meta[key.strip()] = value.strip()
            elif line.startswith("[") and line.endswith("]"):
                current = line[1:-1]
                if current not in parts:
                    raise ValidationError(f"unknown split section {line}")
            elif current is None:
                raise ValidationError("sample id before any split section")
            else:
                parts[current].append(line)
        return cls(meta.get("dataset", ""), int(meta.get("seed", 0)), **parts)

    def save(self, path) -> None:
        Path(path).write_text(self.to_text())

    @classmethod
    def load(cls, path) -> "SplitManifest":
        path = Path(path)
        if not path.exists():
            raise ValidationError(f"split manifest not found: {path}")
        return cls.from_text(path.read_text())


def split_sizes(n: int, fractions) -> list[int]:
    """Largest-remainder apportionment of n items; ties go to the earlier split."""
    exact = [n * f for f in fractions]
    sizes = [int(np.floor(x + 1e-9)) for x in exact]
    rest = n - sum(sizes)
    order = sorted(range(len(exact)), key=lambda i: (-(exact[i] - sizes[i]), i))
    for i in order[:rest]:
        sizes[i] += 1
    return sizes


def make_splits(descriptor: DatasetDescriptor, ids, seed: Optional[int] = None) -> SplitManifest:
    """Seeded shuffle-then-partition. Datasets with a published test partition keep it."""
    ids = sorted(ids)
    if not ids:
        raise ValidationError("no sample ids to split")
    seed = descriptor.split_seed if seed is None else seed
    rng = np.random.default_rng(seed)
    if descriptor.fixed_test_split:
        lay = {**getattr(get_adapter(descriptor), "defaults", {}), **descriptor.layout}
        prefix = lay.get("test_dir", "test").rstrip("/") + "/"
        test = [i for i in ids if i.startswith(prefix)]
        pool = [i for i in ids if not i.startswith(prefix)]
        tr, va, _ = descriptor.split_fractions
        n_train, n_val = split_sizes(len(pool), (tr / (tr + va), va / (tr + va)))
        perm = [pool[j] for j in rng.permutation(len(pool))]
        train, val = perm[:n_train], perm[n_train:]
    else:
        n_train, n_val, n_test = split_sizes(len(ids), descriptor.split_fractions)
        perm = [ids[j] for j in rng.permutation(len(ids))]
        train, val, test = perm[:n_train], perm[n_train:n_train + n_val], perm[n_train + n_val:]
    if not train or not val or not test:
        raise DegenerateSplit(
            f"degenerate split: sizes {len(train)}/{len(val)}/{len(test)} for {len(ids)} ids"
        )
    return SplitManifest(descriptor.name, seed, sorted(train), sorted(val), sorted(test))


# --------------------------------------------------------------------------
# synthetic fixtures


@dataclass(frozen=True)
class FixtureSpec:
    n_images: int = 4
    height: int = 16
    width: int = 16
    channels: int = 8
    K: int = 3
    noise_sigma: float = 0.0
    seed: int = 0
    base_level: float = 0.1

    def __post_init__(self):
        if min(self.n_images, self.height, self.width, self.channels, self.K) < 1:
            raise ValidationError("fixture counts must be >= 1")
        if self.noise_sigma < 0:
            raise ValidationError("noise_sigma must be >= 0")


def class_means(spec: FixtureSpec) -> np.ndarray:
    """K x C mean spectra: a flat base plus one bump at band c mod C.

    The bump height grows with c // C so classes stay distinct when K > C.
    """
    means = np.full((spec.K, spec.channels), spec.base_level, dtype=np.float64)
    for c in range(spec.K):
        means[c, c % spec.channels] += 1.0 + c // spec.channels
    return means


def region_layout(height: int, width: int, k: int, rng: np.random.Generator) -> np.ndarray:
    """Tile an image into k axis-aligned rectangles, return H x W map of class ids.

    Repeatedly cuts the largest rectangle at a random position; classes are shuffled
    over the resulting rectangles so every class appears exactly once.
    """
    if k > height * width:
        raise ValidationError(f"unsatisfiable layout: {k} classes in {height}x{width}")
    rects = [(0, 0, height, width)]
    while len(rects) < k:
        rects.sort(key=lambda r: (r[2] * r[3], -r[0], -r[1]))
        r0, c0, h, w = rects.pop()
        if h >= w and h > 1 or w == 1:
            cut = int(rng.integers(1, h)) if h > 2 else 1
            rects += [(r0, c0, cut, w), (r0 + cut, c0, h - cut, w)]
        else:
            cut = int(rng.integers(1, w)) if w > 2 else 1
            rects += [(r0, c0, h, cut), (r0, c0 + cut, h, w - cut)]
    rects.sort()
    classes = rng.permutation(k)
    out = np.empty((height, width), dtype=LABEL_DTYPE)
    for (r0, c0, h, w), cls in zip(rects, classes):
        out[r0:r0 + h, c0:c0 + w] = cls
    return out


def fixture_arrays(spec: FixtureSpec) -> list[tuple[np.ndarray, np.ndarray]]:
    """Deterministic (cube, labels) pairs for a fixture spec, without touching disk."""
    if spec.K > spec.height * spec.width:
        raise ValidationError(
            f"unsatisfiable layout: {spec.K} classes in {spec.height}x{spec.width}"
        )
    rng = np.random.default_rng(spec.seed)
    means = class_means(spec)
    out = []
    for _ in range(spec.n_images):
        labels = region_layout(spec.height, spec.width, spec.K, rng)
        cube = means[labels]
        if spec.noise_sigma > 0:
            cube = cube + rng.normal(0.0, spec.noise_sigma, size=cube.shape)
        out.append((cube.astype(CUBE_DTYPE), labels))
    return out


def fixture_descriptor(spec: FixtureSpec, root, name: str = "fixture",
                       split_fractions=(0.5, 0.25, 0.25), training: Optional[dict] = None
                       ) -> DatasetDescriptor:
    if spec.channels < 3:
        raise ValidationError("fixture needs at least 3 channels for its pseudo-RGB triplet")
    c = spec.channels
    catalog = ClassCatalog(tuple((f"class{i}", True) for i in range(spec.K)))
    return DatasetDescriptor(
        name=name,
        catalog=catalog,
        expected_channels=c,
        prgb_bands=(c - 1, c // 2, 0),
        split_fractions=tuple(split_fractions),
        split_seed=spec.seed,
        root_path=Path(root),
        adapter="hs3f",
        image_size=(spec.height, spec.width),
        n_images=spec.n_images,
        training=dict(training or {
            "learning_rate": 1e-3, "optimizer_epsilon": 1e-8, "batch_size": 4,
            "max_epochs": 50, "patience": 10,
        }),
        notes=f"synthetic fixture: {spec}",
    )


def generate_fixture(spec: FixtureSpec, root, name: str = "fixture", **descriptor_kw
                     ) -> DatasetDescriptor:
    """Write a fixture dataset (HS3F samples + descriptor.yaml) under ``root``."""
    root = Path(root)
    descriptor = fixture_descriptor(spec, root, name=name, **descriptor_kw)
    samples_dir = root / HS3FAdapter.subdir
    samples_dir.mkdir(parents=True, exist_ok=True)
    width = max(3, len(str(spec.n_images - 1)))
    for i, (cube, labels) in enumerate(fixture_arrays(spec)):
        write_hs3f(samples_dir / f"s{i:0{width}d}.hs3f", cube, labels, spec.K)
    descriptor.save(root / "descriptor.yaml")
    log.info("wrote %d fixture samples to %s", spec.n_images, samples_dir)
    return descriptor
