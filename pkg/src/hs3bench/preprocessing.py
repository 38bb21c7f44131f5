"""Data variants: full-spectrum min-max normalization, PCA1 reduction, pseudo-RGB synthesis.

Also holds training-time augmentation.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .core import DatasetDescriptor, LabelMap, Sample, SpectralCube, as_values
from .errors import DegenerateSpectra, InvalidBand, SchemaMismatch, ValidationError

SCOPES = ("whole_dataset", "train_split")
VARIANTS = ("hsi", "pca1", "prgb")
DEFAULT_PCA_MAX_PIXELS = 2_000_000


def _check_scope(scope: str) -> str:
    if scope not in SCOPES:
        raise ValidationError(f"unknown scope {scope!r}, expected one of {SCOPES}")
    return scope


@dataclass(frozen=True)
class ChannelExtrema:
    p_min: np.ndarray
    p_max: np.ndarray
    scope: str = "train_split"

    def __post_init__(self):
        lo = np.asarray(self.p_min, dtype=np.float64).ravel()
        hi = np.asarray(self.p_max, dtype=np.float64).ravel()
        if lo.shape != hi.shape:
            raise SchemaMismatch("schema mismatch: p_min and p_max differ in length")
        if not (np.all(np.isfinite(lo)) and np.all(np.isfinite(hi))) or np.any(lo > hi):
            raise ValidationError("extrema must be finite with p_min <= p_max")
        _check_scope(self.scope)
        object.__setattr__(self, "p_min", lo)
        object.__setattr__(self, "p_max", hi)

    @property
    def channels(self) -> int:
        return len(self.p_min)

    def select(self, bands: Sequence[int]) -> "ChannelExtrema":
        bands = list(bands)
        return ChannelExtrema(self.p_min[bands], self.p_max[bands], self.scope)

    def to_dict(self) -> dict:
        return {"kind": "extrema", "scope": self.scope,
                "p_min": self.p_min.tolist(), "p_max": self.p_max.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "ChannelExtrema":
        return cls(np.array(d["p_min"]), np.array(d["p_max"]), d["scope"])


@dataclass(frozen=True)
class PcaModel:
    mean: np.ndarray
    component: np.ndarray
    fit_scope: str = "train_split"
    explained_variance: float = float("nan")
    n_pixels: int = 0
    seed: Optional[int] = None

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=np.float64).ravel()
        comp = np.asarray(self.component, dtype=np.float64).ravel()
        if mean.shape != comp.shape:
            raise SchemaMismatch("schema mismatch: PCA mean and component differ in length")
        if abs(np.linalg.norm(comp) - 1.0) > 1e-6:
            raise ValidationError("PCA component must have unit norm")
        _check_scope(self.fit_scope)
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "component", comp)

    @property
    def channels(self) -> int:
        return len(self.mean)

    def to_dict(self) -> dict:
        return {"kind": "pca1", "scope": self.fit_scope, "mean": self.mean.tolist(),
                "component": self.component.tolist(),
                "explained_variance": self.explained_variance,
                "n_pixels": self.n_pixels, "seed": self.seed}

    @classmethod
    def from_dict(cls, d: dict) -> "PcaModel":
        return cls(np.array(d["mean"]), np.array(d["component"]), d["scope"],
                   d.get("explained_variance", float("nan")), d.get("n_pixels", 0), d.get("seed"))


# --------------------------------------------------------------------------
# min-max normalization


def compute_extrema(cubes: Iterable, scope: str = "whole_dataset") -> ChannelExtrema:
    """Exact per-channel min and max over every pixel of every cube."""
    _check_scope(scope)
    lo = hi = None
    for cube in cubes:
        v = as_values(cube)
        v = v.reshape(-1, v.shape[-1])
        if lo is None:
            lo, hi = v.min(axis=0).astype(np.float64), v.max(axis=0).astype(np.float64)
            continue
        if v.shape[-1] != len(lo):
            raise SchemaMismatch(f"schema mismatch: {v.shape[-1]} channels vs {len(lo)}")
        np.minimum(lo, v.min(axis=0), out=lo)
        np.maximum(hi, v.max(axis=0), out=hi)
    if lo is None:
        raise ValidationError("compute_extrema needs at least one cube")
    return ChannelExtrema(lo, hi, scope)


def normalize_minmax(values, extrema: ChannelExtrema) -> np.ndarray:
    """(p - p_min) / (p_max - p_min) per channel, unclipped.

    A constant channel (p_max == p_min) maps to 0 everywhere.
    """
    p = np.asarray(as_values(values), dtype=np.float64)
    if p.shape[-1] != extrema.channels:
        raise SchemaMismatch(f"schema mismatch: {p.shape[-1]} channels vs extrema {extrema.channels}")
    span = extrema.p_max - extrema.p_min
    constant = span == 0
    out = (p - extrema.p_min) / np.where(constant, 1.0, span)
    out[..., constant] = 0.0
    return out


def synthesize_prgb(cube, descriptor: DatasetDescriptor, extrema: ChannelExtrema) -> SpectralCube:
    """Pick the descriptor's (r, g, b) bands and min-max normalize each.

    ``extrema`` may cover either the full spectrum or just the three selected bands.
    """
    v = as_values(cube)
    bands = list(descriptor.prgb_bands)
    if any(b >= v.shape[-1] or b < 0 for b in bands):
        raise InvalidBand(f"invalid band: {bands} for a cube with {v.shape[-1]} channels")
    if extrema.channels == v.shape[-1]:
        extrema = extrema.select(bands)
    elif extrema.channels != 3:
        raise SchemaMismatch("schema mismatch: extrema must cover 3 or all bands")
    return SpectralCube(normalize_minmax(v[..., bands], extrema))


# --------------------------------------------------------------------------
# PCA1


class _Moments:
    """Streaming mean/scatter with pairwise (Chan et al.) merging in float64."""

    def __init__(self, c: int):
        self.n = 0
        self.mean = np.zeros(c)
        self.scatter = np.zeros((c, c))

    def add(self, x: np.ndarray) -> None:
        m = len(x)
        if m == 0:
            return
        x = x.astype(np.float64)
        mu = x.mean(axis=0)
        d = x - mu
        s = d.T @ d
        delta = mu - self.mean
        n = self.n + m
        self.scatter += s + np.outer(delta, delta) * (self.n * m / n)
        self.mean += delta * (m / n)
        self.n = n


def fit_pca1(cubes: Iterable, scope: str = "train_split", max_pixels: Optional[int] = DEFAULT_PCA_MAX_PIXELS,
             seed: int = 0, total_pixels: Optional[int] = None) -> PcaModel:
    """First principal axis of the pixel covariance.

    When the pixel count exceeds ``max_pixels`` each pixel is kept independently with
    probability max_pixels / total (seeded). ``total_pixels`` is needed for that when
    ``cubes`` is a one-shot iterator.
    """
    _check_scope(scope)
    if total_pixels is None and isinstance(cubes, Sequence):
        total_pixels = sum(as_values(c).shape[0] * as_values(c).shape[1] for c in cubes)
    rate = 1.0
    if max_pixels is not None and total_pixels and total_pixels > max_pixels:
        rate = max_pixels / total_pixels
    rng = np.random.default_rng(seed)
    mom = None
    for cube in cubes:
        v = as_values(cube)
        x = v.reshape(-1, v.shape[-1])
        if mom is None:
            mom = _Moments(x.shape[1])
        elif x.shape[1] != len(mom.mean):
            raise SchemaMismatch(f"schema mismatch: {x.shape[1]} channels vs {len(mom.mean)}")
        if rate < 1.0:
            x = x[rng.random(len(x)) < rate]
        mom.add(x)
    if mom is None or mom.n < 2:
        raise ValidationError("fit_pca1 needs at least two pixels")
    cov = mom.scatter / (mom.n - 1)
    evals, evecs = np.linalg.eigh(cov)
    scale = max(1.0, float(np.abs(cov).max()))
    if evals[-1] <= 1e-12 * scale:
        raise DegenerateSpectra("degenerate spectra: pixel covariance is zero")
    comp = evecs[:, -1]
    comp = comp / np.linalg.norm(comp)
    nz = np.flatnonzero(np.abs(comp) > 1e-12)
    if comp[nz[0]] < 0:
        comp = -comp
    return PcaModel(mom.mean.copy(), comp, scope, float(evals[-1]), int(mom.n),
                    seed if rate < 1.0 else None)


def apply_pca1(cube, model: PcaModel) -> SpectralCube:
    v = as_values(cube)
    if v.shape[-1] != model.channels:
        raise SchemaMismatch(f"schema mismatch: cube has {v.shape[-1]} channels, PCA model {model.channels}")
    out = (v.astype(np.float64) - model.mean) @ model.component
    return SpectralCube(out[..., None])


# --------------------------------------------------------------------------
# fitted-variant bundle + sidecar


@dataclass
class VariantTransform:
    """Everything needed to turn a raw cube into model input for one data variant."""

    variant: str
    extrema: Optional[ChannelExtrema] = None
    pca: Optional[PcaModel] = None
    prgb_bands: Optional[tuple] = None
    seed: Optional[int] = None
    meta: dict = field(default_factory=dict)

    @property
    def out_channels(self) -> int:
        if self.variant == "pca1":
            return 1
        if self.variant == "prgb":
            return 3
        return self.extrema.channels

    def __call__(self, cube) -> SpectralCube:
        v = as_values(cube)
        if self.variant == "hsi":
            return SpectralCube(normalize_minmax(v, self.extrema))
        if self.variant == "pca1":
            return apply_pca1(normalize_minmax(v, self.extrema), self.pca)
        if self.variant == "prgb":
            bands = list(self.prgb_bands)
            if any(b >= v.shape[-1] for b in bands):
                raise InvalidBand(f"invalid band: {bands} for a cube with {v.shape[-1]} channels")
            return SpectralCube(normalize_minmax(v[..., bands], self.extrema))
        raise ValidationError(f"unknown variant {self.variant!r}")

    def apply_sample(self, sample: Sample) -> Sample:
        return Sample(self(sample.cube), sample.labels, sample.id)

    def to_dict(self) -> dict:
        d = {"variant": self.variant, "seed": self.seed, "meta": self.meta}
        if self.extrema is not None:
            d["extrema"] = self.extrema.to_dict()
        if self.pca is not None:
            d["pca"] = self.pca.to_dict()
        if self.prgb_bands is not None:
            d["prgb_bands"] = list(self.prgb_bands)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "VariantTransform":
        return cls(
            d["variant"],
            ChannelExtrema.from_dict(d["extrema"]) if "extrema" in d else None,
            PcaModel.from_dict(d["pca"]) if "pca" in d else None,
            tuple(d["prgb_bands"]) if "prgb_bands" in d else None,
            d.get("seed"),
            d.get("meta", {}),
        )

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def load(cls, path) -> "VariantTransform":
        return cls.from_dict(json.loads(Path(path).read_text()))


DEFAULT_SCOPES = {"hsi": "train_split", "pca1": "train_split", "prgb": "whole_dataset"}


def fit_variant(variant: str, descriptor: DatasetDescriptor, train_cubes, all_cubes=None,
                scope: Optional[str] = None, seed: int = 0,
                max_pixels: Optional[int] = DEFAULT_PCA_MAX_PIXELS) -> VariantTransform:
    """Fit the preprocessing for one data variant.

    ``train_cubes`` and ``all_cubes`` are callables returning fresh iterables so the data
    can be streamed more than once. Scope ``whole_dataset`` reads ``all_cubes``.
    """
    if variant not in VARIANTS:
        raise ValidationError(f"unknown variant {variant!r}, expected one of {VARIANTS}")
    scope = _check_scope(scope or DEFAULT_SCOPES[variant])
    source = all_cubes if scope == "whole_dataset" else train_cubes
    if source is None:
        raise ValidationError(f"scope {scope} needs the full dataset")
    if variant == "prgb":
        bands = list(descriptor.prgb_bands)
        if any(b >= descriptor.expected_channels for b in bands):
            raise InvalidBand(f"invalid band: {bands}")
        ext = compute_extrema((as_values(c)[..., bands] for c in source()), scope)
        return VariantTransform("prgb", extrema=ext, prgb_bands=tuple(bands), seed=seed,
                                meta={"dataset": descriptor.name})
    n_pixels = 0

    def counted():
        nonlocal n_pixels
        for c in source():
            n_pixels += as_values(c).shape[0] * as_values(c).shape[1]
            yield c

    ext = compute_extrema(counted(), scope)
    if variant == "hsi":
        return VariantTransform("hsi", extrema=ext, seed=seed, meta={"dataset": descriptor.name})
    pca = fit_pca1((normalize_minmax(c, ext) for c in source()), scope, max_pixels=max_pixels,
                   seed=seed, total_pixels=n_pixels)
    return VariantTransform("pca1", extrema=ext, pca=pca, seed=seed,
                            meta={"dataset": descriptor.name, "pca_input": "minmax-normalized"})


# --------------------------------------------------------------------------
# augmentation

TRANSFORMS = ("hflip",)


@dataclass(frozen=True)
class AugmentationPolicy:
    probability: float = 0.1
    transforms: tuple = ("hflip",)

    def __post_init__(self):
        if not 0.0 <= self.probability <= 1.0:
            raise ValidationError("augmentation probability must lie in [0, 1]")
        object.__setattr__(self, "transforms", tuple(self.transforms))
        unknown = set(self.transforms) - set(TRANSFORMS)
        if unknown:
            raise ValidationError(f"unknown transforms {sorted(unknown)}")


def _hflip(cube: np.ndarray, labels: np.ndarray):
    return cube[:, ::-1], labels[:, ::-1]


_TRANSFORM_FNS = {"hflip": _hflip}


def augment(sample: Sample, policy: AugmentationPolicy, rng: np.random.Generator,
            force: bool = False) -> Sample:
    """Apply one geometric transform to cube and labels together with ``policy.probability``."""
    if not policy.transforms:
        return sample
    if not force and (policy.probability <= 0.0 or rng.random() >= policy.probability):
        return sample
    name = policy.transforms[int(rng.integers(len(policy.transforms)))]
    cube, labels = _TRANSFORM_FNS[name](sample.cube.values, sample.labels.labels)
    return Sample(SpectralCube(cube, sample.cube.band_centers), LabelMap(labels), sample.id)


def augment_arrays(cube: np.ndarray, labels: np.ndarray, policy: AugmentationPolicy,
                   rng: np.random.Generator):
    """Array-level version used by the training loader."""
    if not policy.transforms or policy.probability <= 0.0 or rng.random() >= policy.probability:
        return cube, labels
    name = policy.transforms[int(rng.integers(len(policy.transforms)))]
    return _TRANSFORM_FNS[name](cube, labels)
