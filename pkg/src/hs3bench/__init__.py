"""Benchmark harness for semantic segmentation of hyperspectral driving scenes."""

__version__ = "0.1.0"

from .core import (  # noqa: E402
    BENCHMARK_DATASETS, IGNORE, ClassCatalog, DatasetDescriptor, LabelMap, Sample, SpectralCube,
    builtin_descriptor, validate_sample,
)
from .dataset_io import (  # noqa: E402
    FixtureSpec, SplitManifest, generate_fixture, list_samples, load_sample, load_samples, make_splits,
)
from .errors import HS3Error, ProtocolViolation, RuntimeFailure, ValidationError  # noqa: E402
from .metrics import ConfusionMatrix, ScoreSet, scores, summary_avg, summary_worst_case  # noqa: E402
from .preprocessing import (  # noqa: E402
    VariantTransform, apply_pca1, compute_extrema, fit_pca1, fit_variant, normalize_minmax, synthesize_prgb,
)

__all__ = [
    "BENCHMARK_DATASETS",
    "IGNORE",
    "ClassCatalog",
    "DatasetDescriptor",
    "LabelMap",
    "Sample",
    "SpectralCube",
    "builtin_descriptor",
    "validate_sample",
    "FixtureSpec",
    "SplitManifest",
    "generate_fixture",
    "list_samples",
    "load_sample",
    "load_samples",
    "make_splits",
    "HS3Error",
    "ProtocolViolation",
    "RuntimeFailure",
    "ValidationError",
    "ConfusionMatrix",
    "ScoreSet",
    "scores",
    "summary_avg",
    "summary_worst_case",
    "VariantTransform",
    "apply_pca1",
    "compute_extrema",
    "fit_pca1",
    "fit_variant",
    "normalize_minmax",
    "synthesize_prgb",
]
