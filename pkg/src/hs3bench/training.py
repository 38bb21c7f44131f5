"""Training with validation-driven early stopping, run records and one-shot test evaluation."""

from __future__ import annotations

import copy
import csv
import hashlib
import json
import logging
import math
import platform
import resource
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .core import IGNORE, Sample, as_values
from .errors import NumericalDivergence, ProtocolViolation, ValidationError
from .metrics import ConfusionMatrix, ScoreSet, scores
from .models import predict_labels, save_checkpoint, set_train_mode
from .preprocessing import AugmentationPolicy, augment_arrays

log = logging.getLogger(__name__)

# Fixed per-dataset training parameters; patience is this harness's choice.
TABLE_DEFAULTS = {
    "hyko2": dict(learning_rate=1e-3, optimizer_epsilon=1e-8, batch_size=16, max_epochs=500, patience=20),
    "hcv": dict(learning_rate=1e-3, optimizer_epsilon=1e-4, batch_size=4, max_epochs=100, patience=10),
    "hsidrive": dict(learning_rate=1e-3, optimizer_epsilon=1e-8, batch_size=32, max_epochs=300, patience=20),
}


@dataclass
class TrainConfig:
    dataset: str
    learning_rate: float = 1e-3
    optimizer_epsilon: float = 1e-8
    batch_size: int = 16
    max_epochs: int = 100
    early_stopping: bool = True
    patience: int = 20
    optimizer: str = "adamw"
    loss: str = "cross_entropy"
    seed: int = 0
    augmentation: AugmentationPolicy = field(default_factory=AugmentationPolicy)
    weight_decay: Optional[float] = None  # None keeps the optimizer default
    crop: Optional[int] = None  # random square training crops for memory-limited hardware

    def __post_init__(self):
        if isinstance(self.augmentation, dict):
            self.augmentation = AugmentationPolicy(**self.augmentation)
        if self.learning_rate <= 0:
            raise ValidationError("learning_rate must be > 0")
        if self.batch_size < 1:
            raise ValidationError("batch_size must be >= 1")
        if self.early_stopping and self.patience < 1:
            raise ValidationError("patience must be >= 1 with early stopping")
        if self.optimizer != "adamw":
            raise ValidationError(f"unsupported optimizer {self.optimizer!r}")
        if self.loss != "cross_entropy":
            raise ValidationError(f"unsupported loss {self.loss!r}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["augmentation"] = {"probability": self.augmentation.probability,
                             "transforms": list(self.augmentation.transforms)}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})

    def replace(self, **overrides) -> "TrainConfig":
        d = self.to_dict()
        d.update({k: v for k, v in overrides.items() if v is not None})
        return TrainConfig.from_dict(d)


def default_config(dataset: str, **overrides) -> TrainConfig:
    """The fixed training parameters for one benchmark dataset."""
    if dataset not in TABLE_DEFAULTS:
        raise ValidationError(f"no defaults for dataset {dataset!r}")
    return TrainConfig(dataset=dataset, augmentation=AugmentationPolicy(0.1, ("hflip",)),
                       **TABLE_DEFAULTS[dataset]).replace(**overrides)


def config_for(descriptor, **overrides) -> TrainConfig:
    """Table defaults for benchmark datasets, else the descriptor's ``training`` block."""
    if descriptor.name in TABLE_DEFAULTS:
        base = default_config(descriptor.name)
        base = base.replace(**descriptor.training) if descriptor.training else base
    else:
        base = TrainConfig(dataset=descriptor.name, **descriptor.training)
    return base.replace(**overrides)


def stable_hash(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()[:16]


@dataclass
class RunRecord:
    run_id: str
    dataset: str = ""
    variant: str = ""
    data_source: dict = field(default_factory=dict)  # descriptor file, root, manifest
    model_config: dict = field(default_factory=dict)
    train_config: dict = field(default_factory=dict)
    preprocessing: dict = field(default_factory=dict)
    config_hashes: dict = field(default_factory=dict)
    pretrain: dict = field(default_factory=lambda: {"mode": "none", "source_sha256": None})
    trace: list = field(default_factory=list)
    best_epoch: Optional[int] = None
    best_val_jaccard: Optional[float] = None
    stopped_epoch: Optional[int] = None
    status: str = "created"
    test_scores: Optional[dict] = None
    test_consumed: bool = False
    deviations: list = field(default_factory=list)
    wall_clock_s: float = 0.0
    peak_memory_mb: float = 0.0
    hardware: str = ""
    checkpoint_sha256: Optional[str] = None

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunRecord":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "RunRecord":
        return cls.from_dict(json.loads(text))

    def save(self, path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(self.to_json() + "\n")

    @classmethod
    def load(cls, path) -> "RunRecord":
        return cls.from_json(Path(path).read_text())

    def add_deviation(self, text: str) -> None:
        if text not in self.deviations:
            self.deviations.append(text)


def hardware_string() -> str:
    dev = f"cuda:{torch.cuda.get_device_name(0)}" if torch.cuda.is_available() else "cpu"
    return f"{platform.platform()} | {platform.processor() or platform.machine()} | torch {torch.__version__} | {dev} | threads {torch.get_num_threads()}"


def peak_memory_mb() -> float:
    # ru_maxrss is KiB on Linux
    return resource.getrusage(resource.RUSAGE_SELF).ru_maxrss / 1024.0


class EarlyStopping:
    """Track the best monitored value; ``step`` returns True once training should stop."""

    def __init__(self, patience: int, enabled: bool = True):
        self.patience = patience
        self.enabled = enabled
        self.best = -math.inf
        self.best_epoch = None
        self.bad_epochs = 0

    def step(self, epoch: int, value: float) -> bool:
        if value > self.best:
            self.best, self.best_epoch, self.bad_epochs = value, epoch, 0
        else:
            self.bad_epochs += 1
        return self.enabled and self.bad_epochs >= self.patience

    @property
    def improved(self) -> bool:
        return self.bad_epochs == 0


def masked_cross_entropy(logits: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Mean pixelwise cross-entropy over non-IGNORE pixels (0 when there are none)."""
    total = F.cross_entropy(logits, target, ignore_index=IGNORE, reduction="sum")
    count = (target != IGNORE).sum().clamp(min=1)
    return total / count


def _stack(samples: Sequence[Sample]):
    x = np.stack([as_values(s.cube) for s in samples]).astype(np.float32)
    y = np.stack([s.labels.labels for s in samples]).astype(np.int64)
    return x, y


def _batches(n: int, batch_size: int, gen: torch.Generator):
    order = torch.randperm(n, generator=gen).tolist()
    starts = list(range(0, n, batch_size))
    # a lone trailing sample joins the previous batch (batch norm needs > 1 value per channel)
    if len(starts) > 1 and n - starts[-1] == 1:
        starts.pop()
    for j, i in enumerate(starts):
        end = starts[j + 1] if j + 1 < len(starts) else n
        yield order[i:end]


def _random_crop(x, y, size, rng):
    h, w = y.shape[-2:]
    if size >= h and size >= w:
        return x, y
    r = int(rng.integers(0, max(1, h - size + 1)))
    c = int(rng.integers(0, max(1, w - size + 1)))
    return x[r:r + size, c:c + size], y[r:r + size, c:c + size]


def confusion(model, samples: Sequence[Sample], K: int) -> ConfusionMatrix:
    cm = ConfusionMatrix(K)
    for s in samples:
        cm.update(s.labels, predict_labels(model, s.cube))
    return cm


def _validate(model, samples, K) -> ScoreSet:
    return scores(confusion(model, samples, K))


def train(model, train_samples: Sequence[Sample], val_samples: Sequence[Sample], config: TrainConfig,
          record: Optional[RunRecord] = None, run_dir=None, num_classes: Optional[int] = None):
    """Fit ``model`` and return (model holding the best weights, RunRecord).

    Validation macro Jaccard after every epoch drives checkpoint selection and early stopping.
    Test data is never seen here.
    """
    if not train_samples:
        raise ValidationError("no training data")
    ids_train = {s.id for s in train_samples}
    if ids_train & {s.id for s in val_samples}:
        raise ProtocolViolation("train and validation samples overlap")
    K = num_classes or model.config.num_classes
    in_ch = as_values(train_samples[0].cube).shape[-1]
    if in_ch != model.config.in_channels:
        raise ValidationError(f"model expects {model.config.in_channels} channels, data has {in_ch}")

    record = record or RunRecord(run_id="run")
    record.dataset = record.dataset or config.dataset
    record.model_config = model.config.to_dict()
    record.train_config = config.to_dict()
    record.config_hashes.update({"model": stable_hash(record.model_config),
                                 "train": stable_hash(record.train_config)})
    record.pretrain = dict(getattr(model, "pretrain_info", record.pretrain))
    record.hardware = hardware_string()
    record.status = "training"
    if config.crop:
        record.add_deviation(f"random {config.crop}px training crops instead of full images")
    monitor_split = "val"
    if not val_samples:
        record.add_deviation("no validation split: monitoring training macro Jaccard")
        monitor_split = "train"

    run_dir = Path(run_dir) if run_dir is not None else None
    ckpt_path = run_dir / "ckpt" / "best.pt" if run_dir else None

    torch.manual_seed(config.seed)
    gen = torch.Generator().manual_seed(config.seed)
    rng = np.random.default_rng(config.seed)
    x_all, y_all = _stack(train_samples)
    params = [p for p in model.parameters() if p.requires_grad]
    kw = {} if config.weight_decay is None else {"weight_decay": config.weight_decay}
    opt = torch.optim.AdamW(params, lr=config.learning_rate, eps=config.optimizer_epsilon, **kw)
    stopper = EarlyStopping(config.patience, config.early_stopping)
    best_state = copy.deepcopy(model.state_dict())
    t0 = time.perf_counter()

    for epoch in range(1, config.max_epochs + 1):
        set_train_mode(model, True)
        losses, weights = [], []
        for idx in _batches(len(train_samples), config.batch_size, gen):
            xs, ys = [], []
            for i in idx:
                x, y = augment_arrays(x_all[i], y_all[i], config.augmentation, rng)
                if config.crop:
                    x, y = _random_crop(x, y, config.crop, rng)
                xs.append(np.ascontiguousarray(x))
                ys.append(np.ascontiguousarray(y))
            xb = torch.from_numpy(np.stack(xs)).permute(0, 3, 1, 2)
            yb = torch.from_numpy(np.stack(ys))
            opt.zero_grad(set_to_none=True)
            loss = masked_cross_entropy(model(xb), yb)
            if not torch.isfinite(loss):
                record.status = "diverged"
                record.stopped_epoch = epoch
                record.wall_clock_s = time.perf_counter() - t0
                raise NumericalDivergence(epoch, record)
            loss.backward()
            opt.step()
            losses.append(loss.item())
            weights.append(len(idx))
        train_loss = float(np.average(losses, weights=weights))

        monitored = _validate(model, val_samples if val_samples else train_samples, K)
        stop = stopper.step(epoch, monitored.jaccard_macro)
        entry = {"epoch": epoch, "train_loss": train_loss, "monitor": monitor_split,
                 **{f"val_{k}": v for k, v in monitored.summary().items()}}
        record.trace.append(entry)
        log.info("epoch %d loss %.4f %s J_M %.4f", epoch, train_loss, monitor_split,
                 monitored.jaccard_macro)
        if stopper.improved:
            best_state = copy.deepcopy(model.state_dict())
            if ckpt_path:
                record.checkpoint_sha256 = save_checkpoint(model, ckpt_path,
                                                           {"epoch": epoch, "run_id": record.run_id})
        if stop:
            break

    model.load_state_dict(best_state)
    set_train_mode(model, False)
    record.best_epoch = stopper.best_epoch
    record.best_val_jaccard = stopper.best
    record.stopped_epoch = epoch
    record.status = "trained"
    record.wall_clock_s = time.perf_counter() - t0
    record.peak_memory_mb = peak_memory_mb()
    if run_dir:
        write_trace_csv(record, run_dir / "trace.csv")
        record.save(run_dir / "record.json")
    return model, record


def write_trace_csv(record: RunRecord, path) -> None:
    if not record.trace:
        return
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(record.trace[0]))
        writer.writeheader()
        writer.writerows(record.trace)


def evaluate(model, test_samples: Sequence[Sample], record: Optional[RunRecord] = None,
             num_classes: Optional[int] = None, override: bool = False) -> ScoreSet:
    """Score a model on the test split, at most once per RunRecord unless overridden."""
    K = num_classes or model.config.num_classes
    if num_classes is not None and hasattr(model, "config") and model.config.num_classes != num_classes:
        raise ValidationError(
            f"checkpoint predicts {model.config.num_classes} classes, dataset has {num_classes}")
    if record is not None and record.test_consumed:
        if not override:
            raise ProtocolViolation("test reuse")
        record.add_deviation("test split evaluated more than once (override)")
    result = scores(confusion(model, test_samples, K))
    if record is not None:
        record.test_consumed = True
        record.test_scores = result.to_dict()
        record.status = "evaluated"
    return result
