"""Segmentation baselines, pre-training modes, checkpoints and argmax readout."""

from __future__ import annotations

import hashlib
import io
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional, Union

import numpy as np
import torch
import torch.nn as nn

from ..core import LabelMap, as_values
from ..errors import CheckpointMismatch, ValidationError
from .dl3 import DeepLabV3Plus
from .runet import RUNet

ARCHITECTURES = ("runet", "dl3")
PRETRAIN_MODES = ("none", "backbone_bb", "transfer_pt")
OUTPUT_LAYER = "classifier"
CHECKPOINT_FORMAT = "hs3bench-checkpoint"


@dataclass(frozen=True)
class ModelConfig:
    architecture: str = "runet"
    in_channels: int = 3
    num_classes: int = 2
    dropout_p: float = 0.25
    batchnorm: bool = True
    pretrain_mode: str = "none"
    base_width: int = 64

    def __post_init__(self):
        if self.architecture not in ARCHITECTURES:
            raise ValidationError(f"unknown architecture {self.architecture!r}")
        if self.pretrain_mode not in PRETRAIN_MODES:
            raise ValidationError(f"unknown pretrain mode {self.pretrain_mode!r}")
        if self.in_channels < 1:
            raise ValidationError("in_channels must be >= 1")
        if self.num_classes < 2:
            raise ValidationError("num_classes must be >= 2")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ValidationError("dropout_p must lie in [0, 1)")
        if self.pretrain_mode != "none" and self.architecture != "dl3":
            raise ValidationError("pre-training modes are only defined for dl3")
        if self.base_width < 1:
            raise ValidationError("base_width must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**{k: d[k] for k in cls.__dataclass_fields__ if k in d})


def build_runet(config: ModelConfig) -> RUNet:
    if config.architecture != "runet":
        raise ValidationError("build_runet needs architecture 'runet'")
    model = RUNet(config.in_channels, config.num_classes, base_width=config.base_width,
                  batchnorm=config.batchnorm, dropout_p=config.dropout_p)
    model.config = config
    return model


def build_dl3(config: ModelConfig) -> DeepLabV3Plus:
    if config.architecture != "dl3":
        raise ValidationError("build_dl3 needs architecture 'dl3'")
    identity = config.in_channels == 3 and config.pretrain_mode != "none"
    model = DeepLabV3Plus(config.in_channels, config.num_classes, dropout_p=config.dropout_p,
                          identity_adapter=identity)
    model.config = config
    return model


def build_model(config: ModelConfig, seed: Optional[int] = None) -> nn.Module:
    """Build either baseline; with a seed the initial parameters are reproducible."""
    if seed is not None:
        torch.manual_seed(seed)
    if config.architecture == "runet":
        return build_runet(config)
    return build_dl3(config)


# --------------------------------------------------------------------------
# parameters and freezing


def output_parameters(model: nn.Module) -> dict:
    return {f"{OUTPUT_LAYER}.{n}": p for n, p in getattr(model, OUTPUT_LAYER).named_parameters()}


def trainable_parameter_count(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters() if p.requires_grad)


def freeze_all_but_output(model: nn.Module) -> None:
    for name, p in model.named_parameters():
        p.requires_grad = name.startswith(OUTPUT_LAYER + ".")
    model.frozen_features = True


def set_train_mode(model: nn.Module, mode: bool = True) -> nn.Module:
    """Like ``model.train(mode)``, but frozen feature layers stay in eval mode.

    Keeps batch-norm statistics and dropout of a frozen feature extractor fixed.
    """
    model.train(mode)
    if mode and getattr(model, "frozen_features", False):
        for name, child in model.named_children():
            if name != OUTPUT_LAYER:
                child.eval()
    return model


# --------------------------------------------------------------------------
# checkpoints


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def save_checkpoint(model: nn.Module, path, meta: Optional[dict] = None) -> str:
    """Write the canonical container; returns its sha256."""
    buf = io.BytesIO()
    torch.save({
        "format": CHECKPOINT_FORMAT,
        "version": 1,
        "config": model.config.to_dict(),
        "state": {k: v.detach().cpu() for k, v in model.state_dict().items()},
        "frozen_features": bool(getattr(model, "frozen_features", False)),
        "meta": dict(meta or {}),
    }, buf)
    data = buf.getvalue()
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_bytes(data)
    return hashlib.sha256(data).hexdigest()


def read_checkpoint(path) -> dict:
    blob = torch.load(path, map_location="cpu", weights_only=True)
    if not isinstance(blob, dict):
        raise ValidationError(f"{path} is not a checkpoint")
    return blob


def load_checkpoint(path) -> nn.Module:
    blob = read_checkpoint(path)
    if blob.get("format") != CHECKPOINT_FORMAT:
        raise ValidationError(f"{path} is not an hs3bench checkpoint")
    model = build_model(ModelConfig.from_dict(blob["config"]))
    model.load_state_dict(blob["state"])
    if blob.get("frozen_features"):
        freeze_all_but_output(model)
    model.checkpoint_meta = blob.get("meta", {})
    return model


def import_torchvision_mobilenet(state: dict) -> dict:
    """Map torchvision MobileNetV2 names (features.N.*) onto canonical backbone names."""
    out = {}
    for k, v in state.items():
        if not k.startswith("features."):
            continue
        idx = int(k.split(".")[1])
        if idx < 18:
            out["backbone." + k[len("features."):]] = v
    return out


def _source_state(weights_source) -> tuple[dict, Optional[str]]:
    if isinstance(weights_source, (str, Path)):
        digest = sha256_file(weights_source)
        blob = torch.load(weights_source, map_location="cpu", weights_only=True)
    else:
        blob, digest = weights_source, None
    if isinstance(blob, dict) and blob.get("format") == CHECKPOINT_FORMAT:
        return blob["state"], digest
    if isinstance(blob, dict) and "state_dict" in blob:
        blob = blob["state_dict"]
    if any(k.startswith("features.") for k in blob):
        blob = import_torchvision_mobilenet(blob)
    return dict(blob), digest


def _copy_matching(model: nn.Module, source: dict, names: list) -> None:
    own = model.state_dict()
    bad = []
    for n in names:
        if n not in source:
            bad.append(f"{n} (missing)")
        elif tuple(source[n].shape) != tuple(own[n].shape):
            bad.append(f"{n} {tuple(source[n].shape)} != {tuple(own[n].shape)}")
    if bad:
        raise CheckpointMismatch(bad)
    with torch.no_grad():
        for n in names:
            own[n].copy_(source[n])


def apply_pretrain(model: nn.Module, mode: str, weights_source: Union[str, Path, dict]) -> nn.Module:
    """Initialize a DL3 model from pre-trained weights.

    backbone_bb: copy backbone tensors from the source, keep everything trainable.
    transfer_pt: copy every tensor from a full segmentation checkpoint, re-initialize
    the output layer for this model's class count and freeze everything else.
    """
    if model.config.architecture != "dl3":
        raise ValidationError("pre-training is only defined for dl3")
    if mode not in ("backbone_bb", "transfer_pt"):
        raise ValidationError(f"unknown pretrain mode {mode!r}")
    source, digest = _source_state(weights_source)
    own = model.state_dict()
    if mode == "backbone_bb":
        _copy_matching(model, source, [n for n in own if n.startswith("backbone.")])
        for p in model.parameters():
            p.requires_grad = True
        model.frozen_features = False
    else:
        _copy_matching(model, source, [n for n in own if not n.startswith(OUTPUT_LAYER + ".")])
        model.classifier.reset_parameters()
        freeze_all_but_output(model)
    model.pretrain_info = {"mode": mode, "source_sha256": digest}
    return model


# --------------------------------------------------------------------------
# inference


def _to_tensor(cubes) -> torch.Tensor:
    arr = np.stack([as_values(c) for c in cubes]).astype(np.float32)
    return torch.from_numpy(arr).permute(0, 3, 1, 2).contiguous()


def predict_logits(model: nn.Module, cube) -> np.ndarray:
    """H x W x K logits for one cube, evaluation mode, no gradients."""
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            out = model(_to_tensor([cube]))[0]
    finally:
        if was_training:
            set_train_mode(model, True)
    return out.permute(1, 2, 0).numpy()


def argmax_labels(logits: np.ndarray) -> LabelMap:
    """Per-pixel argmax; numpy returns the first maximum, so ties go to the lower index."""
    return LabelMap(np.argmax(logits, axis=-1))


def predict_labels(model, cube) -> LabelMap:
    if hasattr(model, "predict"):
        return model.predict(cube)
    return argmax_labels(predict_logits(model, cube))


__all__ = [
    "ARCHITECTURES", "PRETRAIN_MODES", "ModelConfig", "RUNet", "DeepLabV3Plus",
    "build_runet", "build_dl3", "build_model", "apply_pretrain", "predict_labels",
    "predict_logits", "argmax_labels", "save_checkpoint", "load_checkpoint", "read_checkpoint",
    "freeze_all_but_output", "set_train_mode", "trainable_parameter_count", "output_parameters",
    "import_torchvision_mobilenet", "sha256_file",
]
