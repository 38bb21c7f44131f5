import numpy as np
import pytest
import torch
import torchvision

from hs3bench.errors import CheckpointMismatch, ValidationError
from hs3bench.models import (
    ModelConfig, apply_pretrain, argmax_labels, build_model, load_checkpoint, output_parameters,
    predict_labels, save_checkpoint, set_train_mode, trainable_parameter_count,
)
from hs3bench.core import IGNORE


def forward(model, H, W, C, seed=0):
    x = torch.from_numpy(np.random.default_rng(seed).random((1, C, H, W)).astype(np.float32))
    with torch.no_grad():
        return model(x)


def dl3(C=3, K=10, **kw):
    return build_model(ModelConfig("dl3", C, K, dropout_p=0.1, **kw), seed=0)


# --------------------------------------------------------------------------
# shapes


@pytest.mark.parametrize("arch", ["runet", "dl3"])
@pytest.mark.parametrize("C,K", [(1, 2), (3, 9), (15, 10), (25, 19)])
def test_shape_contract_small_grid(arch, C, K):
    kw = {"base_width": 8} if arch == "runet" else {}
    m = build_model(ModelConfig(arch, C, K, **kw), seed=0).eval()
    for H, W in ((32, 32), (32, 96), (64, 32)):
        assert forward(m, H, W, C).shape == (1, K, H, W)


def test_runet_25_channels_9_classes():
    m = build_model(ModelConfig("runet", 25, 9, base_width=16), seed=0).eval()
    assert forward(m, 64, 64, 25).shape == (1, 9, 64, 64)


def test_dl3_128_channels_19_classes():
    m = dl3(128, 19).eval()
    assert forward(m, 256, 256, 128).shape == (1, 19, 256, 256)


@pytest.mark.parametrize("arch", ["runet", "dl3"])
def test_odd_sizes_are_padded_and_cropped(arch):
    kw = {"base_width": 8} if arch == "runet" else {}
    m = build_model(ModelConfig(arch, 4, 3, **kw), seed=0).eval()
    assert forward(m, 50, 37, 4).shape == (1, 3, 50, 37)


def test_runet_has_no_transposed_convolutions():
    m = build_model(ModelConfig("runet", 3, 2, base_width=8))
    assert not any(isinstance(x, torch.nn.ConvTranspose2d) for x in m.modules())
    assert any(isinstance(x, torch.nn.Dropout2d) or isinstance(x, torch.nn.Dropout) for x in m.modules())


def test_eval_mode_is_deterministic():
    m = build_model(ModelConfig("runet", 5, 3, base_width=8, dropout_p=0.25), seed=0).eval()
    a, b = forward(m, 32, 32, 5), forward(m, 32, 32, 5)
    assert torch.equal(a, b)


def test_builds_are_reproducible():
    a = build_model(ModelConfig("dl3", 7, 4), seed=3).state_dict()
    b = build_model(ModelConfig("dl3", 7, 4), seed=3).state_dict()
    assert all(torch.equal(a[k], b[k]) for k in a)


def test_config_invariants():
    with pytest.raises(ValidationError):
        ModelConfig("runet", 3, 5, pretrain_mode="backbone_bb")
    with pytest.raises(ValidationError):
        ModelConfig("dl3", 0, 5)
    with pytest.raises(ValidationError):
        ModelConfig("dl3", 3, 1)
    with pytest.raises(ValidationError):
        ModelConfig("dl3", 3, 3, dropout_p=1.0)


def test_pca1_input_trains_one_step():
    m = build_model(ModelConfig("runet", 1, 3, base_width=8), seed=0)
    opt = torch.optim.AdamW(m.parameters())
    x = torch.rand(2, 1, 32, 32)
    loss = torch.nn.functional.cross_entropy(m(x), torch.zeros(2, 32, 32, dtype=torch.long))
    loss.backward()
    opt.step()
    assert torch.isfinite(loss)


# --------------------------------------------------------------------------
# DL3 adapter


def test_identity_adapter_passes_input_through():
    m = dl3(3, 5, pretrain_mode="backbone_bb")
    x = torch.rand(2, 3, 8, 8)
    assert torch.equal(m.adapter(x), x)


def adapter_gradient_check(model, eps=1e-6):
    """Analytic vs central finite-difference gradient of a scalar loss w.r.t. adapter weights."""
    model = model.double().eval()
    g = torch.Generator().manual_seed(0)
    x = torch.rand(1, model.adapter.in_channels, 32, 32, generator=g, dtype=torch.float64)
    w = torch.rand(1, model.classifier.out_channels, 32, 32, generator=g, dtype=torch.float64)

    def loss():
        return (model(x) * w).sum()

    model.zero_grad()
    loss().backward()
    worst = 0.0
    weight = model.adapter.weight
    for idx in [(0, 0, 0, 0), (1, min(1, weight.shape[1] - 1), 0, 0), (2, weight.shape[1] - 1, 0, 0)]:
        analytic = weight.grad[idx].item()
        with torch.no_grad():
            orig = weight[idx].item()
            weight[idx] = orig + eps
            up = loss().item()
            weight[idx] = orig - eps
            down = loss().item()
            weight[idx] = orig
        numeric = (up - down) / (2 * eps)
        rel = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-12)
        worst = max(worst, rel)
    return worst


def test_adapter_gradient_finite_difference():
    assert adapter_gradient_check(dl3(5, 4)) < 1e-3


# --------------------------------------------------------------------------
# pre-training


def test_backbone_bb_copies_backbone_from_torchvision_state():
    src = torchvision.models.mobilenet_v2(weights=None).state_dict()
    m = dl3(3, 10, pretrain_mode="backbone_bb")
    apply_pretrain(m, "backbone_bb", {"state_dict": src})
    own = m.state_dict()
    for k, v in own.items():
        if k.startswith("backbone."):
            assert torch.equal(v, src["features." + k[len("backbone."):]])
    assert trainable_parameter_count(m) == sum(p.numel() for p in m.parameters())


def _segmentation_checkpoint(tmp_path, C=3, K=19):
    src = dl3(C, K)
    path = tmp_path / "seg.pt"
    save_checkpoint(src, path)
    return src, path


def test_transfer_pt_freezes_all_but_output(tmp_path):
    src, path = _segmentation_checkpoint(tmp_path)
    m = dl3(3, 10, pretrain_mode="transfer_pt")
    apply_pretrain(m, "transfer_pt", path)
    assert trainable_parameter_count(m) == sum(p.numel() for p in output_parameters(m).values())
    assert m.classifier.out_channels == 10
    s = src.state_dict()
    for k, v in m.state_dict().items():
        if not k.startswith("classifier."):
            assert torch.equal(v, s[k])
    assert m.pretrain_info["source_sha256"]


def frozen_steps_unchanged(model, steps=5):
    before = {k: v.clone() for k, v in model.state_dict().items() if not k.startswith("classifier.")}
    opt = torch.optim.AdamW(model.parameters(), lr=1e-2)
    set_train_mode(model, True)
    g = torch.Generator().manual_seed(0)
    for _ in range(steps):
        x = torch.rand(2, model.adapter.in_channels, 32, 32, generator=g)
        y = torch.randint(0, model.classifier.out_channels, (2, 32, 32), generator=g)
        opt.zero_grad()
        torch.nn.functional.cross_entropy(model(x), y).backward()
        opt.step()
    after = model.state_dict()
    return all(torch.equal(before[k], after[k]) for k in before)


def test_transfer_pt_training_leaves_features_bit_identical(tmp_path):
    _, path = _segmentation_checkpoint(tmp_path)
    m = dl3(3, 10, pretrain_mode="transfer_pt")
    apply_pretrain(m, "transfer_pt", path)
    head = m.classifier.weight.clone()
    assert frozen_steps_unchanged(m, 5)
    assert not torch.equal(head, m.classifier.weight)


def test_transfer_pt_shape_mismatch_lists_tensors(tmp_path):
    _, path = _segmentation_checkpoint(tmp_path, C=3)
    m = dl3(25, 10, pretrain_mode="transfer_pt")
    with pytest.raises(CheckpointMismatch, match="adapter.weight"):
        apply_pretrain(m, "transfer_pt", path)


def test_pretrain_needs_dl3():
    m = build_model(ModelConfig("runet", 3, 2, base_width=8))
    with pytest.raises(ValidationError):
        apply_pretrain(m, "backbone_bb", {})


# --------------------------------------------------------------------------
# checkpoints and readout


def test_checkpoint_round_trip(tmp_path):
    m = build_model(ModelConfig("runet", 4, 3, base_width=8), seed=1).eval()
    digest = save_checkpoint(m, tmp_path / "c.pt", {"epoch": 3})
    assert len(digest) == 64
    back = load_checkpoint(tmp_path / "c.pt").eval()
    assert back.config == m.config
    assert torch.equal(forward(m, 32, 32, 4), forward(back, 32, 32, 4))
    assert back.checkpoint_meta == {"epoch": 3}


def test_argmax_unique_and_ties():
    logits = np.zeros((1, 3, 3))
    logits[0, 0] = [0.1, 0.5, 0.2]
    logits[0, 1] = [0.7, 0.7, 0.1]
    logits[0, 2] = [0.0, 0.3, 0.3]
    assert argmax_labels(logits).labels.tolist() == [[1, 0, 1]]


def test_predict_labels_never_ignore():
    m = build_model(ModelConfig("runet", 2, 4, base_width=8), seed=0)
    lab = predict_labels(m, np.random.default_rng(0).random((20, 24, 2)).astype(np.float32))
    assert lab.labels.shape == (20, 24)
    assert lab.labels.max() < 4 and not np.any(lab.labels == IGNORE)
