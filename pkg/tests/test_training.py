import json

import numpy as np
import pytest
import torch

from hs3bench import training
from hs3bench.core import IGNORE, LabelMap, Sample, SpectralCube
from hs3bench.dataset_io import FixtureSpec, fixture_arrays
from hs3bench.errors import NumericalDivergence, ProtocolViolation, ValidationError
from hs3bench.metrics import ConfusionMatrix, scores
from hs3bench.models import ModelConfig, build_model, load_checkpoint
from hs3bench.training import (
    EarlyStopping, RunRecord, TrainConfig, default_config, evaluate, masked_cross_entropy, train,
)


def samples(n=6, K=3, C=4, size=16, sigma=0.01, seed=0, prefix="s"):
    spec = FixtureSpec(n_images=n, height=size, width=size, channels=C, K=K, noise_sigma=sigma, seed=seed)
    return [Sample(SpectralCube(c), LabelMap(l), f"{prefix}{i}") for i, (c, l) in enumerate(fixture_arrays(spec))]


def small_model(C=4, K=3, seed=0):
    return build_model(ModelConfig("runet", C, K, base_width=4), seed=seed)


def cfg(**kw):
    base = dict(dataset="fixture", batch_size=2, max_epochs=3, patience=3, seed=0)
    return TrainConfig(**{**base, **kw})


class ConstantModel:
    """Predicts one class everywhere."""

    def __init__(self, k):
        self.k = k

    def predict(self, cube):
        v = cube.values if hasattr(cube, "values") else cube
        return LabelMap(np.full(v.shape[:2], self.k))


class OracleModel:
    def __init__(self, lookup):
        self.lookup = lookup

    def predict(self, cube):
        return self.lookup[id(cube)]


# --------------------------------------------------------------------------
# fixed defaults


def test_table_defaults():
    hcv = default_config("hcv")
    assert (hcv.learning_rate, hcv.optimizer_epsilon, hcv.batch_size, hcv.max_epochs) == (1e-3, 1e-4, 4, 100)
    hsid = default_config("hsidrive")
    assert (hsid.batch_size, hsid.max_epochs) == (32, 300)
    hyko = default_config("hyko2")
    assert (hyko.optimizer_epsilon, hyko.batch_size, hyko.max_epochs) == (1e-8, 16, 500)
    assert hyko.augmentation.probability == 0.1
    with pytest.raises(ValidationError, match="no defaults"):
        default_config("kitti")


def test_config_round_trip():
    c = default_config("hcv", batch_size=2)
    assert TrainConfig.from_dict(json.loads(json.dumps(c.to_dict()))) == c


# --------------------------------------------------------------------------
# early stopping


def test_early_stopping_rule():
    es = EarlyStopping(3)
    trace = [0.1, 0.2, 0.3, 0.4, 0.5, 0.45, 0.44, 0.43, 0.6]
    stopped = None
    for epoch, v in enumerate(trace, 1):
        if es.step(epoch, v):
            stopped = epoch
            break
    assert stopped == 8 and es.best_epoch == 5


def test_train_stops_at_8_and_restores_epoch_5(monkeypatch, tmp_path):
    trace = iter([0.1, 0.2, 0.3, 0.4, 0.5, 0.45, 0.44, 0.43, 0.9, 0.9])
    weights = {}

    def fake_validate(model, samples_, K):
        v = next(trace)
        weights[len(weights) + 1] = {k: t.clone() for k, t in model.state_dict().items()}
        cm = ConfusionMatrix(2, [[1, 0], [0, 1]])
        s = scores(cm)
        return type(s)(**{**s.__dict__, "jaccard_macro": v})

    monkeypatch.setattr(training, "_validate", fake_validate)
    data = samples(4)
    model, rec = train(small_model(), data[:2], data[2:], cfg(max_epochs=20, patience=3), run_dir=tmp_path)
    assert rec.stopped_epoch == 8 and rec.best_epoch == 5
    assert len(rec.trace) == 8
    final = model.state_dict()
    assert all(torch.equal(final[k], weights[5][k]) for k in final)
    ckpt = load_checkpoint(tmp_path / "ckpt" / "best.pt").state_dict()
    assert all(torch.equal(ckpt[k], weights[5][k]) for k in ckpt)
    assert (tmp_path / "trace.csv").read_text().count("\n") == 9


# --------------------------------------------------------------------------
# loss


def test_masked_loss_ignores_ignore_pixels():
    logits = torch.randn(1, 3, 2, 2)
    t = torch.tensor([[[0, 1], [IGNORE, IGNORE]]])
    ref = torch.nn.functional.cross_entropy(logits[..., 0, :].permute(0, 2, 1).reshape(2, 3),
                                            torch.tensor([0, 1]))
    assert torch.allclose(masked_cross_entropy(logits, t), ref)
    assert masked_cross_entropy(logits, torch.full((1, 2, 2), IGNORE)).item() == 0.0


def test_ignore_pixels_do_not_affect_gradients():
    logits = torch.randn(1, 3, 2, 2, requires_grad=True)
    t = torch.tensor([[[0, 1], [IGNORE, 2]]])
    masked_cross_entropy(logits, t).backward()
    assert torch.all(logits.grad[0, :, 1, 0] == 0)


# --------------------------------------------------------------------------
# training loop


def test_determinism_epoch_one_loss():
    data = samples(6)
    _, a = train(small_model(seed=1), data[:4], data[4:], cfg(max_epochs=1))
    _, b = train(small_model(seed=1), data[:4], data[4:], cfg(max_epochs=1))
    assert a.trace[0]["train_loss"] == b.trace[0]["train_loss"]


def test_train_errors():
    data = samples(4)
    with pytest.raises(ValidationError, match="no training data"):
        train(small_model(), [], data, cfg())
    with pytest.raises(ProtocolViolation):
        train(small_model(), data[:2], data[1:3], cfg())


def test_divergence_aborts_with_partial_record():
    data = samples(4)
    bad = [Sample(SpectralCube(np.full((16, 16, 4), np.inf, np.float32)), s.labels, s.id) for s in data[:2]]
    with pytest.raises(NumericalDivergence, match="numerical divergence") as exc:
        train(small_model(), bad, data[2:], cfg())
    assert exc.value.record.status == "diverged"


def test_record_round_trip(tmp_path):
    data = samples(4)
    _, rec = train(small_model(), data[:2], data[2:], cfg(max_epochs=2), run_dir=tmp_path)
    back = RunRecord.load(tmp_path / "record.json")
    assert back == rec
    assert back.train_config["batch_size"] == 2
    assert back.model_config["architecture"] == "runet"
    assert back.checkpoint_sha256


# --------------------------------------------------------------------------
# evaluation


def test_oracle_scores_one():
    data = samples(3)
    model = OracleModel({id(s.cube): s.labels for s in data})
    s = evaluate(model, data, num_classes=3)
    assert s.summary() == {"acc_micro": 1.0, "acc_macro": 1.0, "f1_macro": 1.0, "jaccard_macro": 1.0}


def test_constant_predictor_on_imbalanced_fixture():
    lab = np.zeros((10, 10), np.uint8)
    lab[0, 0] = 1
    s = Sample(SpectralCube(np.zeros((10, 10, 3))), LabelMap(lab), "x")
    res = evaluate(ConstantModel(0), [s], num_classes=2)
    assert res.acc_micro == 0.99 and res.acc_macro == 0.5


def test_test_split_consumed_once():
    data = samples(2)
    rec = RunRecord("r")
    evaluate(ConstantModel(0), data, record=rec, num_classes=3)
    assert rec.test_consumed
    with pytest.raises(ProtocolViolation, match="protocol violation: test reuse"):
        evaluate(ConstantModel(0), data, record=rec, num_classes=3)
    evaluate(ConstantModel(0), data, record=rec, num_classes=3, override=True)
    assert any("override" in d for d in rec.deviations)
