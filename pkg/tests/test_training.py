import math

import numpy as np
import pytest
import torch

from avwws.backbones import build_model
from avwws.data import load_manifest
from avwws.training import (
    TrainConfig,
    WakeWordClassifier,
    parse_value,
    read_config,
    train,
    weighted_bce,
)
from avwws.validation import NumericError, ValidationError

EPS = 1e-7


def test_bce_reference_values():
    one = torch.tensor([1.0 - EPS], dtype=torch.float64)
    assert weighted_bce(one, torch.tensor([1.0], dtype=torch.float64)).item() == pytest.approx(0.0, abs=1e-6)
    half = torch.tensor([0.5], dtype=torch.float64)
    assert weighted_bce(half, torch.tensor([0.0], dtype=torch.float64)).item() == pytest.approx(5 * math.log(2))
    assert weighted_bce(half, torch.tensor([1.0], dtype=torch.float64)).item() == pytest.approx(math.log(2))


def test_bce_nonnegative_and_weighted(rng):
    p = torch.from_numpy(rng.random(500))
    y = torch.from_numpy(rng.integers(0, 2, 500).astype(np.float64))
    loss = weighted_bce(p, y)
    assert loss.item() >= 0
    q = np.clip(p.numpy(), EPS, 1 - EPS)
    manual = -np.mean(y.numpy() * np.log(q) + 5 * (1 - y.numpy()) * np.log(1 - q))
    assert loss.item() == pytest.approx(manual, rel=1e-9)


def test_bce_gradient_at_half():
    p = torch.tensor([0.5], dtype=torch.float64, requires_grad=True)
    weighted_bce(p, torch.tensor([0.0], dtype=torch.float64)).backward()
    assert p.grad.item() == pytest.approx(10.0, rel=1e-5)
    h = 1e-6
    fd = (weighted_bce(torch.tensor([0.5 + h], dtype=torch.float64), torch.tensor([0.0], dtype=torch.float64))
          - weighted_bce(torch.tensor([0.5 - h], dtype=torch.float64), torch.tensor([0.0], dtype=torch.float64)))
    assert fd.item() / (2 * h) == pytest.approx(p.grad.item(), rel=1e-6)


def test_bce_validation():
    with pytest.raises(ValidationError):
        weighted_bce(torch.tensor([0.5]), torch.tensor([1.0]), w_neg=0.0)


def test_parse_value_and_read_config(tmp_path):
    assert parse_value("3") == 3 and parse_value("1e-3") == 1e-3
    assert parse_value("true") is True and parse_value("none") is None
    assert parse_value("NR,SA") == ("NR", "SA")
    path = tmp_path / "c.cfg"
    path.write_text("# comment\narch = resnet2d34\nlr = 0.01\n\naugment_audio = NS, SA\n")
    cfg = read_config(path)
    assert cfg == {"arch": "resnet2d34", "lr": 0.01, "augment_audio": ("NS", "SA")}
    (tmp_path / "bad.cfg").write_text("no equals sign\n")
    with pytest.raises(ValidationError):
        read_config(tmp_path / "bad.cfg")


def test_train_config_validation():
    with pytest.raises(ValidationError):
        TrainConfig(arch="nope")
    with pytest.raises(ValidationError):
        TrainConfig(batch_size=0)
    assert TrainConfig.from_mapping({"lr": 0.01, "alpha": 0.5}).lr == 0.01
    with pytest.raises(ValidationError):
        TrainConfig(augment_audio=("NR",)).policy()


@pytest.fixture(scope="module")
def records(tiny_dataset):
    _, manifests = tiny_dataset
    return load_manifest(manifests["train"]), load_manifest(manifests["dev"])


def _cfg(**kw):
    base = dict(arch="resnet2d34", modality="audio", epochs=2, batch_size=8, micro_batch_size=8, seed=0)
    base.update(kw)
    return TrainConfig(**base)


def test_two_epochs_two_checkpoints(records, tmp_path):
    tr, dv = records
    ckpts = train(build_model("resnet2d34"), tr[:8], dv, _cfg(), ckpt_dir=tmp_path)
    assert [c.epoch for c in ckpts] == [1, 2]
    assert sorted(p.name for p in tmp_path.iterdir()) == ["epoch001.pt", "epoch002.pt"]
    assert all(math.isfinite(c.dev_loss) for c in ckpts)


def test_training_reduces_loss(records):
    tr, _ = records
    sub = tr[:16]
    torch.manual_seed(0)
    ckpts = train(build_model("resnet2d34"), sub, sub, _cfg(epochs=6, batch_size=16))
    assert ckpts[-1].train_loss < ckpts[0].train_loss


def test_training_is_deterministic(records):
    tr, dv = records

    def run():
        return train(build_model("resnet2d34"), tr[:8], dv[:4], _cfg(epochs=1, deterministic=True))[0]

    a, b = run(), run()
    assert abs(a.dev_loss - b.dev_loss) <= 1e-6
    for k in a.state():
        assert torch.allclose(a.state()[k].double(), b.state()[k].double(), atol=1e-6)


def test_train_rejects_empty_split_and_mismatch(records):
    tr, dv = records
    with pytest.raises(ValidationError):
        train(build_model("resnet2d34"), [], dv, _cfg())
    with pytest.raises(ValidationError):
        train(build_model("resnet2d34"), tr, [], _cfg())
    with pytest.raises(ValidationError):
        train(build_model("resnet2d34"), tr, dv, _cfg(arch="hybrid"))


def test_non_finite_loss_raises(records):
    tr, dv = records
    model = build_model("resnet2d34")
    with torch.no_grad():
        model.head.weight.fill_(float("nan"))
    with pytest.raises(NumericError):
        train(model, tr[:8], dv, _cfg(epochs=1))


def test_estimator_fit_predict_embed(records, tmp_path):
    tr, dv = records
    est = WakeWordClassifier(arch="resnet2d34", epochs=2, batch_size=8, average_top_k=2)
    assert est.get_params()["arch"] == "resnet2d34"
    est.fit(tr[:8], dev=dv)
    proba = est.predict_proba(dv)
    assert proba.shape == (len(dv), 2) and np.allclose(proba.sum(axis=1), 1)
    assert set(est.predict(dv)) <= {0, 1}
    assert est.embed(dv[:2]).shape == (2, 960)
    assert sorted(est.header_["averaged_epochs"]) == [1, 2]
    est.save(tmp_path / "m.pt")
    again = WakeWordClassifier.from_checkpoint(tmp_path / "m.pt")
    np.testing.assert_allclose(again.predict_proba(dv), proba, atol=1e-6)


def test_estimator_not_fitted():
    from sklearn.exceptions import NotFittedError

    with pytest.raises(NotFittedError):
        WakeWordClassifier().predict([])


def test_amp_training_and_time_budget(records):
    tr, dv = records
    ckpts = train(build_model("resnet2d34"), tr[:8], dv, _cfg(epochs=3, amp=True, max_minutes=0.0))
    # a zero budget stops after the first epoch
    assert len(ckpts) == 1 and math.isfinite(ckpts[0].dev_loss)
