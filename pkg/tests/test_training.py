import math

import pytest
import torch
import torch.nn as nn

import moe_robust.training as training
from moe_robust.data import Dataset, make_synthetic
from moe_robust.errors import InvalidArgument, NumericalFailure
from moe_robust.models import ModelConfig, build_model
from moe_robust.moe import moe_layers
from moe_robust.training import TrainConfig, TrainLog, lr_schedule, train

from conftest import tiny_config


def small_data(classes=4, per_class=8, seed=0, shape=(3, 8, 8), separation=1.0):
    tr = make_synthetic(classes, per_class, shape, seed, separation)
    te = make_synthetic(classes, 4, shape, seed, separation, split="test")
    return tr, te


def quick(**kw):
    base = dict(epochs=1, batch_size=8, augment=False, seed=0)
    base.update(kw)
    return TrainConfig(**base)


class TestSchedule:
    def test_examples(self):
        assert lr_schedule(0, 100, 0.1) == 0.1
        assert lr_schedule(100, 100, 0.1) == 0.0
        assert lr_schedule(50, 100, 0.1, 1.0) == pytest.approx(0.05)

    def test_power(self):
        assert lr_schedule(50, 100, 1.0, 2.0) == pytest.approx(0.25)

    def test_floored(self):
        assert lr_schedule(150, 100, 0.1) == 0.0

    def test_monotone(self):
        vals = [lr_schedule(s, 37, 0.3, 0.9) for s in range(38)]
        assert all(a >= b for a, b in zip(vals, vals[1:]))


def test_config_validation():
    with pytest.raises(InvalidArgument):
        TrainConfig(epochs=0)
    with pytest.raises(InvalidArgument):
        TrainConfig(lr0=-1)


def test_zero_lr_leaves_parameters_bitwise():
    model = build_model(tiny_config(), 0)
    before = {k: p.detach().clone() for k, p in model.named_parameters()}
    train(model, small_data()[0], None, quick(lr0=0.0))
    for k, p in model.named_parameters():
        assert torch.equal(p, before[k]), k


def test_degenerate_moe_matches_plain_losses():
    plain = build_model(ModelConfig("tiny", 4, [], (3, 8, 8)), 0)
    moe = build_model(tiny_config(n_experts=1, top_k=1, coeff=0.0), 0)
    src = plain.state_dict()
    dst = moe.state_dict()
    for k in dst:
        s = k.replace("conv4_x.0.experts.0.", "conv4_x.0.")
        if s in src:
            dst[k] = src[s].clone()
    moe.load_state_dict(dst)
    tr, te = small_data()
    cfg = quick(epochs=3, augment=True)
    _, log_plain = train(plain, tr, te, cfg)
    _, log_moe = train(moe, tr, te, cfg)
    assert log_plain.task_losses == pytest.approx(log_moe.task_losses, abs=1e-6)


def test_separable_data_is_learned():
    tr = make_synthetic(4, 40, (3, 8, 8), seed=3, separation=1.0)
    model = build_model(ModelConfig("tiny", 4, [], (3, 8, 8)), 0)
    _, log = train(model, tr, None, TrainConfig(epochs=20, batch_size=32, seed=0))
    assert log.epochs[-1].train_accuracy >= 0.95


def test_deterministic_bitwise():
    tr, te = small_data()
    cfg = quick(epochs=2, augment=True, adversarial=True)
    cfg.attack.steps = 2
    runs = []
    for _ in range(2):
        m = build_model(tiny_config(), 5)
        _, log = train(m, tr, te, cfg)
        runs.append((m.state_dict(), log))
    (a, la), (b, lb) = runs
    for k in a:
        assert torch.equal(a[k], b[k]), k
    assert la == lb


def test_weight_decay_shrinks_parameters():
    class Frozen(nn.Module):
        # the loss never depends on w, so only decay moves it
        def __init__(self):
            super().__init__()
            self.w = nn.Parameter(torch.ones(5, dtype=torch.float64))

        def forward(self, x):
            return torch.zeros(x.shape[0], 2) + 0.0 * self.w.sum().float()

    ds = Dataset(torch.zeros(20, 1, 2, 2), torch.zeros(20, dtype=torch.long), 2)
    m = Frozen()
    cfg = TrainConfig(epochs=2, batch_size=5, lr0=0.1, momentum=0.0, weight_decay=0.5, augment=False)
    train(m, ds, None, cfg)
    total = 8
    expected = math.prod(1 - lr_schedule(t, total, 0.1) * 0.5 for t in range(total))
    assert torch.allclose(m.w, torch.full((5,), expected, dtype=torch.float64), rtol=1e-12)


def test_dying_expert_has_zero_gradient():
    model = build_model(tiny_config(n_experts=4, top_k=1), 0)
    (_, layer), = moe_layers(model)
    with torch.no_grad():
        layer.gate.fc.bias[3] = -1e4
    tr, te = small_data()
    _, log = train(model, tr, te, quick(epochs=2))
    for rec in log.epochs:
        norms = rec.expert_grad_norm["stages.conv4_x.0"]
        assert norms[3] == 0.0
        assert sum(norms) > 0
        assert rec.counts["stages.conv4_x.0"][3] == 0


def test_adversarial_batches_stay_in_ball(monkeypatch):
    seen = []
    real = training.pgd

    def spy(model, x, y, cfg, g):
        out = real(model, x, y, cfg, g)
        seen.append((x.clone(), out.clone(), cfg.epsilon))
        return out

    monkeypatch.setattr(training, "pgd", spy)
    train(build_model(tiny_config(), 0), small_data()[0], None, quick(adversarial=True, augment=True))
    assert len(seen) == 4
    for x, xa, eps in seen:
        assert eps == pytest.approx(8 / 255)
        assert (xa.double() - x.double()).abs().max() <= eps
        assert 0 <= xa.min() and xa.max() <= 1


def test_log_structure_and_stream(tmp_path):
    tr, te = small_data()
    path = tmp_path / "log.jsonl"
    _, log = train(build_model(tiny_config(), 0), tr, te, quick(epochs=3), log_path=path)
    assert [r.epoch for r in log.epochs] == [0, 1, 2]
    for rec in log.epochs:
        (imp,) = rec.importance.values()
        (cnt,) = rec.counts.values()
        assert sum(imp) == pytest.approx(len(te), abs=1e-5)  # float32 softmax rows
        assert sum(cnt) == len(te)
        assert set(rec.balance_loss) == {"stages.conv4_x.0"}
        assert 0 <= rec.train_accuracy <= 1
    assert TrainLog.read(path) == log


def test_nonfinite_loss_names_tensor():
    tr, _ = small_data()
    bad = tr.images.clone()
    bad[0, 0, 0, 0] = float("nan")
    ds = Dataset(bad, tr.labels, tr.class_count)
    with pytest.raises(NumericalFailure, match="input"):
        train(build_model(tiny_config(), 0), ds, None, quick(batch_size=64))


def test_nonfinite_parameter_named():
    model = build_model(tiny_config(), 0)
    with torch.no_grad():
        model.fc.weight[0, 0] = float("inf")
    with pytest.raises(NumericalFailure, match=r"logits|fc\.weight"):
        train(model, small_data()[0], None, quick())


def test_checkpoint_callback():
    calls = []
    train(build_model(tiny_config(), 0), small_data()[0], None, quick(epochs=4, checkpoint_every=2),
          on_checkpoint=lambda e, m: calls.append(e))
    assert calls == [1, 3]
