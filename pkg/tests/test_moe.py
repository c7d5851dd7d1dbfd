import math

import pytest
import torch
import torch.nn as nn
from hypothesis import given, strategies as st

from moe_robust.errors import InvalidArgument, ModelConstructionError
from moe_robust.moe import (
    GateDecision, GapFcGate, ImportanceVector, MoELayer, MoELayerConfig, entropy_loss, fix_expert,
    gate_conv_gap, gate_gap_fc, importance, kl_loss, moe_forward, route, switch_loss, total_balance_loss,
)

D = torch.float64


def decision_from_scores(scores, k=1):
    scores = torch.tensor(scores, dtype=D)
    idx = torch.sort(scores, dim=-1, descending=True, stable=True).indices[:, :k]
    top = torch.gather(scores, -1, idx)
    return GateDecision(scores, idx, top / top.sum(-1, keepdim=True))


class TestGates:
    def test_gap_fc_constant_map(self):
        v = torch.tensor([0.5, -1.0, 2.0], dtype=D)
        x = v.view(1, 3, 1, 1).expand(1, 3, 5, 5)
        w = torch.randn(4, 3, dtype=D)
        b = torch.randn(4, dtype=D)
        assert torch.allclose(gate_gap_fc(x, w, b), (w @ v + b).unsqueeze(0))

    def test_gap_fc_rotation_invariant(self):
        x = torch.randn(2, 3, 4, 4, dtype=D)
        w, b = torch.randn(5, 3, dtype=D), torch.randn(5, dtype=D)
        assert torch.allclose(gate_gap_fc(x, w, b), gate_gap_fc(torch.rot90(x, 1, (2, 3)), w, b), atol=1e-12)

    def test_gap_fc_identity_padded_gives_channel_means(self):
        g = torch.Generator().manual_seed(1)
        x = torch.randn(2, 8, 4, 4, generator=g, dtype=D)
        w = torch.zeros(10, 8, dtype=D)
        w[:8] = torch.eye(8, dtype=D)
        logits = gate_gap_fc(x, w, torch.zeros(10, dtype=D))
        means = torch.tensor([[float(x[n, c].sum()) / 16 for c in range(8)] for n in range(2)], dtype=D)
        assert torch.allclose(logits[:, :8], means, atol=1e-12)
        assert torch.all(logits[:, 8:] == 0)

    def test_conv_gap_zero_weights_gives_bias(self):
        w = torch.zeros(3, 4, 3, 3, dtype=D)
        b = torch.tensor([0.1, -2.0, 3.0], dtype=D)
        out = gate_conv_gap(torch.randn(5, 4, 6, 6, dtype=D), w, b)
        assert torch.allclose(out, b.expand(5, 3))

    def test_conv_gap_1x1_commutes_with_gap(self):
        x = torch.randn(3, 4, 5, 5, dtype=D)
        W = torch.randn(2, 4, dtype=D)
        out = gate_conv_gap(x, W.view(2, 4, 1, 1), None)
        assert torch.allclose(out, x.mean(dim=(2, 3)) @ W.T, atol=1e-12)

    def test_conv_gap_sees_spatial_structure(self):
        # counterexample found by seeded random search: a 3x3 conv with zero
        # padding responds differently to an input and its mirror image
        g = torch.Generator().manual_seed(0)
        for _ in range(100):
            x = torch.randn(1, 2, 4, 4, generator=g, dtype=D)
            w = torch.randn(3, 2, 3, 3, generator=g, dtype=D)
            a = gate_conv_gap(x, w, None)
            b = gate_conv_gap(torch.flip(x, (3,)), w, None)
            if (a - b).abs().max() > 1e-6:
                break
        else:
            pytest.fail("no spatially sensitive example found")
        # GAP-FC on the same pair cannot tell them apart
        fc = torch.randn(3, 2, dtype=D)
        assert torch.allclose(gate_gap_fc(x, fc), gate_gap_fc(torch.flip(x, (3,)), fc), atol=1e-12)

    @pytest.mark.parametrize("gate", ["gap_fc", "conv_gap"])
    def test_channel_mismatch(self, gate):
        x = torch.randn(1, 3, 4, 4)
        with pytest.raises(InvalidArgument):
            if gate == "gap_fc":
                gate_gap_fc(x, torch.randn(2, 5))
            else:
                gate_conv_gap(x, torch.randn(2, 5, 3, 3))


class TestRoute:
    def test_uniform_tie(self):
        d = route(torch.zeros(1, 4, dtype=D), 2)
        assert d.selected.tolist() == [[0, 1]]
        assert d.weights.tolist() == [[0.5, 0.5]]

    def test_saturation(self):
        d = route(torch.tensor([[10.0, 0.0, 0.0]], dtype=D), 1)
        assert d.selected.tolist() == [[0]]
        assert d.weights.tolist() == [[1.0]]

    def test_renormalized_pair(self):
        d = route(torch.tensor([[1.0, 2.0, 3.0]], dtype=D), 2)
        assert d.selected.tolist() == [[2, 1]]
        e2, e3 = math.exp(2), math.exp(3)
        assert d.weights[0].tolist() == pytest.approx([e3 / (e2 + e3), e2 / (e2 + e3)], abs=1e-12)
        assert d.weights[0].tolist() == pytest.approx([0.7311, 0.2689], abs=1e-4)

    def test_k_equals_n_reorders_scores(self):
        logits = torch.randn(6, 5, dtype=D)
        d = route(logits, 5)
        assert torch.allclose(torch.gather(d.scores, 1, d.selected), d.weights, atol=1e-12)

    @given(st.integers(1, 6), st.integers(1, 6), st.integers(0, 2**31 - 1))
    def test_decision_invariants(self, n, k, seed):
        k = min(k, n)
        g = torch.Generator().manual_seed(seed)
        d = route(torch.randn(4, n, generator=g, dtype=D) * 5, k)
        assert torch.all(d.scores >= 0)
        assert torch.allclose(d.scores.sum(-1), torch.ones(4, dtype=D), atol=1e-6)
        assert torch.allclose(d.weights.sum(-1), torch.ones(4, dtype=D), atol=1e-6)
        for row in d.selected.tolist():
            assert len(set(row)) == k

    def test_k_errors_propagate(self):
        with pytest.raises(InvalidArgument):
            route(torch.zeros(1, 3), 4)


class TestMoEForward:
    def test_single_path(self):
        experts = [lambda x, i=i: x * (i + 1) for i in range(3)]
        x = torch.randn(2, 1, 2, 2, dtype=D)
        d = route(torch.tensor([[0.0, 5.0, 0.0], [0.0, 0.0, 5.0]], dtype=D), 1)
        out = moe_forward(x, experts, d)
        assert torch.equal(out[0], x[0] * 2)
        assert torch.equal(out[1], x[1] * 3)

    def test_identical_identity_experts(self):
        x = torch.randn(3, 2, 2, 2, dtype=D)
        d = route(torch.randn(3, 4, dtype=D), 4)
        out = moe_forward(x, [lambda z: z] * 4, d)
        assert torch.allclose(out, x, atol=1e-12)

    def test_scalar_mixture(self):
        experts = [lambda x, i=i: i * x for i in range(1, 4)]
        d = route(torch.tensor([[1.0, 2.0, 3.0]], dtype=D), 2)
        out = moe_forward(torch.ones(1, 1, 1, 1, dtype=D), experts, d)
        e2, e3 = math.exp(2), math.exp(3)
        assert out.item() == pytest.approx(3 * e3 / (e2 + e3) + 2 * e2 / (e2 + e3), abs=1e-12)
        assert out.item() == pytest.approx(2.7311, abs=1e-4)

    def test_unselected_not_evaluated(self):
        calls = []

        def make(i):
            def f(x):
                calls.append((i, x.shape[0]))
                return x
            return f

        d = route(torch.tensor([[5.0, 0.0, 0.0, 0.0], [5.0, 0.0, 0.0, 0.0]], dtype=D), 1)
        moe_forward(torch.ones(2, 1, 1, 1, dtype=D), [make(i) for i in range(4)], d)
        assert calls == [(0, 2)]

    def test_shape_mismatch(self):
        d = route(torch.tensor([[5.0, 0.0], [0.0, 5.0]], dtype=D), 1)
        experts = [lambda x: x, lambda x: x[:, :1]]
        with pytest.raises(ModelConstructionError):
            moe_forward(torch.ones(2, 2, 1, 1, dtype=D), experts, d)


class TestImportance:
    def test_uniform(self):
        d = decision_from_scores([[0.25] * 4] * 4)
        assert importance(d).mass.tolist() == [1.0] * 4

    def test_collapse(self):
        assert importance(decision_from_scores([[1.0, 0.0], [1.0, 0.0]])).mass.tolist() == [2.0, 0.0]

    def test_random_batch_matches_naive_sum(self):
        g = torch.Generator().manual_seed(5)
        d = route(torch.randn(8, 5, generator=g, dtype=D), 2)
        imp = importance(d)
        naive = [sum(float(d.scores[b, i]) for b in range(8)) for i in range(5)]
        assert imp.mass.tolist() == pytest.approx(naive, abs=1e-12)
        assert float(imp.mass.sum()) == pytest.approx(8, abs=1e-4)
        assert imp.batch_size == 8


class TestLosses:
    def test_entropy_uniform_minimum(self):
        assert entropy_loss(torch.ones(4, dtype=D)).item() == pytest.approx(-math.log(4), abs=1e-12)

    def test_entropy_one_hot(self):
        assert entropy_loss(torch.tensor([0.0, 3.0, 0.0], dtype=D)).item() == 0.0

    def test_entropy_direct(self):
        v = entropy_loss(torch.tensor([0.5, 0.25, 0.25], dtype=D)).item()
        assert v == pytest.approx(0.5 * math.log(0.5) + 0.5 * math.log(0.25), abs=1e-12)
        assert v == pytest.approx(-1.0397, abs=1e-4)

    def test_kl_values(self):
        assert kl_loss(torch.ones(4, dtype=D)).item() == pytest.approx(0.0, abs=1e-12)
        assert kl_loss(torch.tensor([0, 0, 1.0, 0], dtype=D)).item() == pytest.approx(math.log(4), abs=1e-12)

    @given(st.lists(st.floats(0, 10), min_size=1, max_size=10).filter(lambda v: sum(v) > 1e-3))
    def test_kl_entropy_offset(self, mass):
        m = torch.tensor(mass, dtype=D)
        diff = kl_loss(m).item() - entropy_loss(m).item()
        assert diff == pytest.approx(math.log(len(mass)), abs=1e-9)
        assert kl_loss(m).item() >= -1e-12
        assert -math.log(len(mass)) - 1e-12 <= entropy_loss(m).item() <= 1e-12

    def test_zero_mass(self):
        with pytest.raises(InvalidArgument):
            entropy_loss(ImportanceVector(torch.zeros(3), 0))
        with pytest.raises(InvalidArgument):
            kl_loss(torch.zeros(3))

    def test_switch_full_collapse(self):
        d = decision_from_scores([[1.0, 0, 0, 0]] * 5)
        assert switch_loss(d).item() == pytest.approx(4.0)

    @pytest.mark.parametrize("n", [1, 2, 3, 5, 8])
    def test_switch_uniform(self, n):
        # n inputs, input i sends its top-1 to expert i but scores are uniform
        scores = torch.full((n, n), 1.0 / n, dtype=D)
        d = GateDecision(scores, torch.arange(n).view(n, 1), torch.ones(n, 1, dtype=D))
        assert switch_loss(d).item() == pytest.approx(1.0, abs=1e-12)

    def test_switch_hand_computed(self):
        d = decision_from_scores([[0.9, 0.1], [0.8, 0.2], [0.6, 0.4], [0.3, 0.7]])
        assert switch_loss(d).item() == pytest.approx(2 * (0.75 * 0.65 + 0.25 * 0.35), abs=1e-12)
        assert switch_loss(d).item() == pytest.approx(1.15, abs=1e-12)

    def test_switch_gradient_through_probabilities_only(self):
        logits = torch.tensor([[2.0, 0.0], [1.0, 0.5]], dtype=D, requires_grad=True)
        d = route(logits, 1)
        switch_loss(d).backward()
        # f = [1, 0] is constant, so loss = 2 * mean(p_0) and d/dz_0 = p0 * p1
        p = torch.softmax(logits.detach(), -1)
        expected = torch.stack([p[:, 0] * p[:, 1], -p[:, 0] * p[:, 1]], dim=1)
        assert torch.allclose(logits.grad, expected, atol=1e-12)


def _layer(n=4, k=2, balance="entropy", seed=0):
    torch.manual_seed(seed)
    experts = [nn.Conv2d(3, 3, 3, padding=1) for _ in range(n)]
    return MoELayer(experts, GapFcGate(3, n), k, balance, 0.01)


class TestLayer:
    def test_counter_is_k_per_input(self):
        layer = _layer(4, 2)
        layer(torch.randn(10, 3, 4, 4))
        assert sum(layer.eval_counter) == 20

    def test_fix_expert_matches_expert(self):
        layer = _layer().eval()
        x = torch.randn(5, 3, 4, 4)
        fix_expert(layer, 2)
        assert torch.equal(layer(x), layer.experts[2](x))

    def test_fix_unfix_bitwise(self):
        layer = _layer().eval()
        x = torch.randn(5, 3, 4, 4)
        before = layer(x)
        fix_expert(layer, 3)
        fix_expert(layer, None)
        assert torch.equal(layer(x), before)

    @pytest.mark.parametrize("bad", [-1, 4])
    def test_fix_out_of_range(self, bad):
        with pytest.raises(InvalidArgument):
            fix_expert(_layer(), bad)

    def test_balance_loss_recorded(self):
        layer = _layer(balance="switch")
        layer(torch.randn(6, 3, 4, 4))
        assert layer.last_balance_loss is not None
        model = nn.Sequential(layer)
        assert total_balance_loss(model).item() == pytest.approx(0.01 * layer.last_balance_loss.item())

    def test_config_validation(self):
        with pytest.raises(InvalidArgument):
            MoELayerConfig(n_experts=2, top_k=3)
        with pytest.raises(InvalidArgument):
            MoELayerConfig(balance_loss="bogus")
        with pytest.raises(InvalidArgument):
            MoELayerConfig(balance_coeff=-1)

    @pytest.mark.parametrize("loss", ["entropy", "kl", "switch"])
    def test_every_gate_parameter_gets_gradient(self, loss):
        for seed in range(5):
            layer = _layer(4, 2, loss, seed).double()
            x = torch.randn(16, 3, 4, 4, dtype=D)
            out = layer(x)
            (out.pow(2).mean() + layer.balance_coeff * layer.last_balance_loss).backward()
            for p in layer.gate.parameters():
                assert torch.all(p.grad != 0), (loss, seed)

    def test_starved_expert_gets_gate_gradient_but_no_expert_gradient(self):
        layer = _layer(3, 1, "entropy").double()
        with torch.no_grad():
            layer.gate.fc.weight.zero_()
            layer.gate.fc.bias.copy_(torch.tensor([4.0, 0.0, -3.0]))
        x = torch.randn(8, 3, 4, 4, dtype=D)
        layer(x)
        assert layer.last_decision.selected.unique().tolist() == [0]
        layer.last_balance_loss.backward()
        assert layer.gate.fc.bias.grad[2] != 0
        assert all(p.grad is None or torch.all(p.grad == 0) for p in layer.experts[2].parameters())
