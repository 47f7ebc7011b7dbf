import math

import numpy as np
import pytest
import torch
import torch.nn.functional as F
from hypothesis import given, settings
from hypothesis import strategies as st

from gssl.backbones import BackboneSpec
from gssl.gatenet import (GatedSSLModel, ModelOutput, NormedLinear, build_model, cross_entropy, gate_forward,
                          gated_ssl_loss, load_checkpoint, loss_from_outputs, read_checkpoint_manifest,
                          save_checkpoint, total_loss)
from gssl.pretext import parse_tasks
from oracles import ToyBackbone, ce_logits_for, central_difference_check, toy_batch, toy_gated_model


def test_softmax_gate_closed_form():
    g = gate_forward(torch.tensor([[1.0]], dtype=torch.float64), torch.tensor([[1.0, 0.0, 0.0]], dtype=torch.float64),
                     torch.zeros(3, dtype=torch.float64))
    e = math.e
    expected = [e / (e + 2), 1 / (e + 2), 1 / (e + 2)]
    assert g[0].tolist() == pytest.approx(expected, abs=1e-12)
    assert g[0].tolist() == pytest.approx([0.5761, 0.2119, 0.2119], abs=1e-4)


def test_gate_rejects_wrong_feature_dim():
    with pytest.raises(ValueError):
        gate_forward(torch.zeros(2, 4), torch.zeros(5, 3), torch.zeros(3))


def test_cross_entropy_hand_value():
    loss = cross_entropy(torch.tensor([[math.log(3.0), 0.0]], dtype=torch.float64), torch.tensor([0]))
    assert loss.item() == pytest.approx(-math.log(3 / 4), abs=1e-12)
    assert loss.item() == pytest.approx(0.28768, abs=1e-5)


def test_cross_entropy_label_range():
    with pytest.raises(ValueError):
        cross_entropy(torch.zeros(2, 3), torch.tensor([0, 3]))
    with pytest.raises(ValueError):
        cross_entropy(torch.zeros(2, 3), torch.tensor([-1, 0]))


def test_total_loss_worked_example():
    # one sample, gates (0.5, 0.3, 0.2), ssl losses (1, 2, 3), classifier loss 0.7, ratio 0.1
    out = ModelOutput(
        features=torch.zeros(1, 1),
        logits=ce_logits_for(0.7)[None],
        ssl_logits=[ce_logits_for(v)[None] for v in (1.0, 2.0, 3.0)],
        gates=torch.tensor([[0.5, 0.3, 0.2]], dtype=torch.float64),
        activations=None,
    )
    parts = loss_from_outputs(out, torch.tensor([1]), torch.tensor([[1, 1, 1]]), 0.1)
    assert parts.classifier_loss.item() == pytest.approx(0.7, abs=1e-12)
    assert parts.gated_ssl.item() == pytest.approx(1.7, abs=1e-12)
    assert parts.total.item() == pytest.approx(0.87, abs=1e-12)


def test_gated_ssl_is_per_sample_weighting():
    g = torch.Generator().manual_seed(1)
    logits = [torch.randn(4, q, generator=g, dtype=torch.float64) for q in (16, 2, 6)]
    pseudo = torch.stack([torch.randint(q, (4,), generator=g) for q in (16, 2, 6)], 1)
    gates = torch.softmax(torch.randn(4, 3, generator=g, dtype=torch.float64), 1)
    gated, per_task = gated_ssl_loss(logits, pseudo, gates)
    manual = 0.0
    for i in range(4):
        for n in range(3):
            p = torch.softmax(logits[n][i], 0)[pseudo[i, n]]
            manual += gates[i, n].item() * -math.log(p.item())
    assert gated.item() == pytest.approx(manual / 4, rel=1e-12)
    for n in range(3):
        assert per_task[n].item() == pytest.approx(F.cross_entropy(logits[n], pseudo[:, n]).item(), rel=1e-12)


def test_gated_ssl_shape_errors():
    logits = [torch.zeros(2, 16), torch.zeros(2, 2)]
    with pytest.raises(ValueError):
        gated_ssl_loss(logits, torch.zeros(2, 3, dtype=torch.long), torch.full((2, 3), 1 / 3))
    with pytest.raises(ValueError):
        gated_ssl_loss(logits, torch.zeros(2, 2, dtype=torch.long), torch.full((2, 3), 1 / 3))


def test_zero_init_gate_is_exactly_uniform():
    model = GatedSSLModel(ToyBackbone(), 3, parse_tasks("lorot,flip,channel"))
    out = model(torch.rand(7, 3, 2, 2))
    assert torch.equal(out.gates, torch.full((7, 3), 1 / 3))


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 2**31), b=st.integers(1, 16), d=st.integers(1, 8), t=st.integers(1, 4),
       scale=st.floats(0.01, 50.0))
def test_gate_is_a_distribution(seed, b, d, t, scale):
    g = torch.Generator().manual_seed(seed)
    gates = gate_forward(scale * torch.randn(b, d, generator=g), torch.randn(d, t, generator=g),
                         torch.randn(t, generator=g))
    assert bool((gates >= 0).all())
    assert torch.allclose(gates.sum(1), torch.ones(b), atol=1e-6)


def test_ungated_model_reproduces_uniform_composite_loss():
    model = toy_gated_model(gated=False).double()
    x, y, pseudo = toy_batch(3)
    parts = total_loss(model, x, y, pseudo, 0.4)
    assert torch.equal(parts.gates, torch.full((5, 3), 1 / 3, dtype=torch.float64))
    out = model(x)
    expected = F.cross_entropy(out.logits, y) + 0.4 * sum(
        F.cross_entropy(lg, pseudo[:, n]) for n, lg in enumerate(out.ssl_logits)) / 3
    assert parts.total.item() == pytest.approx(expected.item(), rel=1e-12)


def test_gradients_match_central_differences():
    model = toy_gated_model(d=6)
    x, y, pseudo = toy_batch(0)
    errors = central_difference_check(model, x, y, pseudo)
    assert "gate.weight" in errors and "gate.bias" in errors
    assert max(errors.values()) < 1e-4, errors


def test_normed_linear_is_cosine():
    layer = NormedLinear(4, 3)
    x = torch.randn(5, 4)
    expected = F.normalize(x, dim=1) @ F.normalize(layer.weight, dim=0)
    assert torch.allclose(layer(x), expected, atol=1e-6)
    assert bool((layer(x).abs() <= 1 + 1e-6).all())


def test_build_model_is_seed_deterministic():
    a = build_model(BackboneSpec("tinycnn"), 10, "lorot,flip", seed=3)
    b = build_model(BackboneSpec("tinycnn"), 10, "lorot,flip", seed=3)
    c = build_model(BackboneSpec("tinycnn"), 10, "lorot,flip", seed=4)
    sa, sb, sc = a.state_dict(), b.state_dict(), c.state_dict()
    assert all(torch.equal(sa[k], sb[k]) for k in sa)
    assert not all(torch.equal(sa[k], sc[k]) for k in sa)


def test_checkpoint_roundtrip(tmp_path):
    model = build_model(BackboneSpec("tinycnn"), 10, "lorot,channel", gated=True, classifier="normed", seed=0)
    path = tmp_path / "m.pt"
    save_checkpoint(model, path, ssl_ratio=0.3, epoch=4)
    meta = read_checkpoint_manifest(path)
    assert meta["tasks"] == "lorot,channel" and meta["t"] == "2" and meta["q"] == "10"
    assert meta["ssl_ratio"] == "0.3" and meta["epoch"] == "4"
    loaded, _ = load_checkpoint(path)
    x = torch.rand(2, 3, 32, 32)
    model.eval(), loaded.eval()
    assert torch.equal(model(x).logits, loaded(x).logits)
    assert loaded.classifier_type == "normed"


def test_model_forward_shapes():
    model = build_model(BackboneSpec("tinycnn"), 10, "lorot,flip,channel", seed=0)
    out = model(torch.rand(4, 3, 32, 32))
    assert out.logits.shape == (4, 10)
    assert [lg.shape[1] for lg in out.ssl_logits] == [16, 2, 6]
    assert out.gates.shape == (4, 3)
    np.testing.assert_allclose(out.gates.sum(1).detach().numpy(), 1.0, atol=1e-6)
