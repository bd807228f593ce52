import math
import warnings

import pytest
import torch

from crtlab import autodiff as ad

import gradcases


@pytest.mark.parametrize("name,shape", gradcases.all_cases(), ids=lambda v: str(v))
def test_finite_difference_gradients(name, shape):
    assert gradcases.check(name, shape) < 1e-4


def test_identity_gradient_is_one():
    x = torch.tensor(3.0, dtype=torch.float64, requires_grad=True)
    _, (g,) = ad.forward_backward(lambda x: x, [x])
    assert g.item() == 1.0


def test_stop_gradient_hand_example():
    x = torch.tensor([2.0, 3.0], dtype=torch.float64, requires_grad=True)
    _, (g,) = ad.forward_backward(lambda x: (ad.stop_gradient(x) * x).sum(), [x])
    assert g.tolist() == [2.0, 3.0]


def test_stop_gradient_gives_exact_zero():
    x = torch.randn(4, dtype=torch.float64, requires_grad=True)
    _, (g,) = ad.forward_backward(lambda x: ad.stop_gradient(x).pow(2).sum() + 0 * x.sum(), [x])
    assert torch.equal(g, torch.zeros(4, dtype=torch.float64))


def test_non_scalar_loss_rejected():
    x = torch.randn(3, requires_grad=True)
    with pytest.raises(ad.ShapeError):
        ad.forward_backward(lambda x: x * 2, [x])


@pytest.mark.parametrize("call", [
    lambda: ad.matmul(torch.zeros(2, 3), torch.zeros(4, 2)),
    lambda: ad.conv2d(torch.zeros(1, 3, 4, 4), torch.zeros(2, 2, 3, 3)),
    lambda: ad.causal_self_attention(torch.zeros(1, 1, 3, 4), torch.zeros(1, 1, 3, 5), torch.zeros(1, 1, 3, 4)),
    lambda: ad.cross_entropy(torch.zeros(2, 5), torch.zeros(3, dtype=torch.long)),
    lambda: ad.embedding(torch.tensor([7]), torch.zeros(5, 2)),
])
def test_shape_errors_name_the_op(call):
    with pytest.raises(ad.ShapeError) as info:
        call()
    assert str(info.value)


def test_shape_error_message_contains_op_and_shapes():
    with pytest.raises(ad.ShapeError) as info:
        ad.matmul(torch.zeros(2, 3), torch.zeros(4, 2))
    msg = str(info.value)
    assert "matmul" in msg and "(2, 3)" in msg and "(4, 2)" in msg


def test_causal_attention_ignores_future_bitwise():
    g = torch.Generator().manual_seed(0)
    q, k, v = (torch.randn(1, 2, 6, 4, generator=g) for _ in range(3))
    base = ad.causal_self_attention(q, k, v)
    k2, v2 = k.clone(), v.clone()
    k2[:, :, 4:] += 5.0
    v2[:, :, 4:] -= 3.0
    out = ad.causal_self_attention(q, k2, v2)
    assert torch.equal(base[:, :, :4], out[:, :, :4])


def test_adamw_zero_gradient_no_decay_is_noop():
    p = torch.tensor([1.5, -2.0], requires_grad=True)
    ad.adamw_step([p], [torch.zeros(2)], lr=0.1, weight_decay=0.0)
    assert p.tolist() == [1.5, -2.0]


def test_adamw_single_step_by_hand():
    p = torch.tensor([0.0], dtype=torch.float64, requires_grad=True)
    ad.adamw_step([p], [torch.ones(1, dtype=torch.float64)], lr=0.1, betas=(0.9, 0.95))
    m_hat = (0.1 * 1.0) / (1 - 0.9)
    v_hat = (0.05 * 1.0) / (1 - 0.95)
    expected = -0.1 * m_hat / (math.sqrt(v_hat) + 1e-8)
    assert p.item() == pytest.approx(expected, rel=1e-12)


def test_adamw_decoupled_decay():
    p = torch.tensor([1.0], dtype=torch.float64, requires_grad=True)
    ad.adamw_step([p], [torch.zeros(1, dtype=torch.float64)], lr=0.1, weight_decay=0.1)
    assert p.item() == pytest.approx(0.99, abs=1e-12)


def test_adamw_non_finite_gradient_names_parameter():
    p = torch.nn.Parameter(torch.zeros(2))
    opt = ad.AdamW([("encoder.weight", p)], lr=0.1)
    p.grad = torch.tensor([1.0, float("nan")])
    with pytest.raises(ad.NonFiniteGradientError, match="encoder.weight"):
        opt.step()


def test_adamw_step_count_and_determinism():
    def trajectory():
        torch.manual_seed(3)
        p = torch.nn.Parameter(torch.randn(5))
        opt = ad.AdamW([("w", p)], lr=0.05, weight_decay=0.1)
        for _ in range(4):
            opt.zero_grad()
            (p.sin().sum()).backward()
            opt.step()
        return p.detach().clone(), opt.step_count("w")

    (a, na), (b, nb) = trajectory(), trajectory()
    assert torch.equal(a, b) and na == nb == 4


def _gan_spec():
    return ad.ScheduleSpec("cosine-ramp-window", 0.5, total_steps=30_000, window_start=20_000, window_length=2_000)


def test_gan_schedule_values():
    spec = _gan_spec()
    assert ad.schedule_at(spec, 0) == 0.0
    assert ad.schedule_at(spec, 22_000) == 0.5
    assert ad.schedule_at(spec, 21_000) == pytest.approx(0.25, abs=1e-15)


def test_schedule_clamps_with_warning():
    spec = ad.ScheduleSpec("linear-warmup-then-cosine", 1.0, total_steps=10, warmup_start=0.0, warmup_steps=2)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        value = ad.schedule_at(spec, 15)
    assert value == ad.schedule_at(spec, 10) == 0.0
    assert any(issubclass(w.category, ad.ScheduleClampWarning) for w in caught)


def test_warmup_then_cosine_shape():
    spec = ad.ScheduleSpec("linear-warmup-then-cosine", 1.0, total_steps=100, warmup_start=0.1, warmup_steps=10)
    assert ad.schedule_at(spec, 0) == pytest.approx(0.1)
    assert ad.schedule_at(spec, 5) == pytest.approx(0.55)
    assert ad.schedule_at(spec, 10) == pytest.approx(1.0)
    assert ad.schedule_at(spec, 55) == pytest.approx(0.5)
    values = [ad.schedule_at(spec, s) for s in range(101)]
    assert all(v >= 0 and math.isfinite(v) for v in values)


def test_schedule_rejects_warmup_longer_than_total():
    with pytest.raises(ValueError):
        ad.ScheduleSpec("linear-warmup-then-constant", 1.0, total_steps=5, warmup_steps=10)


def test_checkpoint_round_trip(tmp_path):
    torch.manual_seed(0)
    params = {"a.weight": torch.randn(3, 4), "b.bias": torch.randn(2, dtype=torch.float64)}
    p = torch.nn.Parameter(torch.randn(3))
    opt = ad.AdamW([("p", p)], lr=0.1)
    p.grad = torch.ones(3)
    opt.step()
    path = tmp_path / "x.ckpt"
    ad.save_checkpoint(path, params, {"main": opt}, {"kind": "test"})
    loaded, states, meta = ad.load_checkpoint(path)
    assert meta["kind"] == "test"
    assert all(torch.equal(params[k], loaded[k]) and params[k].dtype == loaded[k].dtype for k in params)
    assert set(states) == {"main"} and states["main"]
    assert path.read_bytes().startswith(b"CRTCKPT\0")


def test_checkpoint_rejects_garbage(tmp_path):
    path = tmp_path / "bad.ckpt"
    path.write_bytes(b"NOTACKPT" + b"\0" * 16)
    with pytest.raises(ValueError):
        ad.load_checkpoint(path)
