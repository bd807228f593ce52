import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from crtlab import quantizers as q
from crtlab.tokenizer import Tokenizer, TokenizerConfig

import oracles


def test_lookup_dominant_axis_and_tie():
    cb = torch.tensor([[1.0, 0.0], [0.0, 1.0]])
    idx, _ = q.vq_lookup(torch.tensor([[0.9, 0.1], [1.0, 1.0]]), cb)
    assert idx.tolist() == [0, 0]


def test_lookup_zero_vector_is_degenerate():
    vq = q.VectorQuantizer(q.QuantizerConfig(code_dim=8, input_dim=8), identity_projection=True)
    res = vq(torch.zeros(1, 8, 2, 2))
    assert res.indices.eq(0).all() and vq.degenerate_inputs == 4


def lookup_matches_brute_force(n: int, k: int, d: int, seed: int) -> bool:
    g = torch.Generator().manual_seed(seed)
    z = torch.randn(n, d, generator=g, dtype=torch.float64)
    cb = torch.randn(k, d, generator=g, dtype=torch.float64)
    idx, _ = q.vq_lookup(z, cb)
    return np.array_equal(idx.numpy(), oracles.brute_cosine_argmax(z.numpy(), cb.numpy()))


def test_lookup_matches_linear_scan_k64():
    assert lookup_matches_brute_force(500, 64, 8, 0)


@settings(max_examples=25, deadline=None)
@given(st.integers(2, 40), st.integers(1, 6), st.integers(0, 10_000))
def test_lookup_property(k, d, seed):
    assert lookup_matches_brute_force(30, k, d, seed)


def test_vq_losses_hand_values():
    cb, cm = q.vq_losses(torch.tensor([[1.0, 0.0]]), torch.tensor([[0.0, 0.0]]), 0.25)
    assert (cb.item(), cm.item()) == (1.0, 0.25)
    z = torch.randn(3, 4)
    assert [v.item() for v in q.vq_losses(z, z.clone(), 0.25)] == [0.0, 0.0]


def test_vq_losses_stop_gradient_placement():
    z = torch.randn(3, 4, requires_grad=True)
    e = torch.randn(3, 4, requires_grad=True)
    cb, cm = q.vq_losses(z, e, 0.25)
    gz, ge = torch.autograd.grad(cm, [z, e], allow_unused=True)
    assert gz is not None and gz.abs().sum() > 0 and ge is None
    gz, ge = torch.autograd.grad(cb, [z, e], allow_unused=True)
    assert gz is None and ge.abs().sum() > 0


def test_straight_through_forward_and_backward():
    z = torch.randn(5, 3, requires_grad=True)
    e = torch.randn(5, 3)
    out = q.straight_through(z, e)
    assert torch.equal(out, e)
    g = torch.randn(5, 3)
    (gz,) = torch.autograd.grad(out, z, g)
    assert torch.equal(gz, g)
    (gz,) = torch.autograd.grad(q.straight_through(z, e).pow(2).sum(), z)
    assert torch.equal(gz, 2 * e)


def straight_through_bitwise_in_tokenizer(seed: int = 0) -> bool:
    """Encode -> quantize -> decode: gradient at the (normalized) latents == gradient at the codes."""
    torch.manual_seed(seed)
    cfg = TokenizerConfig(widths=(8, 8, 8), res_blocks=1, latent_dim=16)
    tok = Tokenizer(cfg)
    x = torch.rand(2, 3, 32, 32) * 2 - 1
    out = tok(x)
    out.quant.latent.retain_grad()
    out.quant.quantized.retain_grad()
    recon = tok.decode(out.quant.quantized)
    (recon - x).pow(2).mean().backward()
    latent_grad = out.quant.latent.grad
    return torch.equal(latent_grad, out.quant.quantized.grad) and bool(latent_grad.abs().sum() > 0)


def test_straight_through_bitwise_in_tokenizer():
    assert straight_through_bitwise_in_tokenizer()


def test_projection_contracts():
    vq = q.VectorQuantizer(q.QuantizerConfig(code_dim=8, input_dim=8), identity_projection=True)
    z = torch.randn(2, 8, 3, 3)
    assert torch.equal(vq.project(z), z)
    vq = q.VectorQuantizer(q.QuantizerConfig(code_dim=8, input_dim=256))
    assert vq.project(torch.randn(1, 256, 2, 2)).shape == (1, 8, 2, 2)
    assert vq.project(torch.zeros(1, 256, 2, 2)).abs().sum() == 0
    with pytest.raises(Exception):
        vq.project(torch.randn(1, 64, 2, 2))


def test_codebook_rows_nonzero_and_outputs_are_rows():
    vq = q.VectorQuantizer(q.QuantizerConfig(codebook_size=32, code_dim=4, input_dim=6))
    assert (vq.codebook.norm(dim=-1) > 0).all()
    res = vq(vq.project(torch.randn(2, 6, 3, 3)))
    rows = vq.normalized_codebook().detach()[res.indices]
    assert torch.equal(res.codes.permute(0, 2, 3, 1), rows)
    assert int(vq.usage.sum()) == 18


def test_fsq_examples():
    levels = (2, 2)
    assert q.fsq_composite_index(torch.tensor([[1, 0]]), levels).tolist() == [2]
    grid = q.fsq_grid_from_index(torch.arange(64), (8, 4, 2), torch.float64)
    per_dim, values = q.fsq_round(grid, (8, 4, 2))
    assert torch.equal(values, grid)
    assert torch.equal(q.fsq_composite_index(per_dim, (8, 4, 2)), torch.arange(64))


@settings(max_examples=30, deadline=None)
@given(st.lists(st.integers(2, 9), min_size=1, max_size=4), st.integers(0, 1000))
def test_fsq_index_round_trip_and_bound(levels, seed):
    n = int(np.prod(levels))
    idx = torch.arange(n)
    grid = q.fsq_grid_from_index(idx, levels, torch.float64)
    per_dim, _ = q.fsq_round(grid, levels)
    assert torch.equal(q.fsq_composite_index(per_dim, levels), idx)
    z = torch.randn(50, len(levels), generator=torch.Generator().manual_seed(seed), dtype=torch.float64) * 3
    ids, quant = q.fsq_quantize(z, levels)
    assert ((ids >= 0) & (ids < n)).all()
    assert torch.equal(q.fsq_grid_from_index(ids, levels, torch.float64), quant.detach())


def test_fsq_reaches_every_level():
    levels = (8, 5)
    z = torch.linspace(-6, 6, 2001, dtype=torch.float64).unsqueeze(-1).expand(-1, 2)
    per_dim, _ = q.fsq_round(q.fsq_bound(z, levels), levels)
    assert sorted(set(per_dim[:, 0].tolist())) == list(range(8))
    assert sorted(set(per_dim[:, 1].tolist())) == list(range(5))


def test_utilization():
    assert q.utilization(torch.ones(16)) == 1.0
    hist = torch.zeros(16)
    hist[3] = 5
    assert q.utilization(hist) == 0.0625
    with pytest.raises(ValueError):
        q.utilization(torch.zeros(4))


def test_utilization_matches_dump_recount(tmp_path):
    vq = q.VectorQuantizer(q.QuantizerConfig(codebook_size=64, code_dim=4, input_dim=4))
    res = vq(torch.randn(5, 4, 3, 3))
    q.write_token_dump(tmp_path / "t.bin", res.indices.numpy(), 64)
    arr, k = q.read_token_dump(tmp_path / "t.bin")
    assert len(set(arr.ravel().tolist())) / k == q.utilization(vq.usage)


def test_token_dump_format(tmp_path):
    toks = np.arange(2 * 3 * 4).reshape(2, 3, 4) % 7
    path = tmp_path / "t.bin"
    q.write_token_dump(path, toks, 7)
    raw = path.read_bytes()
    assert raw[:8] == b"CRTTOKS\0" and len(raw) == 8 + 5 * 4 + toks.size * 4
    arr, k = q.read_token_dump(path)
    assert k == 7 and np.array_equal(arr, toks)
    path.write_bytes(raw[:-4])
    with pytest.raises(q.TokenDumpError):
        q.read_token_dump(path)
    with pytest.raises(q.TokenDumpError):
        q.write_token_dump(path, toks, 3)


def test_config_validation():
    with pytest.raises(ValueError):
        q.QuantizerConfig(codebook_size=1)
    with pytest.raises(ValueError):
        q.QuantizerConfig(mode="fsq", fsq_levels=(1, 4))
    assert q.QuantizerConfig(mode="fsq", fsq_levels=(8, 8, 4)).effective_size == 256
