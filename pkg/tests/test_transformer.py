import math

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from oracles import attention_loops, ndpa_replay, ndpn_replay
from uhdpromer.primitives import init_parameters
from uhdpromer.transformer import NDPA, NDPN, NDPTBlock, NDPTStack, softmax_checks, transposed_attention


def _randomize(module, seed):
    init_parameters(module, seed)
    g = torch.Generator().manual_seed(seed + 1)
    with torch.no_grad():
        for name, p in module.named_parameters():
            if name.endswith("temperature"):
                p.copy_(0.5 + torch.rand(p.shape, generator=g, dtype=p.dtype))
            else:
                p.copy_(torch.rand(p.shape, generator=g, dtype=p.dtype) - 0.5)


def _params(module):
    return {k: v.detach().numpy() for k, v in module.named_parameters()}


def test_single_channel_head_returns_v():
    q, k, v = (torch.randn(1, 4, 1, 9) for _ in range(3))
    assert torch.allclose(transposed_attention(q, k, v, torch.ones(4, 1, 1)), v)


def test_zero_query_gives_uniform_weights():
    v = torch.randn(1, 1, 3, 5)
    out = transposed_attention(torch.zeros(1, 1, 3, 5), torch.randn(1, 1, 3, 5), v, torch.ones(1, 1, 1))
    assert torch.allclose(out, v.mean(dim=2, keepdim=True).expand_as(v), atol=1e-6)


def test_two_by_two_hand_oracle():
    q = [[1.0, 0.0], [0.6, 0.8]]
    k = [[0.0, 2.0], [3.0, 4.0]]
    v = [[1.0, -1.0], [2.0, 0.5]]
    # hand computation: normalized k rows (0,1), (0.6,0.8); temperature 1
    # row0 logits (0, 0.6), row1 logits (0.8, 1.0)
    def sm(a, b):
        ea, eb = math.exp(a), math.exp(b)
        return ea / (ea + eb), eb / (ea + eb)

    want = []
    for la, lb in ((0.0, 0.6), (0.8, 1.0)):
        wa, wb = sm(la, lb)
        want.append([wa * v[0][t] + wb * v[1][t] for t in range(2)])
    t = lambda a: torch.tensor(a, dtype=torch.float64)[None, None]
    out = transposed_attention(t(q), t(k), t(v), torch.ones(1, 1, 1, dtype=torch.float64))[0, 0]
    assert (out - torch.tensor(want, dtype=torch.float64)).abs().max().item() < 1e-6
    assert np.abs(np.array(attention_loops(q, k, v, 1.0)) - np.array(want)).max() < 1e-12


def test_head_dim_mismatch():
    with pytest.raises(ValueError):
        transposed_attention(torch.zeros(1, 1, 2, 4), torch.zeros(1, 1, 3, 4), torch.zeros(1, 1, 3, 4), 1.0)


def test_softmax_rows_sum_to_one_instrumented(tiny_config):
    from uhdpromer.model import build_model

    model = build_model(tiny_config)
    _randomize(model, 4)
    with softmax_checks():
        model(torch.rand(1, 3, 12, 10))


def test_ndpa_shape():
    m = NDPA(16, 8)
    init_parameters(m, 0)
    assert m(torch.randn(2, 16, 8, 8), torch.rand(2, 16, 8, 8)).shape == (2, 16, 8, 8)


def test_ndpa_matches_replay():
    m = NDPA(4, 2).double()
    _randomize(m, 21)
    g = torch.Generator().manual_seed(5)
    x = torch.randn(1, 4, 2, 2, generator=g, dtype=torch.float64)
    y = torch.rand(1, 4, 2, 2, generator=g, dtype=torch.float64)
    ref = ndpa_replay(x[0].numpy(), y[0].numpy(), _params(m), heads=2)
    assert np.abs(m(x, y)[0].detach().numpy() - ref).max() < 1e-5


def test_ndpa_prior_changes_output():
    m = NDPA(8, 2)
    _randomize(m, 3)
    x, y = torch.randn(1, 8, 4, 4), torch.rand(1, 8, 4, 4)
    assert (m(x, y) - m(x, y + 0.1)).abs().max().item() > 0


def test_ndpa_prior_shape_mismatch():
    with pytest.raises(ValueError):
        NDPA(4, 2)(torch.zeros(1, 4, 4, 4), torch.zeros(1, 4, 2, 2))


def test_ndpn_shape_hidden():
    m = NDPN(16, 2.0)
    init_parameters(m, 0)
    assert m.hidden == 32
    assert m(torch.randn(1, 16, 8, 8), torch.rand(1, 16, 8, 8)).shape == (1, 16, 8, 8)
    assert NDPN(16, 1.5).hidden == 24


def test_ndpn_zero_fusion_annihilates():
    m = NDPN(4, 2.0)
    _randomize(m, 2)
    with torch.no_grad():
        m.fusion.weight.zero_()
        m.fusion.bias.zero_()
        for conv in (m.gate_dw, m.fusion_proj, m.project_out):
            conv.bias.zero_()
    out = m(torch.randn(1, 4, 4, 4), torch.rand(1, 4, 4, 4))
    assert torch.count_nonzero(out) == 0


def test_ndpn_matches_replay():
    m = NDPN(2, 2.0).double()
    _randomize(m, 9)
    g = torch.Generator().manual_seed(1)
    x = torch.randn(1, 2, 2, 2, generator=g, dtype=torch.float64)
    y = torch.rand(1, 2, 2, 2, generator=g, dtype=torch.float64)
    ref = ndpn_replay(x[0].numpy(), y[0].numpy(), _params(m))
    assert np.abs(m(x, y)[0].detach().numpy() - ref).max() < 1e-5


def test_block_zero_projections_identity():
    blk = NDPTBlock(8, 2)
    init_parameters(blk, 0)
    x = torch.randn(1, 8, 4, 4)
    assert torch.equal(blk(x, torch.randn(1, 8, 4, 4)), x)


def test_block_without_ndp_never_builds_prior():
    blk = NDPTBlock(8, 2, ndp_in_attn=False, ndp_in_ffn=False)
    assert not blk.uses_prior
    assert not hasattr(blk.attn, "kv_ndp")
    record = []
    blk(torch.randn(1, 8, 4, 4), None, record)
    assert record == []


def test_block_modes_validated():
    with pytest.raises(ValueError):
        NDPTBlock(4, 2, ndp_source="nope")
    with pytest.raises(ValueError):
        NDPTBlock(4, 2, ndp_mode="nope")
    with pytest.raises(ValueError):
        NDPTBlock(4, 2)(torch.zeros(1, 4, 2, 2))


def test_stack_identity_with_zero_projections():
    st_ = NDPTStack(8, 3, 2, 2)
    init_parameters(st_, 0)
    x = torch.randn(1, 8, 4, 4)
    hr = [torch.randn(1, 8, 8, 8) for _ in range(3)]
    assert torch.equal(st_(x, hr), x)


def test_shared_mixer_stack():
    st_ = NDPTStack(4, 3, 2, 2, shared_mixer=True)
    assert len(st_.mixers) == 1
    init_parameters(st_, 0)
    record = []
    st_(torch.randn(1, 4, 4, 4), [torch.randn(1, 4, 8, 8)] * 3, record)
    assert len(record) == 3


@given(c=st.sampled_from([2, 4, 8, 16]), s=st.sampled_from([2, 4, 8]), data=st.data())
def test_block_shape_property(c, s, data):
    heads = data.draw(st.sampled_from([h for h in (1, 2, 4, 8) if c % h == 0]))
    hw = data.draw(st.integers(1, 3))
    blk = NDPTBlock(c, heads)
    init_parameters(blk, 0)
    x = torch.randn(1, c, hw, hw + 1)
    assert blk(x, torch.randn_like(x)).shape == x.shape


@pytest.mark.parametrize("use_ndp", [True, False])
def test_sublayer_gradcheck(use_ndp):
    from torch.func import functional_call

    for module in (NDPA(4, 2, use_ndp=use_ndp).double(), NDPN(4, 1.5, use_ndp=use_ndp).double()):
        _randomize(module, 13)
        names = [n for n, _ in module.named_parameters()]
        params = tuple(p.detach().clone().requires_grad_() for p in module.parameters())
        x = torch.randn(1, 4, 3, 3, dtype=torch.float64, requires_grad=True)
        y = torch.rand(1, 4, 3, 3, dtype=torch.float64) if use_ndp else None

        def f(x, *ps):
            return functional_call(module, dict(zip(names, ps)), (x, y))

        assert torch.autograd.gradcheck(f, (x, *params))
