import math

import numpy as np
import pytest
import torch
from torch import nn

from conftest import random_image, tiny_config
from gazevqa.errors import ConfigurationError, ValidationError
from gazevqa.layers import TransformerBlock
from gazevqa.model_core import (
    AdapterStack,
    MappingConfig,
    MappingNetwork,
    ModelConfig,
    Regime,
    ToyImageEncoder,
    adapter_parameter_count,
    adapter_transform,
    build_model,
    count_parameters,
    encode_series,
    mapping_forward,
)


class FixedEncoder(ToyImageEncoder):
    def __init__(self, vec):
        super().__init__()
        self.vec = torch.tensor(vec, dtype=torch.float32)
        self.embed_dim = len(vec)

    def encode(self, images):
        return self.vec.expand(len(images), -1)


def test_zero_projection_gives_zero_series():
    enc = ToyImageEncoder()
    proj = nn.Linear(enc.embed_dim, 3 * 8)
    nn.init.zeros_(proj.weight)
    nn.init.zeros_(proj.bias)
    img = random_image(np.random.default_rng(0))
    out = encode_series(img, enc, proj, n=3)
    assert out.shape == (3, 8)
    assert torch.count_nonzero(out) == 0


def test_hand_computed_projection():
    proj = nn.Linear(2, 3)
    with torch.no_grad():
        proj.weight.copy_(torch.tensor([[1.0, 0.0], [0.5, -1.0], [2.0, 3.0]]))
        proj.bias.copy_(torch.tensor([0.0, 1.0, -1.0]))
    out = encode_series(np.zeros((4, 4, 3), np.uint8), FixedEncoder([1.0, 2.0]), proj, n=1)
    assert out.tolist() == [[1.0, 0.5 - 2.0 + 1.0, 2.0 + 6.0 - 1.0]]


def test_projection_row_major_reshape():
    proj = nn.Linear(1, 6)
    with torch.no_grad():
        proj.weight.copy_(torch.arange(6.0).view(6, 1))
        proj.bias.zero_()
    out = encode_series(np.zeros((2, 2, 3), np.uint8), FixedEncoder([1.0]), proj, n=2)
    assert out.tolist() == [[0, 1, 2], [3, 4, 5]]


def test_projection_dimension_mismatch():
    with pytest.raises(ConfigurationError):
        encode_series(np.zeros((4, 4, 3), np.uint8), FixedEncoder([1.0, 2.0]), nn.Linear(3, 4), n=1)


def test_full_scale_series_shape():
    proj = nn.Linear(640, 10 * 1024)
    out = encode_series(np.zeros((4, 4, 3), np.uint8), FixedEncoder([0.01] * 640), proj, n=10)
    assert out.shape == (10, 1024)


# --- adapters --------------------------------------------------------------


def test_identity_adapter():
    torch.manual_seed(0)
    a = AdapterStack(2, 5)
    p, s = torch.randn(3, 5), torch.randn(3, 5)
    assert torch.equal(adapter_transform(p, s, 1, a), p)


def test_constant_adapter():
    a = AdapterStack(1, 4)
    with torch.no_grad():
        a.g[0].bias.zero_()
        a.h[0].bias.fill_(2.5)
    p, s = torch.randn(2, 4), torch.randn(2, 4)
    assert torch.equal(adapter_transform(p, s, 0, a), torch.full((2, 4), 2.5))


def test_hand_computed_adapter():
    a = AdapterStack(1, 2)
    with torch.no_grad():
        a.g[0].weight.copy_(torch.tensor([[1.0, 2.0], [0.0, -1.0]]))
        a.g[0].bias.copy_(torch.tensor([0.5, 1.0]))
        a.h[0].weight.copy_(torch.tensor([[0.0, 1.0], [3.0, 0.0]]))
        a.h[0].bias.copy_(torch.tensor([-1.0, 0.0]))
    s = torch.tensor([[1.0, 2.0]])
    p = torch.tensor([[3.0, -2.0]])
    # g(s) = (1 + 4 + 0.5, -2 + 1) = (5.5, -1); h(s) = (2 - 1, 3) = (1, 3)
    assert adapter_transform(p, s, 0, a).tolist() == [[5.5 * 3.0 + 1.0, -1.0 * -2.0 + 3.0]]


def test_adapter_shape_mismatch():
    with pytest.raises(ValidationError):
        adapter_transform(torch.zeros(2, 4), torch.zeros(3, 4), 0, AdapterStack(1, 4))


def test_adapter_g_branch_linear_in_p():
    torch.manual_seed(1)
    a = AdapterStack(1, 6).double()
    with torch.no_grad():
        a.g[0].weight.normal_()
        a.g[0].bias.normal_()
    s, p1, p2 = (torch.randn(4, 6, dtype=torch.float64) for _ in range(3))
    alpha, beta = 0.7, -1.3
    lhs = adapter_transform(alpha * p1 + beta * p2, s, 0, a)
    rhs = alpha * adapter_transform(p1, s, 0, a) + beta * adapter_transform(p2, s, 0, a)
    assert torch.allclose(lhs, rhs, atol=1e-12)


def test_adapter_affine_with_shift():
    torch.manual_seed(2)
    a = AdapterStack(1, 3).double()
    for lin in (a.g[0], a.h[0]):
        with torch.no_grad():
            lin.weight.normal_()
            lin.bias.normal_()
    s, p1, p2 = (torch.randn(2, 3, dtype=torch.float64) for _ in range(3))
    alpha, beta = 2.0, 0.5
    h_term = a.h[0](s)
    lhs = adapter_transform(alpha * p1 + beta * p2, s, 0, a)
    rhs = alpha * adapter_transform(p1, s, 0, a) + beta * adapter_transform(p2, s, 0, a) - (alpha + beta - 1) * h_term
    assert torch.allclose(lhs, rhs, atol=1e-12)


# --- mapping network -------------------------------------------------------


def test_identity_adapters_match_plain_mapping():
    torch.manual_seed(3)
    cfg = MappingConfig(num_layers=3, prefix_length=4, d_e=8, num_heads=2, adapters_enabled=True)
    net = MappingNetwork(cfg)
    p, s = torch.randn(2, 4, 8), torch.randn(2, 4, 8)
    with_s = mapping_forward(net, p, s)
    adapters, net.adapters = net.adapters, None
    without = mapping_forward(net, p)
    net.adapters = adapters
    assert (with_s - without).abs().max() <= 1e-6


def test_zero_layers_is_identity():
    net = MappingNetwork(MappingConfig(num_layers=0, prefix_length=3, d_e=4, num_heads=1))
    p = torch.randn(1, 3, 4)
    assert torch.equal(mapping_forward(net, p), p)


def test_s_requires_adapters_and_vice_versa():
    plain = MappingNetwork(MappingConfig(num_layers=1, d_e=4, num_heads=1))
    with pytest.raises(ConfigurationError):
        plain(torch.zeros(1, 10, 4), torch.zeros(1, 10, 4))
    adapted = MappingNetwork(MappingConfig(num_layers=1, d_e=4, num_heads=1, adapters_enabled=True))
    with pytest.raises(ConfigurationError):
        adapted(torch.zeros(1, 10, 4))


def test_heads_must_divide_width():
    with pytest.raises(ConfigurationError):
        MappingConfig(d_e=10, num_heads=4)


def _np_layer_norm(x, w, b, eps=1e-5):
    mu = x.mean(-1, keepdims=True)
    var = ((x - mu) ** 2).mean(-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * w + b


def _np_gelu(x):
    from scipy.special import erf

    return 0.5 * x * (1 + erf(x / math.sqrt(2)))


def test_single_block_matches_numpy_oracle():
    torch.manual_seed(4)
    cfg = MappingConfig(num_layers=1, prefix_length=3, d_e=4, num_heads=1, mlp_ratio=2)
    net = MappingNetwork(cfg).double()
    for prm in net.parameters():
        with torch.no_grad():
            prm.normal_(0, 0.5)
    p = torch.randn(1, 3, 4, dtype=torch.float64)
    got = mapping_forward(net, p)[0].detach().numpy()

    blk: TransformerBlock = net.blocks[0]
    W = {k: v.detach().numpy() for k, v in blk.state_dict().items()}
    x = p[0].numpy()
    h = _np_layer_norm(x, W["ln1.weight"], W["ln1.bias"])
    q = h @ W["attn.q.weight"].T + W["attn.q.bias"]
    k = h @ W["attn.k.weight"].T + W["attn.k.bias"]
    v = h @ W["attn.v.weight"].T + W["attn.v.bias"]
    scores = q @ k.T / math.sqrt(4)
    att = np.exp(scores - scores.max(-1, keepdims=True))
    att /= att.sum(-1, keepdims=True)
    x = x + (att @ v) @ W["attn.out.weight"].T + W["attn.out.bias"]
    h = _np_layer_norm(x, W["ln2.weight"], W["ln2.bias"])
    x = x + _np_gelu(h @ W["fc1.weight"].T + W["fc1.bias"]) @ W["fc2.weight"].T + W["fc2.bias"]
    np.testing.assert_allclose(got, x, rtol=0, atol=1e-12)


# --- parameter counts ------------------------------------------------------


def test_adapter_formula_toy():
    assert adapter_parameter_count(2, 4) == 80
    assert sum(p.numel() for p in AdapterStack(2, 4).parameters()) == 80


def test_adapter_formula_full_scale():
    assert adapter_parameter_count(8, 1024) == 16_793_600


@pytest.mark.parametrize("L", [1, 2, 3, 5])
@pytest.mark.parametrize("d_e", [4, 8, 16])
def test_counted_adapters_match_formula(L, d_e):
    m = build_model(
        tiny_config(
            mapping_layers=L,
            mapping_heads=2,
            adapters=True,
            decoder={"kind": "toy", "d_model": d_e, "layers": 1, "heads": 2, "max_len": 64},
        )
    )
    counts = count_parameters(m, Regime.ADAPTER_ONLY)
    assert counts["adapters"] == 2 * L * (d_e * d_e + d_e)
    assert counts["trainable"] == counts["adapters"]


def test_regime_trainable_counts(make_model):
    m = make_model(adapters=True)
    c = {r: count_parameters(m, r) for r in Regime}
    assert c[Regime.FULL]["trainable"] == c[Regime.FULL]["decoder"] + c[Regime.FULL]["mapping"] + c[Regime.FULL]["adapters"]
    assert c[Regime.MAPPING]["trainable"] == c[Regime.FULL]["mapping"] + c[Regime.FULL]["adapters"]
    assert c[Regime.FULL]["encoder"] == 0
    assert sum(c[Regime.FULL][g] for g in ("encoder", "decoder", "mapping", "adapters")) == sum(
        p.numel() for p in m.parameters()
    )


def test_separate_roi_projection(make_model):
    shared = make_model(adapters=True)
    split = make_model(adapters=True, share_projection=False)
    extra = count_parameters(split)["mapping"] - count_parameters(shared)["mapping"]
    assert extra == sum(p.numel() for p in split.projection.parameters())


def test_build_model_is_seeded(make_model):
    a, b = make_model(init_seed=5), make_model(init_seed=5)
    c = make_model(init_seed=6)
    sa, sb, sc = a.state_dict(), b.state_dict(), c.state_dict()
    assert all(torch.equal(sa[k], sb[k]) for k in sa)
    assert not all(torch.equal(sa[k], sc[k]) for k in sa)


def test_config_rejects_unknown_keys():
    with pytest.raises(ConfigurationError):
        ModelConfig.from_json({"prefix_len": 3})
    cfg = tiny_config(adapters=True)
    assert ModelConfig.from_json(cfg.to_json()) == cfg


def test_identity_adapters_float64_logits(make_model):
    base = make_model(init_seed=3).double()
    adapted = make_model(adapters=True, init_seed=3).double()
    feats = torch.randn(4, base.encoder.embed_dim, dtype=torch.float64)
    roi = torch.randn(4, base.encoder.embed_dim, dtype=torch.float64)
    with torch.no_grad():
        a = base.decoder.logits(base.image_prefix(feats))
        b = adapted.decoder.logits(adapted.image_prefix(feats, roi))
    assert (a - b).abs().max() <= 1e-12
