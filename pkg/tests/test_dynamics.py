import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from wsworld.dynamics import (
    Codebook,
    EmptyCodebookError,
    FdmConfig,
    ForwardDynamics,
    GcmConfig,
    GcmStepError,
    GenerativeControl,
    IdmConfig,
    InverseDynamics,
    additive_param_count,
    fdm_step,
    gcm_init,
    idm_infer,
    n_params,
    quantize,
)
from wsworld.encoder import EncoderConfig, Encoder, encode, init_encoder
from wsworld.inr import DimensionError
from wsworld.model import MOVING_MNIST, PHYWORLD, WEATHERBENCH

SMALL = dict(d_z=20, d_u=3)


def test_encoder_shapes_and_projection():
    cfg = EncoderConfig()
    assert cfg.feature_shape() == (512, 4, 4)
    enc = init_encoder(cfg, 0)
    assert enc.proj.in_features == 8192 and enc.proj.out_features == 961


def test_encoder_determinism_and_seeds():
    cfg = EncoderConfig(input_shape=(16, 16, 1), conv_channels=(4, 8), out_dim=10)
    a, b, c = init_encoder(cfg, 0), init_encoder(cfg, 0), init_encoder(cfg, 1)
    for (_, pa), (_, pb), (_, pc) in zip(a.named_parameters(), b.named_parameters(), c.named_parameters()):
        assert torch.equal(pa, pb)
        assert not torch.equal(pa, pc)
    x = torch.rand(3, 16, 16, 1)
    assert torch.equal(encode(x, a), encode(x, a))
    assert encode(x, a).shape == (3, 10)


def test_encoder_rejects_wrong_shape():
    enc = Encoder(EncoderConfig(input_shape=(64, 64, 1), conv_channels=(4,), out_dim=5))
    with pytest.raises(DimensionError):
        enc(torch.zeros(63, 64, 1))


def test_mnist_encoder_budget_within_20_percent():
    n = n_params(init_encoder(MOVING_MNIST.encoder, 0))
    assert abs(n - 9_423_297) / 9_423_297 < 0.2


def test_submodel_parameter_counts():
    counts = {
        "mnist idm": (n_params(InverseDynamics(MOVING_MNIST.idm)), 2_776_333),
        "mnist fdm": (n_params(ForwardDynamics(MOVING_MNIST.fdm)), 20_338_604),
        "mnist gcm": (n_params(GenerativeControl(MOVING_MNIST.gcm)), 1_251_588),
        "phyworld fdm": (n_params(ForwardDynamics(PHYWORLD.fdm)), 21_453_432),
        "phyworld gcm": (n_params(GenerativeControl(PHYWORLD.gcm)), 1_597_444),
        "weather gcm": (n_params(GenerativeControl(WEATHERBENCH.gcm)), 3_421_712),
    }
    for name, (got, want) in counts.items():
        assert got == want, name


def test_idm_output_lengths():
    assert InverseDynamics(IdmConfig(d_z=961, d_u=4, width=32)).net[-1].out_features == 4
    idm = InverseDynamics(IdmConfig(d_z=961, d_u=16, width=32))
    z = torch.randn(961)
    assert idm_infer(z, z, idm).shape == (16,)
    assert torch.equal(idm(z, z), idm(z, z))
    with pytest.raises(DimensionError):
        idm(torch.randn(960), z)


def test_additive_fdm_difference_is_bit_identical_across_states():
    torch.manual_seed(0)
    fdm = ForwardDynamics(FdmConfig(**SMALL, hidden_width=16))
    u1, u2 = torch.randn(3), torch.randn(3)
    ref = None
    for _ in range(10):
        z = torch.randn(20)
        d = fdm(z, u1) - fdm(z, u2)
        assert torch.equal(d, fdm.motion(u1) - fdm.motion(u2))
        ref = d if ref is None else ref
        assert torch.equal(d, ref)


def test_additive_fdm_zero_B_ignores_action():
    fdm = ForwardDynamics(FdmConfig(**SMALL, hidden_width=8))
    with torch.no_grad():
        for p in fdm.B.parameters():
            p.zero_()
    z = torch.randn(20)
    assert torch.equal(fdm_step(z, torch.randn(3), fdm), fdm.content(z))
    assert torch.allclose(fdm.content(z), fdm.A(z), atol=2**-16)


def test_additive_fdm_gradients_pass_through_the_grid():
    fdm = ForwardDynamics(FdmConfig(**SMALL, hidden_width=8))
    z, u = torch.randn(20, requires_grad=True), torch.randn(3, requires_grad=True)
    fdm(z, u).sum().backward()
    raw_z = torch.autograd.grad(fdm.A(z).sum(), z)[0]
    assert torch.allclose(z.grad, raw_z)


def test_joint_fdm_difference_varies_with_state():
    torch.manual_seed(1)
    fdm = ForwardDynamics(FdmConfig(**SMALL, mode="joint", hidden_width=16))
    u1, u2 = torch.randn(3), torch.randn(3)
    za, zb = torch.randn(20), torch.randn(20)
    dd = (fdm(za, u1) - fdm(za, u2)) - (fdm(zb, u1) - fdm(zb, u2))
    assert dd.abs().max() > 1e-6


def test_joint_width_matches_budget():
    for cfg in (FdmConfig(**SMALL, hidden_width=40, mode="joint"), MOVING_MNIST.fdm):
        joint = n_params(ForwardDynamics(FdmConfig(cfg.d_z, cfg.d_u, "joint", cfg.hidden_width, cfg.depth)))
        assert abs(joint - additive_param_count(cfg)) / additive_param_count(cfg) < 0.05


@pytest.mark.parametrize("kind", ["gru", "lstm", "transformer"])
def test_gcm_init_memory_is_zero(kind):
    gcm = GenerativeControl(GcmConfig(**SMALL, kind=kind, hidden=16, heads=4, max_T=20, blocks=1))
    m = gcm_init(gcm)
    if kind == "transformer":
        assert m.buffer.shape == (20, 16) and m.cursor == 1 and not m.buffer.any()
    else:
        assert m.h.shape == (16,) and not m.h.any()
        if kind == "lstm":
            assert not m.c.any()
    assert gcm.decode(m, torch.randn(20), 1).shape == (3,)


def _transformer(seed=0):
    torch.manual_seed(seed)
    return GenerativeControl(GcmConfig(**SMALL, kind="transformer", hidden=16, heads=4, max_T=8, blocks=2))


def test_transformer_decode_is_causal():
    gcm = _transformer()
    mem = gcm.init_memory()
    for t in range(1, 5):
        mem = gcm.encode(mem, torch.randn(20), torch.randn(3), t)
    z = torch.randn(20)
    base = gcm.decode(mem, z, 5)
    noisy = mem.buffer.clone()
    noisy[5:] = torch.randn_like(noisy[5:]) * 100
    mem.buffer = noisy
    assert torch.equal(gcm.decode(mem, z, 5), base)


def test_transformer_encode_touches_only_row_t():
    gcm = _transformer()
    mem = gcm.init_memory()
    new = gcm.encode(mem, torch.randn(20), torch.randn(3), 1)
    assert torch.equal(new.buffer[1:], mem.buffer[1:])
    assert new.buffer[0].abs().sum() > 0
    with pytest.raises(GcmStepError):
        gcm.encode(new, torch.randn(20), torch.randn(3), 1)
    with pytest.raises(GcmStepError):
        gcm.encode(new, torch.randn(20), torch.randn(3), 3)
    with pytest.raises(GcmStepError):
        gcm.decode(new, torch.randn(20), 9)
    with pytest.raises(GcmStepError):
        gcm.decode(new, torch.randn(20), 0)


@pytest.mark.parametrize("kind", ["gru", "lstm"])
def test_recurrent_encode_depends_on_all_inputs(kind):
    torch.manual_seed(2)
    gcm = GenerativeControl(GcmConfig(**SMALL, kind=kind, hidden=8))
    mem = gcm.encode(gcm.init_memory(), torch.randn(20), torch.randn(3), 1)
    z, u = torch.randn(20), torch.randn(3)
    base = gcm.encode(mem, z, u, 2).h
    mem2 = gcm.encode(gcm.init_memory(), torch.randn(20), torch.randn(3), 1)
    assert not torch.equal(gcm.encode(mem2, z, u, 2).h, base)
    assert not torch.equal(gcm.encode(mem, z + 0.1, u, 2).h, base)
    assert not torch.equal(gcm.encode(mem, z, u + 0.1, 2).h, base)
    # decode is a pure function of (memory, z)
    assert torch.equal(gcm.decode(mem, z, 2), gcm.decode(mem, z, 2))


def test_quantize_examples():
    book = torch.tensor([[0.0, 0.0], [1.0, 1.0], [2.0, -1.0], [0.5, 3.0]])
    q, i = quantize(book[3].clone(), book)
    assert i.item() == 3 and torch.equal(q, book[3])
    q, i = quantize(torch.tensor([0.2, 0.2]), book[:2])
    assert i.item() == 0 and q.tolist() == [0.0, 0.0]
    # exact tie between rows 0 and 1 resolves to the lower index
    _, i = quantize(torch.tensor([0.5, 0.5]), book[:2])
    assert i.item() == 0
    with pytest.raises(EmptyCodebookError):
        quantize(torch.zeros(2), torch.zeros(0, 2))
    with pytest.raises(EmptyCodebookError):
        Codebook(n_codes=0)


@given(seed=st.integers(0, 10_000))
@settings(max_examples=25, deadline=None)
def test_quantize_returns_a_codebook_row(seed):
    g = torch.Generator().manual_seed(seed)
    book = torch.randn(7, 2, generator=g)
    u = torch.randn(5, 2, generator=g)
    q, idx = quantize(u, book)
    for r in range(5):
        assert torch.equal(q[r], book[idx[r]])
        d = ((book - u[r]) ** 2).sum(-1)
        assert d[idx[r]] == d.min()


def test_straight_through_jacobian_is_identity():
    book = torch.randn(10, 2, dtype=torch.float64, generator=torch.Generator().manual_seed(0))
    u = torch.tensor([0.3, -0.2], dtype=torch.float64, requires_grad=True)
    jac = torch.autograd.functional.jacobian(lambda v: quantize(v, book, straight_through=True)[0], u)
    # finite-difference oracle on the surrogate u + sg(q - u) with q held fixed
    q = quantize(u.detach(), book)[0]
    eps = 1e-6
    fd = torch.stack([((u.detach() + eps * e) + (q - u.detach()) - ((u.detach() - eps * e) + (q - u.detach()))) / (2 * eps) for e in torch.eye(2, dtype=torch.float64)], 1)
    assert torch.allclose(jac, torch.eye(2, dtype=torch.float64), atol=1e-4)
    assert torch.allclose(fd, jac, atol=1e-4)
    q_st, _ = quantize(u, book, straight_through=True)
    assert torch.equal(q_st.detach(), q)


def test_codebook_ema_moves_towards_assigned_inputs():
    torch.manual_seed(0)
    cb = Codebook(n_codes=3, d_u=2, decay=0.5)
    target = cb.vectors[1] + 0.3
    before = (cb.vectors[1] - target).norm()
    for _ in range(20):
        cb.ema_update(target.expand(4, 2), torch.ones(4, dtype=torch.long))
    assert (cb.vectors[1] - target).norm() < before * 0.1
