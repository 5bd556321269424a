import numpy as np
import pytest
import torch
import torch.nn.functional as F

from defectsynth.controlmap import ControlRegionSpec, Region, label_maps, paint_regions
from defectsynth.generator import SPADE, Generator, GeneratorConfig, compose, inject_noise


def tiny(**kw):
    cfg = dict(image_size=16, base_width=4, n_res_blocks=1, spade_hidden=8)
    cfg.update(kw)
    return Generator(GeneratorConfig(**cfg))


def uniform_maps(b, size, k=1):
    labels = torch.zeros(b, 6)
    labels[:, k] = 1
    return label_maps(labels, size, size)


def set_noise_scales(G, value):
    for name, p in G.named_parameters():
        if name.endswith("inject.scale"):
            p.data.fill_(value)


def test_output_shapes_128():
    G = tiny(image_size=128)
    x = torch.rand(1, 3, 128, 128) * 2 - 1
    f, m = G(x, uniform_maps(1, 128), noise_seed=0)
    assert f.shape == (1, 3, 128, 128) and m.shape == (1, 1, 128, 128)


def test_config_validation():
    with pytest.raises(ValueError):
        GeneratorConfig(image_size=30).validate()
    with pytest.raises(ValueError):
        GeneratorConfig(base_width=0).validate()


def test_shape_mismatch():
    G = tiny()
    with pytest.raises(ValueError):
        G(torch.zeros(1, 3, 16, 16), uniform_maps(1, 8))
    with pytest.raises(ValueError):
        G(torch.zeros(1, 3, 16, 16), torch.zeros(1, 5, 16, 16))


def test_zero_noise_scales_ignore_seed():
    G = tiny()
    set_noise_scales(G, 0.0)
    x, A = torch.rand(2, 3, 16, 16), uniform_maps(2, 16)
    a, b = G(x, A, noise_seed=1), G(x, A, noise_seed=2)
    assert torch.equal(a[0], b[0]) and torch.equal(a[1], b[1])


def test_noise_seeds_change_output():
    G = tiny()
    set_noise_scales(G, 0.5)
    x, A = torch.rand(1, 3, 16, 16), uniform_maps(1, 16)
    for s in range(5):
        f1, _ = G(x, A, noise_seed=2 * s)
        f2, _ = G(x, A, noise_seed=2 * s + 1)
        assert (f1 != f2).any()


def test_fixed_seed_deterministic():
    G = tiny()
    set_noise_scales(G, 0.5)
    x, A = torch.rand(2, 3, 16, 16), uniform_maps(2, 16)
    a, b = G(x, A, noise_seed=9), G(x, A, noise_seed=9)
    assert torch.equal(a[0], b[0]) and torch.equal(a[1], b[1])
    c, d = G(x, A, noise_seed=3, use_noise=False), G(x, A, noise_seed=4, use_noise=False)
    assert torch.equal(c[0], d[0])


def test_spade_zero_init_identity():
    spade = SPADE(5, 6, 8)
    x = torch.randn(2, 5, 4, 4)
    for A in (torch.rand(2, 6, 16, 16), torch.zeros(2, 6, 16, 16)):
        out = spade(x, A)
        assert out.shape == x.shape
        torch.testing.assert_close(out, F.instance_norm(x), rtol=0, atol=0)


def test_spade_responds_to_control():
    spade = SPADE(5, 6, 8)
    with torch.no_grad():
        spade.gamma.weight[0, 0, 1, 1] = 1.0
        spade.shared[0].weight.fill_(0.3)
    x = torch.randn(1, 5, 4, 4)
    a = spade(x, uniform_maps(1, 8, k=0))
    b = spade(x, uniform_maps(1, 8, k=3) * 0)
    assert not torch.allclose(a, b)


def test_inject_noise_identity_and_definition():
    x = torch.randn(3, 4, 5, 5)
    g = torch.Generator().manual_seed(0)
    assert torch.equal(inject_noise(x, 0.0, g), x)
    z = torch.randn(x.shape, generator=torch.Generator().manual_seed(7))
    out = inject_noise(x, 0.3, torch.Generator().manual_seed(7))
    torch.testing.assert_close(out - x, 0.3 * z)


def test_inject_noise_variance():
    x = torch.zeros(100_000, dtype=torch.float64)
    diff = inject_noise(x, 2.0, torch.Generator().manual_seed(1)) - x
    # sample variance oracle
    var = float(np.var(diff.numpy(), ddof=1))
    assert abs(var - 4.0) <= 0.05 * 4.0


def test_compose_identities(rng):
    bg = torch.from_numpy(rng.uniform(-1, 1, (2, 3, 8, 8)))
    f = torch.from_numpy(rng.uniform(-1, 1, (2, 3, 8, 8)))
    zero, one = torch.zeros(2, 1, 8, 8, dtype=bg.dtype), torch.ones(2, 1, 8, 8, dtype=bg.dtype)
    assert torch.equal(compose(bg, f, zero), bg)
    assert torch.equal(compose(bg, f, one), f)
    out = compose(torch.full((1, 3, 4, 4), 0.2), torch.full((1, 3, 4, 4), 0.8), torch.full((1, 1, 4, 4), 0.5))
    torch.testing.assert_close(out, torch.full((1, 3, 4, 4), 0.5))


def test_compose_linear_in_m(rng):
    bg = torch.from_numpy(rng.uniform(-1, 1, (1, 3, 6, 6)))
    f = torch.from_numpy(rng.uniform(-1, 1, (1, 3, 6, 6)))
    m = torch.from_numpy(rng.uniform(0, 1, (1, 1, 6, 6)))
    full, half = compose(bg, f, m), compose(bg, f, m / 2)
    torch.testing.assert_close(half, (bg + full) / 2)


def test_compose_rejects_bad_map():
    with pytest.raises(AssertionError):
        compose(torch.zeros(1, 3, 2, 2), torch.zeros(1, 3, 2, 2), torch.full((1, 1, 2, 2), 1.5))


def test_output_ranges_random_inputs():
    G = Generator(GeneratorConfig(image_size=8, base_width=4, n_res_blocks=1, spade_hidden=4))
    set_noise_scales(G, 1.0)
    with torch.no_grad():
        for p in G.parameters():
            p.add_(torch.randn_like(p))
        x = torch.rand(1000, 3, 8, 8) * 2 - 1
        f, m = G(x, uniform_maps(1000, 8), noise_seed=0)
    assert f.abs().max() <= 1 and m.min() >= 0 and m.max() <= 1


def test_deface_restore_contract():
    G = tiny()
    n = torch.rand(2, 3, 16, 16) * 2 - 1
    d, f, m = G.deface(n, uniform_maps(2, 16), noise_seed=0)
    assert d.shape == n.shape and d.abs().max() <= 1
    n_hat, _, _ = G.restore(d, noise_seed=1)
    assert n_hat.shape == n.shape


def test_composition_ablated_returns_foreground():
    G = tiny(composition=False)
    n = torch.rand(1, 3, 16, 16)
    A = uniform_maps(1, 16)
    d, f, m = G.deface(n, A, noise_seed=0)
    f_direct, _ = G(n, A, noise_seed=0)
    assert torch.equal(d, f) and torch.equal(d, f_direct)
    assert G.to_map is None and torch.all(m == 0)


def test_clamped_maps_give_exact_restore():
    G = tiny()
    with torch.no_grad():
        G.to_map.weight.zero_()
        G.to_map.bias.fill_(-1e4)
    n = torch.rand(2, 3, 16, 16) * 2 - 1
    d, _, m_d = G.deface(n, uniform_maps(2, 16), noise_seed=0)
    n_hat, _, m_r = G.restore(d, noise_seed=1)
    assert torch.all(m_d == 0) and torch.all(m_r == 0)
    assert torch.equal(n_hat, n)


def test_invariant_to_control_mode():
    G = tiny()
    n_params = sum(p.numel() for p in G.parameters())
    x = torch.rand(1, 3, 16, 16)
    spatial = paint_regions(ControlRegionSpec([Region(0, (2, 2, 9, 9))]), 16, 16).to_tensor()
    f1, m1 = G(x, uniform_maps(1, 16), noise_seed=0)
    f2, m2 = G(x, spatial, noise_seed=0)
    assert f1.shape == f2.shape and m1.shape == m2.shape
    assert n_params == sum(p.numel() for p in G.parameters())


def test_ablation_switches_change_structure():
    full = tiny()
    no_noise = tiny(noise=False)
    no_spade = tiny(spade=False)
    assert any("inject" in n for n, _ in full.named_parameters())
    assert not any("inject" in n for n, _ in no_noise.named_parameters())
    assert not any("gamma" in n for n, _ in no_spade.named_parameters())
    assert no_spade.encoder[0].conv.in_channels == 9
    f, _ = no_spade(torch.rand(1, 3, 16, 16), uniform_maps(1, 16))
    assert f.shape == (1, 3, 16, 16)


def test_control_reaches_decoder_only():
    G = tiny()
    assert G.encoder[0].conv.in_channels == 3
    spades = [m for m in G.modules() if isinstance(m, SPADE)]
    assert len(spades) == 2 * G.config.n_res_blocks + 2
