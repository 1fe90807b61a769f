import copy

import pytest
import torch

from facemime.config import GeneratorConfig, make_preset
from facemime.dataio import module_weights_digest
from facemime.errors import ShapeError
from facemime.generator import StyleBasedGenerator, build_generator
from facemime.latents import StyleLatent, WPlusLatent

from conftest import tiny_generator_config


def seeded_w(gen, seed=3, batch=2):
    g = torch.Generator().manual_seed(seed)
    z = torch.randn(batch, gen.cfg.latent_dim, generator=g)
    return gen.map_z_to_w(z)


def test_build_is_deterministic():
    a = build_generator(tiny_generator_config(), seed=11)
    b = build_generator(tiny_generator_config(), seed=11)
    assert module_weights_digest(a) == module_weights_digest(b)
    c = build_generator(tiny_generator_config(), seed=12)
    assert module_weights_digest(a) != module_weights_digest(c)


def test_render_shapes_and_range(tiny_gen):
    w = seeded_w(tiny_gen)
    img = tiny_gen.generate(w, tiny_gen.zero_offset((2,)))
    assert img.shape == (2, 3, 32, 32)
    assert float(img.min()) >= 0.0 and float(img.max()) <= 1.0
    assert torch.isfinite(img).all()


def test_render_is_repeatable(tiny_gen):
    w = seeded_w(tiny_gen)
    a = tiny_gen.generate(w, tiny_gen.zero_offset((2,)))
    b = tiny_gen.generate(w, tiny_gen.zero_offset((2,)))
    assert torch.equal(a, b)


def test_map_z_broadcasts_same_row_to_all_layers(tiny_gen):
    w = seeded_w(tiny_gen, batch=3)
    assert w.layers.shape == (3, tiny_gen.cfg.n_layers, tiny_gen.cfg.latent_dim)
    for i in range(1, tiny_gen.cfg.n_layers):
        assert torch.equal(w.layers[:, i], w.layers[:, 0])


def test_truncation_endpoints(tiny_gen):
    g = torch.Generator().manual_seed(0)
    z = torch.randn(4, tiny_gen.cfg.latent_dim, generator=g)
    w_full = tiny_gen.map_z_to_w(z, psi=1.0)
    w_zero = tiny_gen.map_z_to_w(z, psi=0.0)
    raw = tiny_gen.mapping(z)
    assert torch.allclose(w_full.layers[:, 0], raw, atol=1e-6)
    assert torch.allclose(w_zero.layers[:, 0],
                          tiny_gen.w_mean.expand(4, -1), atol=1e-6)
    # psi interpolates between the two
    w_half = tiny_gen.map_z_to_w(z, psi=0.5)
    mid = tiny_gen.w_mean + 0.5 * (raw - tiny_gen.w_mean)
    assert torch.allclose(w_half.layers[:, 0], mid, atol=1e-6)


def test_map_z_validation(tiny_gen):
    z = torch.zeros(2, tiny_gen.cfg.latent_dim)
    with pytest.raises(ShapeError):
        tiny_gen.map_z_to_w(z, psi=1.5)
    with pytest.raises(ShapeError):
        tiny_gen.map_z_to_w(torch.zeros(2, tiny_gen.cfg.latent_dim + 1))
    bad = z.clone()
    bad[0, 0] = float("nan")
    with pytest.raises(ShapeError):
        tiny_gen.map_z_to_w(bad)


def test_w_mean_matches_fresh_sample_mean(tiny_gen):
    g = torch.Generator().manual_seed(999)
    z = torch.randn(20_000, tiny_gen.cfg.latent_dim, generator=g)
    with torch.no_grad():
        ref = tiny_gen.mapping(z).mean(dim=0)
    err = float((tiny_gen.w_mean - ref).norm()) / max(float(ref.norm()), 1e-8)
    assert err < 0.15  # two independent 10k/20k-sample estimates


def test_affine_at_zero_w_equals_bias(tiny_gen):
    w = WPlusLatent(torch.zeros(1, tiny_gen.cfg.n_layers, tiny_gen.cfg.latent_dim))
    style = tiny_gen.affine(w)
    for vec in style.per_layer:
        assert torch.allclose(vec, torch.ones_like(vec))  # affine bias starts at one


def test_affine_is_exactly_linear_plus_bias():
    # float64 copy: A(w + d) - A(w) must equal the bias-free map of d
    gen = build_generator(tiny_generator_config(), seed=11)
    bank = copy.deepcopy(gen.affines).double()
    g = torch.Generator().manual_seed(5)
    L, D = gen.cfg.n_layers, gen.cfg.latent_dim
    w = torch.randn(2, L, D, generator=g, dtype=torch.float64)
    d = torch.randn(2, L, D, generator=g, dtype=torch.float64)
    full = bank(w + d)
    base = bank(w)
    lin = bank.linear_map(d, list(range(L)))
    for f, b, l in zip(full, base, lin):
        rel = float((f - b - l).abs().max() / (l.abs().max() + 1e-12))
        assert rel < 1e-6


def test_offset_mask_contract(tiny_gen):
    w = seeded_w(tiny_gen, batch=1)
    widths = tiny_gen.cfg.style_widths()
    wrong = StyleLatent.zero_offset(widths, tiny_gen.cfg.deform_layers + 1, (1,))
    with pytest.raises(ShapeError):
        tiny_gen.generate(w, wrong)


def test_zero_offset_render_matches_plain_synthesis(tiny_gen):
    w = seeded_w(tiny_gen, batch=2)
    via_generate = tiny_gen.generate(w, tiny_gen.zero_offset((2,)))
    via_affine = tiny_gen.synthesize(tiny_gen.affine(w))
    assert torch.equal(via_generate, via_affine)


def test_offsets_move_pixels(tiny_gen):
    w = seeded_w(tiny_gen, batch=1)
    base = tiny_gen.generate(w, tiny_gen.zero_offset((1,)))
    off = tiny_gen.zero_offset((1,))
    off.per_layer[0] += 0.5
    moved = tiny_gen.generate(w, off)
    assert float((moved - base).abs().mean()) > 1e-4


def test_every_active_layer_offset_is_visible(tiny_gen):
    w = seeded_w(tiny_gen, batch=1)
    base = tiny_gen.generate(w, tiny_gen.zero_offset((1,)))
    for layer in range(tiny_gen.cfg.deform_layers):
        off = tiny_gen.zero_offset((1,))
        off.per_layer[layer] += 0.5
        img = tiny_gen.generate(w, off)
        assert float((img - base).abs().mean()) > 1e-5, f"layer {layer} offset inert"


def test_unbatched_latents_round_trip(tiny_gen):
    w = seeded_w(tiny_gen, batch=1)
    batched = tiny_gen.generate(w, tiny_gen.zero_offset((1,)))
    w_flat = WPlusLatent(w.layers[0])
    flat = tiny_gen.generate(w_flat, tiny_gen.zero_offset(()))
    assert flat.shape == (3, 32, 32)
    assert torch.allclose(flat, batched[0], atol=1e-5)


def test_clone_is_independent(tiny_gen):
    clone = tiny_gen.clone()
    assert module_weights_digest(clone) == module_weights_digest(tiny_gen)
    with torch.no_grad():
        next(clone.synthesis.parameters()).add_(1.0)
    assert module_weights_digest(clone) != module_weights_digest(tiny_gen)


def test_style_width_schedule_at_both_scales():
    toy = make_preset("toy64").generator
    assert toy.style_widths() == [256, 256, 256, 128, 128, 64, 64, 32, 32, 16]
    paper = make_preset("paper1024").generator
    assert len(paper.style_widths()) == 18
    gen = build_generator(GeneratorConfig(
        resolution=64, latent_dim=32, channels={4: 16, 8: 16, 16: 8, 32: 8, 64: 4},
        mapping_layers=2), seed=1)
    w = seeded_w(gen, batch=1)
    img = gen.generate(w, gen.zero_offset((1,)))
    assert img.shape == (1, 3, 64, 64)


def test_weights_never_require_grad(tiny_gen):
    assert all(not p.requires_grad for p in tiny_gen.parameters())
