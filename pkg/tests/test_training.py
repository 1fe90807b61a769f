import dataclasses
import json

import numpy as np
import pytest
import torch

from facemime.config import TrainConfig
from facemime.dataio import module_weights_digest
from facemime.encoder import build_encoder
from facemime.errors import ConfigError, DataError, DivergenceError
from facemime.training import (Lookahead, Trainer, build_optimizer,
                               load_encoder_checkpoint, load_generator_checkpoint,
                               run_training, sample_triplet,
                               save_generator_checkpoint)

from conftest import tiny_encoder_config, tiny_run_config


def short_cfg(seed=0, pre=4, fine=2, **kw):
    cfg = tiny_run_config(seed=seed)
    cfg.pretrain = dataclasses.replace(
        cfg.pretrain, iterations=pre, batch_size=2, progressive_interval=2,
        log_every=2, **kw)
    cfg.finetune = dataclasses.replace(
        cfg.finetune, iterations=fine, batch_size=2, log_every=1)
    return cfg


# -- lookahead / optimizers ----------------------------------------------------


def test_lookahead_interpolates_every_k_steps():
    p = torch.nn.Parameter(torch.zeros(1))
    base = torch.optim.SGD([p], lr=1.0)
    opt = Lookahead(base, k=2, alpha=0.5)
    slow = 0.0
    fast = 0.0
    for step in range(1, 7):
        opt.zero_grad()
        p.grad = torch.ones(1)  # fast weights decrease by lr each step
        opt.step()
        fast -= 1.0
        if step % 2 == 0:
            slow = slow + 0.5 * (fast - slow)
            fast = slow
        assert float(p.detach()) == pytest.approx(fast, abs=1e-6)


def test_lookahead_slow_state_starts_at_initial_weights():
    p = torch.nn.Parameter(torch.full((2,), 3.0))
    opt = Lookahead(torch.optim.SGD([p], lr=0.1), k=5, alpha=0.5)
    for _ in range(4):
        opt.zero_grad()
        p.grad = torch.ones(2)
        opt.step()
    before_sync = p.detach().clone()
    opt.zero_grad()
    p.grad = torch.ones(2)
    opt.step()  # fifth step triggers the pull toward the slow weights
    fast = before_sync - 0.1
    expected = 3.0 + 0.5 * (fast - 3.0)
    assert torch.allclose(p.detach(), expected, atol=1e-6)


def test_build_optimizer_names():
    p = [torch.nn.Parameter(torch.zeros(1))]
    assert isinstance(build_optimizer(p, "ranger", 1e-3), Lookahead)
    assert isinstance(build_optimizer(p, "radam", 1e-3), torch.optim.RAdam)
    assert isinstance(build_optimizer(p, "adam", 1e-3), torch.optim.Adam)
    with pytest.raises(ConfigError):
        build_optimizer(p, "sgd", 1e-3)


# -- triplet sampling ----------------------------------------------------------


def test_triplet_constraints_hold(tiny_clips, rng):
    for _ in range(200):
        t = sample_triplet(tiny_clips, rng)
        assert tiny_clips[t.src_clip].identity != tiny_clips[t.other_clip].identity
        assert t.same_t != t.src_t
        assert 0 <= t.src_t < tiny_clips[t.src_clip].frames.shape[0]
        assert 0 <= t.other_t < tiny_clips[t.other_clip].frames.shape[0]


def test_triplet_same_frame_distribution_is_uniform(tiny_clips, rng):
    # same_t must be uniform over the other frames of the clip
    counts = np.zeros(6)
    n = 3000
    for _ in range(n):
        t = sample_triplet(tiny_clips, rng)
        counts[t.same_t] += 1
    # each frame appears as src 1/6 of the time; conditional on src != t,
    # p(same_t = t) = (1/6) * sum_{s != t} 1/5 / ... -> uniform 1/6 overall
    expected = n / 6
    sigma = np.sqrt(n * (1 / 6) * (5 / 6))
    assert np.all(np.abs(counts - expected) < 4 * sigma)


def test_triplet_needs_two_identities(tiny_clips, rng):
    with pytest.raises(DataError):
        sample_triplet(tiny_clips[:1], rng)


# -- trainer -------------------------------------------------------------------


@pytest.fixture(scope="module")
def short_run(tmp_path_factory, tiny_clips):
    out = tmp_path_factory.mktemp("run")
    cfg = short_cfg()
    gen, enc, history = run_training(cfg, tiny_clips, out)
    return cfg, gen, enc, history, out


def test_training_leaves_generator_frozen(short_run):
    cfg, gen, _, _, _ = short_run
    from facemime.generator import build_generator
    fresh = build_generator(cfg.generator, cfg.seed)
    assert module_weights_digest(gen) == module_weights_digest(fresh)
    assert all(not p.requires_grad for p in gen.parameters())


def test_training_history_and_jsonl_log(short_run):
    cfg, _, _, history, out = short_run
    stages = {h["stage"] for h in history}
    assert stages == {"pretrain", "finetune"}
    for stage, steps in (("pretrain", cfg.pretrain.iterations),
                         ("finetune", cfg.finetune.iterations)):
        lines = (out / f"train_{stage}.jsonl").read_text().splitlines()
        entries = [json.loads(line) for line in lines]
        assert entries[-1]["step"] == steps - 1
        assert all(np.isfinite(e["total"]) for e in entries)
        assert all(isinstance(e["l2_self"], float) for e in entries)
    # fine-tune stage turns the masked feature term on
    fin = [h for h in history if h["stage"] == "finetune"]
    assert all("feat_self" in h for h in fin)
    pre = [h for h in history if h["stage"] == "pretrain"]
    assert all("feat_self" not in h for h in pre)


def test_checkpoints_written_and_loadable(short_run):
    cfg, gen, enc, _, out = short_run
    for name in ("encoder_pretrain.nac", "encoder_finetune.nac"):
        assert (out / name).exists()
    loaded = load_encoder_checkpoint(out / "encoder_finetune.nac", gen)
    assert module_weights_digest(loaded) == module_weights_digest(enc)
    img = torch.rand(1, 3, 32, 32, generator=torch.Generator().manual_seed(0))
    a = loaded.encode(img)
    b = enc.encode(img)
    assert torch.allclose(a.w_id.layers, b.w_id.layers, atol=1e-6)


def test_encoder_checkpoint_guards_generator_config(short_run, tmp_path):
    cfg, gen, enc, _, out = short_run
    other_cfg = tiny_run_config()
    other_cfg.generator.truncation_psi = 0.9
    from facemime.generator import build_generator
    other_gen = build_generator(other_cfg.generator, seed=0)
    with pytest.raises(DataError, match="different generator"):
        load_encoder_checkpoint(out / "encoder_finetune.nac", other_gen)


def test_resume_from_pretrain_checkpoint(short_run, tiny_clips, tmp_path):
    cfg, gen, _, _, out = short_run
    cfg2 = short_cfg()
    cfg2.pretrain.iterations = 0
    gen2, enc2, history = run_training(cfg2, tiny_clips, tmp_path,
                                       pretrain_ckpt=out / "encoder_pretrain.nac")
    assert all(h["stage"] == "finetune" for h in history)
    assert (tmp_path / "encoder_finetune.nac").exists()


def test_finetune_without_pretrain_rejected(tiny_clips, tmp_path):
    cfg = short_cfg()
    cfg.pretrain.iterations = 0
    with pytest.raises(ConfigError):
        run_training(cfg, tiny_clips, tmp_path)


def test_generator_checkpoint_round_trip(short_run, tmp_path):
    _, gen, _, _, _ = short_run
    p = tmp_path / "gen.nac"
    tuned = gen.clone()
    with torch.no_grad():
        next(tuned.synthesis.parameters()).add_(0.25)
    save_generator_checkpoint(p, tuned, {"steps": 3})
    back = load_generator_checkpoint(p, gen)
    assert module_weights_digest(back) == module_weights_digest(tuned)
    assert module_weights_digest(back) != module_weights_digest(gen)


def test_progressive_stage_grows_during_pretrain(tiny_gen, tiny_clips):
    cfg = short_cfg()
    enc = build_encoder(tiny_gen.cfg, tiny_encoder_config(), seed=0,
                        affine_bank=tiny_gen.affines, w_mean=tiny_gen.w_mean)
    trainer = Trainer(tiny_gen, enc, tiny_clips, cfg, cfg.pretrain)
    n = tiny_gen.cfg.n_layers
    assert min(n, 1 + 0 // 2) == 1
    trainer.run_stage()
    # 4 iterations at interval 2 -> stage min(n, 1 + 3//2) = 2 at the end
    assert enc.progressive_stage == 2


def test_finetune_freezes_backbone_and_uses_all_layers(tiny_gen, tiny_clips):
    cfg = short_cfg()
    enc = build_encoder(tiny_gen.cfg, tiny_encoder_config(), seed=0,
                        affine_bank=tiny_gen.affines, w_mean=tiny_gen.w_mean)
    trainer = Trainer(tiny_gen, enc, tiny_clips, cfg, cfg.finetune)
    assert enc.progressive_stage == tiny_gen.cfg.n_layers
    assert all(not p.requires_grad for p in enc.backbone.parameters())
    digest = module_weights_digest(enc.backbone)
    trainer.run_stage()
    assert module_weights_digest(enc.backbone) == digest


def test_divergent_loss_raises_with_diagnostics(tiny_gen, tiny_clips, monkeypatch):
    import facemime.training as training_mod

    def poisoned_total_loss(**kw):
        bad = torch.tensor(float("nan"), requires_grad=True)
        return bad, {"total": bad, "l2_self": torch.tensor(float("nan"))}

    monkeypatch.setattr(training_mod, "total_loss", poisoned_total_loss)
    cfg = short_cfg()
    enc = build_encoder(tiny_gen.cfg, tiny_encoder_config(), seed=0,
                        affine_bank=tiny_gen.affines, w_mean=tiny_gen.w_mean)
    trainer = Trainer(tiny_gen, enc, tiny_clips, cfg, cfg.pretrain)
    with pytest.raises(DivergenceError) as exc_info:
        trainer.train_step(7)
    diag = exc_info.value.diagnostics
    assert diag["step"] == 7
    assert diag["stage"] == "pretrain"
    assert "terms" in diag


def test_no_id_reg_ablation_removes_terms(tiny_gen, tiny_clips):
    cfg = short_cfg()
    cfg.ablation.no_id_reg = True
    enc = build_encoder(tiny_gen.cfg, tiny_encoder_config(), seed=0,
                        affine_bank=tiny_gen.affines, w_mean=tiny_gen.w_mean)
    trainer = Trainer(tiny_gen, enc, tiny_clips, cfg, cfg.pretrain)
    terms = trainer.train_step(0)
    assert "id_anchor" not in terms
    assert "w_consist" not in terms
    assert "id_puppet" in terms


def test_training_is_reproducible(tiny_clips, tmp_path):
    cfg_a = short_cfg(seed=3, pre=3, fine=0)
    gen_a, enc_a, _ = run_training(cfg_a, tiny_clips, tmp_path / "a")
    cfg_b = short_cfg(seed=3, pre=3, fine=0)
    gen_b, enc_b, _ = run_training(cfg_b, tiny_clips, tmp_path / "b")
    assert module_weights_digest(enc_a) == module_weights_digest(enc_b)
    assert (tmp_path / "a" / "encoder_pretrain.nac").read_bytes() == \
        (tmp_path / "b" / "encoder_pretrain.nac").read_bytes()
