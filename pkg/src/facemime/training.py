"""Self-supervised two-stage training of the encoder over a frozen generator.

Each step samples triplets (source frame, another frame of the same clip,
a frame of a different identity), renders four images from mixed latents
and optimizes the assembled objective. A small discriminator on single w
rows keeps the identity codes near the generator's own latent
distribution.

The first stage trains everything with the masked region term disabled;
the second stage freezes the backbone and enables it.
"""

import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .config import RunConfig, TrainConfig, to_plain_dict
from .dataio import load_module_checkpoint, module_weights_digest, save_module_checkpoint
from .encoder import DualHeadEncoder, build_encoder
from .errors import ConfigError, DataError, DivergenceError, ModelHealthError
from .generator import StyleBasedGenerator, build_generator
from .latents import WPlusLatent
from .losses import (build_discriminator, build_embedder, build_perceptual,
                     discriminator_loss, total_loss)
from .rng import RngHub


class Lookahead(torch.optim.Optimizer):
    """Slow/fast weight wrapper around another optimizer."""

    def __init__(self, base: torch.optim.Optimizer, k: int = 5, alpha: float = 0.5):
        self.base = base
        self.k = k
        self.alpha = alpha
        self.param_groups = base.param_groups
        self.state = base.state
        self.defaults = base.defaults
        self._counter = 0
        self._slow = [
            [p.detach().clone() for p in group["params"]]
            for group in base.param_groups
        ]

    def zero_grad(self, set_to_none: bool = True):
        self.base.zero_grad(set_to_none=set_to_none)

    @torch.no_grad()
    def step(self, closure=None):
        loss = self.base.step(closure)
        self._counter += 1
        if self._counter % self.k == 0:
            for group, slots in zip(self.base.param_groups, self._slow):
                for p, slow in zip(group["params"], slots):
                    slow.add_(p.detach() - slow, alpha=self.alpha)
                    p.copy_(slow)
        return loss


def build_optimizer(params, name: str, lr: float) -> torch.optim.Optimizer:
    params = list(params)
    if name == "ranger":
        return Lookahead(torch.optim.RAdam(params, lr=lr))
    if name == "radam":
        return torch.optim.RAdam(params, lr=lr)
    if name == "adam":
        return torch.optim.Adam(params, lr=lr)
    raise ConfigError(f"unknown optimizer {name!r}")


# -- triplet sampling ------------------------------------------------------------


@dataclass
class Triplet:
    src_clip: int
    src_t: int
    same_t: int
    other_clip: int
    other_t: int


def sample_triplet(clips, rng: np.random.Generator) -> Triplet:
    """Source frame, a second frame of its clip, a frame of another identity."""
    by_identity: dict[str, list[int]] = {}
    for i, c in enumerate(clips):
        by_identity.setdefault(c.identity, []).append(i)
    idents = sorted(by_identity)
    if len(idents) < 2:
        raise DataError("triplet sampling needs at least two identities")

    ident = idents[rng.integers(len(idents))]
    src_clip = by_identity[ident][rng.integers(len(by_identity[ident]))]
    t_count = clips[src_clip].frames.shape[0]
    src_t = int(rng.integers(t_count))
    if t_count > 1:
        same_t = int(rng.integers(t_count - 1))
        if same_t >= src_t:
            same_t += 1
    else:
        same_t = src_t

    other_ident = idents[rng.integers(len(idents) - 1)]
    if other_ident == ident:
        other_ident = idents[-1]
    other_clip = by_identity[other_ident][rng.integers(len(by_identity[other_ident]))]
    other_t = int(rng.integers(clips[other_clip].frames.shape[0]))
    return Triplet(src_clip, src_t, same_t, other_clip, other_t)


# -- trainer -----------------------------------------------------------------------


class Trainer:
    def __init__(self, gen: StyleBasedGenerator, encoder: DualHeadEncoder,
                 clips, run_cfg: RunConfig, stage_cfg: TrainConfig,
                 out_dir: str | Path | None = None):
        if stage_cfg.stage not in ("pretrain", "finetune"):
            raise ConfigError(f"unknown training stage {stage_cfg.stage!r}")
        self.gen = gen
        self.encoder = encoder
        self.clips = list(clips)
        self.run_cfg = run_cfg
        self.cfg = stage_cfg
        self.out_dir = Path(out_dir) if out_dir is not None else None
        self.hub = RngHub(run_cfg.seed)
        self.np_rng = self.hub.numpy_gen(f"triplets-{stage_cfg.stage}")
        self.z_gen = self.hub.torch_gen(f"disc-real-{stage_cfg.stage}")

        self.perceptual = build_perceptual(run_cfg.seed)
        self.embedder = build_embedder(run_cfg.seed)

        weights = dataclasses.replace(run_cfg.loss_weights)
        if stage_cfg.stage == "pretrain":
            weights.f = 0.0
        if run_cfg.ablation.no_id_reg:
            weights.w_id = 0.0
        self.weights = weights

        if stage_cfg.stage == "finetune":
            self.encoder.backbone.requires_grad_(False)
            self.encoder.set_progressive_stage(gen.cfg.n_layers)
        else:
            self.encoder.backbone.requires_grad_(True)

        deform_names = {n for n, _ in self.encoder.named_parameters()
                        if n.startswith(("deform_heads.", "deform_bases."))
                        or n == "deform_gain"}
        trainable = [(n, p) for n, p in self.encoder.named_parameters() if p.requires_grad]
        if stage_cfg.deform_lr_mul == 1.0:
            params = [p for _, p in trainable]
        else:
            params = [
                {"params": [p for n, p in trainable if n not in deform_names],
                 "lr": stage_cfg.encoder_lr},
                {"params": [p for n, p in trainable if n in deform_names],
                 "lr": stage_cfg.encoder_lr * stage_cfg.deform_lr_mul},
            ]
        self.opt = build_optimizer(params, stage_cfg.optimizer, stage_cfg.encoder_lr)

        self.disc = None
        self.disc_opt = None
        if stage_cfg.disc_enabled and weights.d > 0:
            self.disc = build_discriminator(run_cfg.seed, gen.cfg.latent_dim)
            self.disc_opt = torch.optim.Adam(self.disc.parameters(), lr=stage_cfg.disc_lr)

        self._gen_digest = module_weights_digest(gen)
        self._backbone_digest = module_weights_digest(self.encoder.backbone)
        self.history: list[dict] = []

    # -- data ----------------------------------------------------------------

    def _gather_batch(self, batch_size: int):
        srcs, sames, others, masks = [], [], [], []
        for _ in range(batch_size):
            t = sample_triplet(self.clips, self.np_rng)
            clip = self.clips[t.src_clip]
            srcs.append(torch.from_numpy(clip.frames[t.src_t].copy()))
            sames.append(torch.from_numpy(clip.frames[t.same_t].copy()))
            others.append(torch.from_numpy(self.clips[t.other_clip].frames[t.other_t].copy()))
            masks.append(torch.from_numpy(clip.mask.copy()))
        return (torch.stack(srcs), torch.stack(sames), torch.stack(others),
                torch.stack(masks))

    # -- steps ---------------------------------------------------------------

    def train_step(self, step: int) -> dict:
        src, drv_same, drv_other, mask = self._gather_batch(self.cfg.batch_size)
        no_id_reg = self.run_cfg.ablation.no_id_reg

        pair_s = self.encoder.encode(src)
        pair_d1 = self.encoder.encode(drv_same)
        pair_d2 = self.encoder.encode(drv_other)

        if step < self.cfg.warmup_iterations:
            # offsets stay out of the picture: one zero-offset render serves
            # every term, so reconstruction gradients land on the identity path
            render_self = self.gen.generate(pair_s.w_id,
                                            self.gen.zero_offset((src.shape[0],)))
            render_same = render_self
            render_other = render_self
            render_id = None if no_id_reg else render_self
        else:
            render_self = self.gen.generate(pair_s.w_id, pair_s.s_f)
            render_same = self.gen.generate(pair_s.w_id, pair_d1.s_f)
            render_other = self.gen.generate(pair_s.w_id, pair_d2.s_f)
            render_id = None
            if not no_id_reg:
                render_id = self.gen.generate(pair_s.w_id, self.gen.zero_offset((src.shape[0],)))
        pair_re = self.encoder.encode(render_other)

        loss, log = total_loss(
            src=src, drv_same=drv_same, drv_other=drv_other,
            render_self=render_self, render_same=render_same,
            render_other=render_other, render_id=render_id,
            pairs=[pair_s, pair_d1, pair_d2],
            w_re=pair_re.w_id, w_src=pair_s.w_id,
            weights=self.weights, perceptual=self.perceptual,
            embedder=self.embedder, disc=self.disc,
            mask_self=mask, mask_same=mask, no_id_reg=no_id_reg,
        )
        terms = {k: float(v.detach()) for k, v in log.items()}
        if not torch.isfinite(loss):
            raise DivergenceError(
                "training loss went non-finite",
                diagnostics={"step": step, "stage": self.cfg.stage, "terms": terms},
            )
        self.opt.zero_grad()
        loss.backward()
        self.opt.step()

        if self.disc is not None:
            fake_rows = torch.cat([
                pair_s.w_id.layers.detach().reshape(-1, self.gen.cfg.latent_dim),
                pair_d1.w_id.layers.detach().reshape(-1, self.gen.cfg.latent_dim),
                pair_d2.w_id.layers.detach().reshape(-1, self.gen.cfg.latent_dim),
            ])
            z = torch.randn(fake_rows.shape[0], self.gen.cfg.latent_dim,
                            generator=self.z_gen)
            with torch.no_grad():
                real_rows = self.gen.mapping(z)
            d_loss, d_terms = discriminator_loss(self.disc, real_rows, fake_rows,
                                                 self.cfg.r1_gamma)
            if not torch.isfinite(d_loss):
                raise DivergenceError(
                    "discriminator loss went non-finite",
                    diagnostics={"step": step, "stage": self.cfg.stage,
                                 "terms": {k: float(v.detach()) for k, v in d_terms.items()}},
                )
            self.disc_opt.zero_grad()
            d_loss.backward()
            self.disc_opt.step()
            terms["disc"] = float(d_loss.detach())

        return terms

    def run_stage(self) -> list[dict]:
        cfg = self.cfg
        log_path = None
        if self.out_dir is not None:
            self.out_dir.mkdir(parents=True, exist_ok=True)
            log_path = self.out_dir / f"train_{cfg.stage}.jsonl"
            log_path.write_text("")
        n_layers = self.gen.cfg.n_layers
        for step in range(cfg.iterations):
            if cfg.stage == "pretrain" and cfg.progressive_interval > 0:
                self.encoder.set_progressive_stage(
                    min(n_layers, 1 + step // cfg.progressive_interval))
            terms = self.train_step(step)
            if step % cfg.log_every == 0 or step == cfg.iterations - 1:
                entry = {"step": step, "stage": cfg.stage, **terms}
                self.history.append(entry)
                if log_path is not None:
                    with open(log_path, "a") as fh:
                        fh.write(json.dumps(entry, sort_keys=True) + "\n")

        if module_weights_digest(self.gen) != self._gen_digest:
            raise ModelHealthError("generator weights changed during encoder training")
        if cfg.stage == "finetune":
            if module_weights_digest(self.encoder.backbone) != self._backbone_digest:
                raise ModelHealthError("backbone weights changed during the frozen stage")
        return self.history

    def save_encoder(self, path: str | Path, step: int | None = None) -> None:
        save_module_checkpoint(
            path, self.encoder, "encoder",
            {"generator": to_plain_dict(self.gen.cfg),
             "encoder": to_plain_dict(self.encoder.cfg)},
            {"stage": self.cfg.stage, "steps": step if step is not None else self.cfg.iterations,
             "run_config_hash": self.run_cfg.config_hash()},
        )


def load_encoder_checkpoint(path: str | Path, gen: StyleBasedGenerator) -> DualHeadEncoder:
    from .config import EncoderConfig, config_from_dict

    state, cfgs, _ = load_module_checkpoint(path, "encoder")
    if cfgs.get("generator") != to_plain_dict(gen.cfg):
        raise DataError(f"{path}: encoder was trained against a different generator")
    enc_cfg = config_from_dict(EncoderConfig, cfgs["encoder"])
    enc = DualHeadEncoder(gen.cfg, enc_cfg, affine_bank=gen.affines)
    enc.load_state_dict(state)
    enc.eval()
    return enc


def save_generator_checkpoint(path: str | Path, gen: StyleBasedGenerator,
                              extra: dict | None = None) -> None:
    save_module_checkpoint(path, gen, "generator",
                           {"generator": to_plain_dict(gen.cfg)}, extra)


def load_generator_checkpoint(path: str | Path, gen: StyleBasedGenerator
                              ) -> StyleBasedGenerator:
    """Load tuned weights into a fresh copy of a same-config generator."""
    state, cfgs, _ = load_module_checkpoint(path, "generator")
    if cfgs.get("generator") != to_plain_dict(gen.cfg):
        raise DataError(f"{path}: generator checkpoint has a different configuration")
    out = gen.clone()
    out.load_state_dict(state)
    out.eval()
    out.requires_grad_(False)
    return out


def run_training(run_cfg: RunConfig, clips, out_dir: str | Path | None = None,
                 pretrain_ckpt: str | Path | None = None,
                 ) -> tuple[StyleBasedGenerator, DualHeadEncoder, list[dict]]:
    """Both stages back to back. The second stage needs a first-stage encoder."""
    run_cfg = run_cfg.resolved()
    gen = build_generator(run_cfg.generator, run_cfg.seed)
    history: list[dict] = []

    if pretrain_ckpt is not None:
        encoder = load_encoder_checkpoint(pretrain_ckpt, gen)
    else:
        encoder = build_encoder(run_cfg.generator, run_cfg.encoder, run_cfg.seed,
                                affine_bank=gen.affines, w_mean=gen.w_mean)
        if run_cfg.pretrain.iterations > 0:
            trainer = Trainer(gen, encoder, clips, run_cfg, run_cfg.pretrain, out_dir)
            history += trainer.run_stage()
            if out_dir is not None:
                trainer.save_encoder(Path(out_dir) / "encoder_pretrain.nac")

    if run_cfg.finetune.iterations > 0:
        if pretrain_ckpt is None and run_cfg.pretrain.iterations == 0:
            raise ConfigError("the frozen-backbone stage needs a first-stage encoder")
        trainer = Trainer(gen, encoder, clips, run_cfg, run_cfg.finetune, out_dir)
        history += trainer.run_stage()
        if out_dir is not None:
            trainer.save_encoder(Path(out_dir) / "encoder_finetune.nac")

    encoder.eval()
    return gen, encoder, history
