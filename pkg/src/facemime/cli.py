"""Command line surface.

Every subcommand resolves its configuration the same way: preset
defaults, then an optional YAML file, then repeated --set key=value
overrides, rejecting unknown keys. The resolved config hash and seed are
printed so any run can be reproduced.

Exit codes: 0 ok, 2 config error, 3 data error, 4 numerical divergence,
1 anything else.
"""

import argparse
import dataclasses
import json
import sys
import time
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .config import RunConfig, load_run_config
from .dataio import (SyntheticDataset, cache_root, export_clip_pngs, load_clip_folder,
                     load_image, make_synthetic_dataset, save_png)
from .errors import ConfigError, DataError, DivergenceError, FacemimeError
from .evaluation import cross_identity_eval, self_reenactment_eval
from .generator import build_generator
from .losses import build_embedder, build_perceptual
from .metrics import MetricReport
from .reenactment import cma_adapt, compute_w_directions, reenact_sequence
from .rng import derive_seed
from .training import (load_encoder_checkpoint, load_generator_checkpoint,
                       run_training, save_generator_checkpoint)


def _add_config_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", default=None, help="YAML run config")
    p.add_argument("--preset", default=None, help="config preset (toy64, paper1024)")
    p.add_argument("--set", dest="overrides", action="append", default=[],
                   metavar="KEY=VALUE", help="override a config entry (repeatable)")


def _resolve(args) -> RunConfig:
    cfg = load_run_config(args.config, args.overrides, args.preset)
    return cfg.resolved()


def _announce(cmd: str, cfg: RunConfig) -> None:
    print(f"{cmd}: preset={cfg.preset} seed={cfg.seed} config_hash={cfg.config_hash()}")


def _default_out(cfg: RunConfig, leaf: str) -> Path:
    return cache_root() / f"{cfg.preset}-{cfg.config_hash()}" / leaf


def _load_driving(path: str, cfg: RunConfig, clip_name: str | None) -> np.ndarray:
    p = Path(path)
    if p.is_dir():
        clips = load_clip_folder(p, cfg.data.max_frames_per_clip)
        if clip_name:
            for c in clips:
                if f"{c.identity}/{c.clip}" == clip_name:
                    return c.frames
            raise DataError(f"clip {clip_name!r} not found under {p}")
        return clips[0].frames
    ds = SyntheticDataset.load(p)
    if clip_name:
        for c in ds.clips:
            if f"{c.identity}/{c.clip}" == clip_name:
                return c.frames
        raise DataError(f"clip {clip_name!r} not found in {p}")
    return ds.clips[0].frames


def _load_clips(path: str, cfg: RunConfig, gen=None):
    p = Path(path)
    if p.is_dir():
        return load_clip_folder(p, cfg.data.max_frames_per_clip)
    return SyntheticDataset.load(p, gen=gen).clips


def _load_models(args, cfg: RunConfig):
    gen = build_generator(cfg.generator, cfg.seed)
    encoder = load_encoder_checkpoint(args.encoder, gen)
    if getattr(args, "generator", None):
        gen = load_generator_checkpoint(args.generator, gen)
    return gen, encoder


# -- subcommands --------------------------------------------------------------


def _cmd_synth_data(args) -> int:
    cfg = _resolve(args)
    _announce("synth-data", cfg)
    gen = build_generator(cfg.generator, cfg.seed)
    out = Path(args.out) if args.out else _default_out(cfg, "train.nac")
    ds = make_synthetic_dataset(gen, cfg.data, derive_seed(cfg.seed, "train-data"))
    ds.save(out)
    print(f"wrote {len(ds.clips)} clips x {cfg.data.frames_per_clip} frames -> {out}")
    if args.eval_out:
        eval_ds = make_synthetic_dataset(
            gen, cfg.data, derive_seed(cfg.seed, "eval-data"),
            n_identities=cfg.data.eval_identities,
            frames_per_clip=cfg.data.eval_frames_per_clip)
        eval_ds.save(args.eval_out)
        print(f"wrote {len(eval_ds.clips)} held-out clips -> {args.eval_out}")
    if args.export_png:
        n = export_clip_pngs(ds, args.export_png)
        print(f"exported {n} png frames -> {args.export_png} (8-bit, lossy)")
    return 0


def _cmd_train(args) -> int:
    cfg = _resolve(args)
    _announce("train", cfg)
    if args.stage == "pretrain":
        cfg.finetune.iterations = 0
    elif args.stage == "finetune":
        cfg.pretrain.iterations = 0
        if not args.resume_from:
            raise ConfigError("--stage finetune needs --resume-from <pretrain checkpoint>")
    gen = build_generator(cfg.generator, cfg.seed)
    clips = _load_clips(args.data, cfg, gen=gen if str(args.data).endswith(".nac") else None)
    out_dir = Path(args.out) if args.out else _default_out(cfg, "run")
    t0 = time.time()
    gen, encoder, history = run_training(cfg, clips, out_dir,
                                         pretrain_ckpt=args.resume_from)
    save_generator_checkpoint(out_dir / "generator.nac", gen)
    summary = {
        "config_hash": cfg.config_hash(),
        "seed": cfg.seed,
        "steps": {"pretrain": cfg.pretrain.iterations, "finetune": cfg.finetune.iterations},
        "wall_seconds": round(time.time() - t0, 1),
        "final": history[-1] if history else {},
    }
    (out_dir / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
    print(f"trained {len(clips)} clips in {summary['wall_seconds']}s -> {out_dir}")
    return 0


def _cmd_reenact(args) -> int:
    cfg = _resolve(args)
    _announce(args.command, cfg)
    gen, encoder = _load_models(args, cfg)
    source = torch.from_numpy(load_image(args.source))
    driving = torch.from_numpy(_load_driving(args.driving, cfg, args.clip))
    edit = None
    strength = 0.0
    if getattr(args, "direction", None):
        directions = {d.name: d for d in compute_w_directions(gen, n=8, seed=cfg.seed)}
        if args.direction not in directions:
            raise ConfigError(f"unknown direction {args.direction!r}; "
                              f"available: {sorted(directions)}")
        edit = directions[args.direction]
        strength = args.strength
    out = reenact_sequence(gen, encoder, source, driving, edit, strength)
    out_dir = Path(args.out)
    for t in range(out.shape[0]):
        save_png(out_dir / f"{t:04d}.png", out[t].numpy())
    print(f"wrote {out.shape[0]} frames -> {out_dir}")
    return 0


def _cmd_cma(args) -> int:
    cfg = _resolve(args)
    _announce("cma", cfg)
    gen, encoder = _load_models(args, cfg)
    source = torch.from_numpy(load_image(args.source))
    driving = torch.from_numpy(_load_driving(args.driving, cfg, args.clip))
    perceptual = build_perceptual(cfg.seed)
    mode = "pti" if (args.mode == "pti" or cfg.ablation.cma_as_pti) else "cma"
    cma_cfg = cfg.cma
    if cfg.ablation.no_cma:
        cma_cfg = dataclasses.replace(cma_cfg, steps=0)
    t0 = time.time()
    tuned, report = cma_adapt(gen, encoder, source, driving, cma_cfg,
                              perceptual, mode=mode)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    save_generator_checkpoint(out_dir / "generator_tuned.nac", tuned,
                              {"adaptation": report.to_dict()})
    payload = report.to_dict()
    payload["wall_seconds"] = round(time.time() - t0, 1)
    (out_dir / "adaptation.json").write_text(json.dumps(payload, indent=2, sort_keys=True))
    state = "aborted" if report.aborted else "ok"
    print(f"{mode} {state}: source L1 {report.source_l1_before:.4f} -> "
          f"{report.source_l1_after:.4f} in {report.steps_run} steps -> {out_dir}")
    return 0


def _cmd_eval(args) -> int:
    cfg = _resolve(args)
    _announce("eval", cfg)
    gen, encoder = _load_models(args, cfg)
    clips = _load_clips(args.data, cfg)
    report = self_reenactment_eval(gen, encoder, clips)
    cross = cross_identity_eval(gen, encoder, build_embedder(cfg.seed), clips,
                                args.pairs, cfg.seed)
    report.pair_accuracy = cross.pair_accuracy
    report.dispersion_ratio = cross.dispersion_ratio
    report.extras.update({k: v for k, v in cross.extras.items()})
    print(report.table())
    if args.report:
        Path(args.report).parent.mkdir(parents=True, exist_ok=True)
        Path(args.report).write_text(report.to_json())
        print(f"wrote report -> {args.report}")
    return 0


def _cmd_bench(args) -> int:
    cfg = _resolve(args)
    _announce("bench", cfg)
    gen = build_generator(cfg.generator, cfg.seed)
    if args.encoder:
        encoder = load_encoder_checkpoint(args.encoder, gen)
    else:
        from .encoder import build_encoder
        encoder = build_encoder(cfg.generator, cfg.encoder, cfg.seed,
                                affine_bank=gen.affines, w_mean=gen.w_mean)
        encoder.eval()
    ds = make_synthetic_dataset(gen, cfg.data, derive_seed(cfg.seed, "bench-data"),
                                n_identities=2, frames_per_clip=max(2, args.frames))
    source = torch.from_numpy(ds.clips[0].frames[0])
    driving = torch.from_numpy(ds.clips[1].frames)
    reenact_sequence(gen, encoder, source, driving[:1])  # warmup
    t0 = time.time()
    out = reenact_sequence(gen, encoder, source, driving)
    dt = time.time() - t0
    fps = out.shape[0] / dt
    payload = {"resolution": cfg.generator.resolution, "frames": int(out.shape[0]),
               "seconds": round(dt, 3), "fps": round(fps, 3)}
    print(json.dumps(payload))
    return 0


# -- entry point ----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="facemime",
        description="One-shot face video re-enactment with hybrid latent codes.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-data", help="render a synthetic paired clip set")
    _add_config_args(p)
    p.add_argument("--out", default=None, help="output container path")
    p.add_argument("--eval-out", default=None, help="also write a held-out split here")
    p.add_argument("--export-png", default=None, help="also export frames as PNGs here")
    p.set_defaults(fn=_cmd_synth_data)

    p = sub.add_parser("train", help="two-stage encoder training")
    _add_config_args(p)
    p.add_argument("--data", required=True, help="clip container or folder of clips")
    p.add_argument("--out", default=None, help="run directory")
    p.add_argument("--stage", choices=("both", "pretrain", "finetune"), default="both")
    p.add_argument("--resume-from", default=None, help="encoder checkpoint to continue from")
    p.set_defaults(fn=_cmd_train)

    p = sub.add_parser("reenact", help="drive a source image with a clip")
    _add_config_args(p)
    p.add_argument("--source", required=True, help="source image (png)")
    p.add_argument("--driving", required=True, help="driving clip folder or container")
    p.add_argument("--clip", default=None, help="clip selector identity/clip")
    p.add_argument("--encoder", required=True, help="encoder checkpoint")
    p.add_argument("--generator", default=None, help="tuned generator checkpoint")
    p.add_argument("--out", required=True, help="output frame directory")
    p.set_defaults(fn=_cmd_reenact)

    p = sub.add_parser("edit", help="reenact with an identity-space edit")
    _add_config_args(p)
    p.add_argument("--source", required=True)
    p.add_argument("--driving", required=True)
    p.add_argument("--clip", default=None)
    p.add_argument("--encoder", required=True)
    p.add_argument("--generator", default=None)
    p.add_argument("--direction", required=True, help="edit direction name (pc0..pc7)")
    p.add_argument("--strength", type=float, default=1.0)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=_cmd_reenact)

    p = sub.add_parser("cma", help="adapt the generator around one source")
    _add_config_args(p)
    p.add_argument("--source", required=True)
    p.add_argument("--driving", required=True)
    p.add_argument("--clip", default=None)
    p.add_argument("--encoder", required=True)
    p.add_argument("--mode", choices=("cma", "pti"), default="cma")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=_cmd_cma)

    p = sub.add_parser("eval", help="score a trained model on a clip set")
    _add_config_args(p)
    p.add_argument("--data", required=True, help="evaluation clip container or folder")
    p.add_argument("--encoder", required=True)
    p.add_argument("--generator", default=None)
    p.add_argument("--pairs", type=int, default=200, help="cross-identity pair count")
    p.add_argument("--report", default=None, help="write the report as JSON here")
    p.set_defaults(fn=_cmd_eval)

    p = sub.add_parser("bench", help="frames/second of sequence re-enactment")
    _add_config_args(p)
    p.add_argument("--encoder", default=None)
    p.add_argument("--frames", type=int, default=32)
    p.set_defaults(fn=_cmd_bench)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except DataError as e:
        print(f"data error: {e}", file=sys.stderr)
        return 3
    except DivergenceError as e:
        print(f"divergence: {e}", file=sys.stderr)
        if e.diagnostics:
            print(json.dumps(e.diagnostics, sort_keys=True, default=str), file=sys.stderr)
        return 4
    except FacemimeError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
