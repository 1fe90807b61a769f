"""One-shot re-enactment, latent edits, and local generator adaptation.

Re-enactment renders the source identity code with the driving frame's
deformation offset. Sequences are processed one frame at a time so the
output for a frame never depends on which other frames are in the batch.

For out-of-domain sources the generator can be adapted in place around
the source identity estimate: each step renders a cross-identity frame,
re-encodes it, and asks the adapted generator to reproduce both the
source (re-encoded identity + source deformation) and the driving frame
(driving identity + re-encoded deformation). A plain source-inversion
tuning loop is included as a baseline.
"""

from dataclasses import dataclass, field

import torch
from torch import Tensor

from .config import CMAConfig
from .encoder import DualHeadEncoder
from .errors import ShapeError
from .generator import StyleBasedGenerator
from .latents import LatentPair, WPlusLatent, validate_image
from .losses import ToyPerceptualNet, l2_loss, perceptual_loss


# -- latent edits -----------------------------------------------------------------


@dataclass
class EditDirection:
    name: str
    vector: Tensor  # (D,) applied to every row, or (L, D) per row

    def __post_init__(self):
        if self.vector.ndim not in (1, 2):
            raise ShapeError(f"edit direction must be (D,) or (L, D), got {tuple(self.vector.shape)}")


def edit_identity(w_id: WPlusLatent, direction: EditDirection, strength: float) -> WPlusLatent:
    """Shift the identity code along a direction. Zero strength is a no-op."""
    if strength == 0.0:
        return w_id
    vec = direction.vector.to(w_id.layers.dtype)
    if vec.shape[-1] != w_id.latent_dim:
        raise ShapeError(f"edit direction dim {vec.shape[-1]} != latent dim {w_id.latent_dim}")
    if vec.ndim == 2 and vec.shape[0] != w_id.n_layers:
        raise ShapeError(f"edit direction rows {vec.shape[0]} != layer count {w_id.n_layers}")
    return WPlusLatent(w_id.layers + strength * vec)


def compute_w_directions(gen: StyleBasedGenerator, n: int = 4,
                         seed: int = 0) -> list[EditDirection]:
    """Principal directions of the mapped latent distribution."""
    g = torch.Generator().manual_seed(seed)
    z = torch.randn(2048, gen.cfg.latent_dim, generator=g)
    with torch.no_grad():
        w = gen.mapping(z)
    w = w - w.mean(dim=0)
    _, _, vh = torch.linalg.svd(w, full_matrices=False)
    return [EditDirection(f"pc{i}", vh[i].clone()) for i in range(n)]


# -- frame-wise re-enactment ---------------------------------------------------------


def encode_source(encoder: DualHeadEncoder, img: Tensor) -> LatentPair:
    """Encode a single source image; latents keep a leading batch of one."""
    img = validate_image(img, encoder.gen_cfg.resolution, "source image")
    if img.ndim == 3:
        img = img.unsqueeze(0)
    if img.shape[0] != 1:
        raise ShapeError("a single source image is expected")
    with torch.no_grad():
        return encoder.encode(img)


def reenact_frame(gen: StyleBasedGenerator, encoder: DualHeadEncoder,
                  source_pair: LatentPair, driving_img: Tensor,
                  edit: EditDirection | None = None,
                  edit_strength: float = 0.0) -> Tensor:
    """Render the source identity under one driving frame's deformation."""
    driving_img = validate_image(driving_img, encoder.gen_cfg.resolution, "driving frame")
    if driving_img.ndim == 3:
        driving_img = driving_img.unsqueeze(0)
    with torch.no_grad():
        driving_pair = encoder.encode(driving_img)
        w = source_pair.w_id
        if edit is not None:
            w = edit_identity(w, edit, edit_strength)
        out = gen.generate(w, driving_pair.s_f)
    return out.squeeze(0)


def reenact_sequence(gen: StyleBasedGenerator, encoder: DualHeadEncoder,
                     source_img: Tensor, driving_frames: Tensor,
                     edit: EditDirection | None = None,
                     edit_strength: float = 0.0) -> Tensor:
    """Re-enact a whole clip, one frame at a time. (T,3,R,R) -> (T,3,R,R)."""
    driving_frames = validate_image(driving_frames, encoder.gen_cfg.resolution,
                                    "driving frames")
    if driving_frames.ndim != 4:
        raise ShapeError(f"driving frames must be (T, 3, R, R), got {tuple(driving_frames.shape)}")
    source_pair = encode_source(encoder, source_img)
    outs = [reenact_frame(gen, encoder, source_pair, driving_frames[t],
                          edit, edit_strength)
            for t in range(driving_frames.shape[0])]
    return torch.stack(outs)


# -- local generator adaptation --------------------------------------------------------


@dataclass
class CMAReport:
    mode: str
    steps_run: int = 0
    aborted: bool = False
    initial_loss: float = 0.0
    final_loss: float = 0.0
    source_l1_before: float = 0.0
    source_l1_after: float = 0.0
    loss_history: list[float] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in
                ("mode", "steps_run", "aborted", "initial_loss", "final_loss",
                 "source_l1_before", "source_l1_after")}


def _source_l1(gen: StyleBasedGenerator, pair: LatentPair, img: Tensor) -> float:
    with torch.no_grad():
        render = gen.generate(pair.w_id, pair.s_f)
    return float((render - img).abs().mean())


def cma_adapt(gen: StyleBasedGenerator, encoder: DualHeadEncoder,
              source_img: Tensor, driving_frames: Tensor, cfg: CMAConfig,
              perceptual: ToyPerceptualNet, mode: str = "cma",
              ) -> tuple[StyleBasedGenerator, CMAReport]:
    """Tune a cloned generator around one source. Returns (generator, report).

    mode "cma" runs the cyclic objective over subsampled driving frames;
    mode "pti" only fits the source reconstruction. If the loss blows past
    ``divergence_factor`` times its starting value the original generator
    is returned untouched with ``aborted`` set.
    """
    if mode not in ("cma", "pti"):
        raise ShapeError(f"unknown adaptation mode {mode!r}")
    source_img = validate_image(source_img, gen.cfg.resolution, "source image")
    if source_img.ndim == 3:
        source_img = source_img.unsqueeze(0)
    driving_frames = validate_image(driving_frames, gen.cfg.resolution, "driving frames")

    report = CMAReport(mode=mode)
    src_pair = encode_source(encoder, source_img.squeeze(0))
    report.source_l1_before = _source_l1(gen, src_pair, source_img)
    if cfg.steps <= 0:
        report.source_l1_after = report.source_l1_before
        return gen, report

    stride = max(1, cfg.frame_subsample)
    picks = list(range(0, driving_frames.shape[0], stride))
    with torch.no_grad():
        drv_pairs = [encoder.encode(driving_frames[t].unsqueeze(0)) for t in picks]

    tuned = gen.clone()
    tuned.train(False)
    params = list(tuned.synthesis.parameters()) + list(tuned.affines.parameters())
    for p in params:
        p.requires_grad_(True)
    opt = torch.optim.Adam(params, lr=cfg.lr)

    enc_req = [p.requires_grad for p in encoder.parameters()]
    encoder.requires_grad_(False)

    def recon(a, b):
        return (cfg.l2_weight * l2_loss(a, b)
                + cfg.perceptual_weight * perceptual_loss(perceptual, a, b))

    try:
        for step in range(cfg.steps):
            k = step % len(picks)
            drv = drv_pairs[k]
            drv_img = driving_frames[picks[k]].unsqueeze(0)

            if mode == "pti":
                render = tuned.generate(src_pair.w_id, src_pair.s_f)
                loss = recon(render, source_img)
            else:
                cross = tuned.generate(src_pair.w_id, drv.s_f)
                cyc_pair = encoder.encode(cross.clamp(0.0, 1.0))
                src_cyc = tuned.generate(cyc_pair.w_id, src_pair.s_f)
                drv_cyc = tuned.generate(drv.w_id, cyc_pair.s_f)
                loss = recon(src_cyc, source_img) + recon(drv_cyc, drv_img)

            val = float(loss.detach())
            report.loss_history.append(val)
            if step == 0:
                report.initial_loss = val
            if not (val == val) or val > cfg.divergence_factor * max(report.initial_loss, 1e-12):
                report.aborted = True
                report.steps_run = step
                report.final_loss = val
                report.source_l1_after = report.source_l1_before
                return gen, report

            opt.zero_grad()
            loss.backward()
            opt.step()
            report.final_loss = val
            report.steps_run = step + 1
    finally:
        for p, r in zip(encoder.parameters(), enc_req):
            p.requires_grad_(r)

    tuned.requires_grad_(False)
    tuned.eval()
    report.source_l1_after = _source_l1(tuned, src_pair, source_img)
    return tuned, report
