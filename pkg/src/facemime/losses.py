"""Training losses and the small frozen nets they depend on.

Everything here is dtype-agnostic so the same code paths can run in
float64. The perceptual net, the face embedder and the latent
discriminator use smooth activations (tanh / softplus) on purpose; the
losses are polynomial or smooth compositions apart from norms away from
zero.
"""

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .config import LossWeights
from .errors import ShapeError
from .latents import LatentPair, WPlusLatent
from .rng import derive_seed

_EPS = 1e-8
_LUMA = (0.299, 0.587, 0.114)


# -- frozen helper nets ------------------------------------------------------


class ToyPerceptualNet(nn.Module):
    """Three frozen conv stages; features are unit-normalized per position."""

    def __init__(self):
        super().__init__()
        self.conv1 = nn.Conv2d(3, 8, 3, padding=1)
        self.conv2 = nn.Conv2d(8, 16, 3, stride=2, padding=1)
        self.conv3 = nn.Conv2d(16, 32, 3, stride=2, padding=1)

    def features(self, img: Tensor) -> list[Tensor]:
        x = img * 2.0 - 1.0
        feats = []
        for conv in (self.conv1, self.conv2, self.conv3):
            x = torch.tanh(conv(x))
            norm = torch.rsqrt(x.pow(2).mean(dim=1, keepdim=True) + _EPS)
            feats.append(x * norm)
        return feats


class ToyFaceEmbedder(nn.Module):
    """Frozen conv stack ending in an L2-normalized embedding."""

    def __init__(self, embed_dim: int = 64):
        super().__init__()
        self.conv1 = nn.Conv2d(3, 16, 3, stride=2, padding=1)
        self.conv2 = nn.Conv2d(16, 32, 3, stride=2, padding=1)
        self.conv3 = nn.Conv2d(32, 64, 3, stride=2, padding=1)
        self.fc = nn.Linear(64 * 16, embed_dim)

    def forward(self, img: Tensor) -> Tensor:
        x = img * 2.0 - 1.0
        for conv in (self.conv1, self.conv2, self.conv3):
            x = torch.tanh(conv(x))
        x = F.adaptive_avg_pool2d(x, 4).flatten(1)
        e = self.fc(x)
        return e * torch.rsqrt(e.pow(2).sum(dim=-1, keepdim=True) + _EPS)


class LatentDiscriminator(nn.Module):
    """MLP judging single w rows; softplus activations keep it smooth."""

    def __init__(self, latent_dim: int, hidden: int = 256):
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(latent_dim, hidden), nn.Softplus(),
            nn.Linear(hidden, hidden), nn.Softplus(),
            nn.Linear(hidden, 1),
        )

    def forward(self, w: Tensor) -> Tensor:
        return self.net(w).squeeze(-1)


def build_perceptual(seed: int) -> ToyPerceptualNet:
    torch.manual_seed(derive_seed(seed, "perceptual-weights"))
    net = ToyPerceptualNet()
    net.eval()
    net.requires_grad_(False)
    return net


def build_embedder(seed: int, embed_dim: int = 64) -> ToyFaceEmbedder:
    torch.manual_seed(derive_seed(seed, "embedder-weights"))
    net = ToyFaceEmbedder(embed_dim)
    net.eval()
    net.requires_grad_(False)
    return net


def build_discriminator(seed: int, latent_dim: int) -> LatentDiscriminator:
    torch.manual_seed(derive_seed(seed, "disc-weights"))
    return LatentDiscriminator(latent_dim)


# -- pixel and feature reconstruction ----------------------------------------


def l2_loss(a: Tensor, b: Tensor) -> Tensor:
    return (a - b).pow(2).mean()


def perceptual_loss(net: ToyPerceptualNet, a: Tensor, b: Tensor) -> Tensor:
    total = None
    for fa, fb in zip(net.features(a), net.features(b)):
        d = (fa - fb).pow(2).mean()
        total = d if total is None else total + d
    return total


def _luminance(img: Tensor) -> Tensor:
    r, g, b = _LUMA
    return r * img[..., 0, :, :] + g * img[..., 1, :, :] + b * img[..., 2, :, :]


def _sobel_maps(img: Tensor) -> tuple[Tensor, Tensor]:
    kx = torch.tensor([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]],
                      dtype=img.dtype, device=img.device)
    ky = kx.t().contiguous()
    lum = _luminance(img).unsqueeze(-3)
    gx = F.conv2d(lum, kx.reshape(1, 1, 3, 3), padding=1)
    gy = F.conv2d(lum, ky.reshape(1, 1, 3, 3), padding=1)
    return gx, gy


def _patch_variance(gmap: Tensor, patch: int) -> Tensor:
    b, _, h, w = gmap.shape
    if h % patch or w % patch:
        raise ShapeError(f"image size {h}x{w} not divisible by patch size {patch}")
    tiles = gmap.reshape(b, h // patch, patch, w // patch, patch)
    tiles = tiles.permute(0, 1, 3, 2, 4).reshape(b, h // patch, w // patch, patch * patch)
    return tiles.var(dim=-1, unbiased=False)


def gradient_variance_loss(a: Tensor, b: Tensor, patch: int = 4) -> Tensor:
    """Match per-patch variance of Sobel responses between two images."""
    ax, ay = _sobel_maps(a)
    bx, by = _sobel_maps(b)
    vx = (_patch_variance(ax, patch) - _patch_variance(bx, patch)).pow(2).mean()
    vy = (_patch_variance(ay, patch) - _patch_variance(by, patch)).pow(2).mean()
    return vx + vy


def reconstruction_loss(render: Tensor, target: Tensor, weights: LossWeights,
                        perceptual: ToyPerceptualNet) -> tuple[Tensor, dict]:
    terms = {
        "l2": l2_loss(render, target),
        "lpips": perceptual_loss(perceptual, render, target),
        "gv": gradient_variance_loss(render, target),
    }
    total = weights.l2 * terms["l2"] + weights.lpips * terms["lpips"] + weights.gv * terms["gv"]
    return total, terms


def masked_region_loss(a: Tensor, b: Tensor, mask: Tensor) -> Tensor:
    """Squared error restricted to the mask, normalized by its support."""
    if mask.ndim == a.ndim - 1:
        mask = mask.unsqueeze(-3)
    mask = mask.expand_as(a)
    return (mask * (a - b).pow(2)).sum() / (mask.sum() + _EPS)


# -- identity and latent terms -----------------------------------------------


def identity_cosine_loss(embedder: ToyFaceEmbedder, img: Tensor, ref: Tensor) -> Tensor:
    e_img = embedder(img)
    e_ref = embedder(ref)
    return (1.0 - (e_img * e_ref).sum(dim=-1)).mean()


def latent_consistency_loss(w_re: WPlusLatent, w_src: WPlusLatent) -> Tensor:
    diff = w_re.layers - w_src.layers
    flat = diff.reshape(*diff.shape[:-2], -1)
    return torch.sqrt(flat.pow(2).sum(dim=-1) + _EPS).mean()


def latent_reg_loss(pair: LatentPair, offset_weight: float) -> tuple[Tensor, Tensor, Tensor]:
    """Anchor all w rows to the first row; shrink the style offsets.

    Returns (combined, row_term, offset_term).
    """
    rows = pair.w_id.layers
    anchor = rows[..., :1, :]
    row_term = torch.sqrt((rows[..., 1:, :] - anchor).pow(2).sum(dim=-1) + _EPS).sum(dim=-1).mean()
    off_parts = []
    for vec, allowed in zip(pair.s_f.per_layer, pair.s_f.offset_mask):
        if allowed:
            off_parts.append(torch.sqrt(vec.pow(2).sum(dim=-1) + _EPS))
    off_term = torch.stack(off_parts, dim=-1).sum(dim=-1).mean()
    return row_term + offset_weight * off_term, row_term, off_term


# -- adversarial pieces --------------------------------------------------------


def encoder_adversarial_loss(disc: LatentDiscriminator, w: WPlusLatent) -> Tensor:
    return F.softplus(-disc(w.layers)).mean()


def r1_penalty(disc: LatentDiscriminator, real_rows: Tensor) -> Tensor:
    real_rows = real_rows.detach().requires_grad_(True)
    out = disc(real_rows)
    (grad,) = torch.autograd.grad(out.sum(), real_rows, create_graph=True)
    return grad.pow(2).reshape(grad.shape[0], -1).sum(dim=-1).mean()


def discriminator_loss(disc: LatentDiscriminator, real_rows: Tensor,
                       fake_rows: Tensor, r1_gamma: float) -> tuple[Tensor, dict]:
    loss_real = F.softplus(-disc(real_rows)).mean()
    loss_fake = F.softplus(disc(fake_rows)).mean()
    terms = {"real": loss_real, "fake": loss_fake}
    total = loss_real + loss_fake
    if r1_gamma > 0:
        r1 = r1_penalty(disc, real_rows)
        terms["r1"] = r1
        total = total + 0.5 * r1_gamma * r1
    return total, terms


# -- full objective ------------------------------------------------------------


def total_loss(
    *,
    src: Tensor,
    drv_same: Tensor,
    drv_other: Tensor,
    render_self: Tensor,
    render_same: Tensor,
    render_other: Tensor,
    render_id: Tensor | None,
    pairs: list[LatentPair],
    w_re: WPlusLatent,
    w_src: WPlusLatent,
    weights: LossWeights,
    perceptual: ToyPerceptualNet,
    embedder: ToyFaceEmbedder,
    disc: LatentDiscriminator | None = None,
    mask_self: Tensor | None = None,
    mask_same: Tensor | None = None,
    no_id_reg: bool = False,
) -> tuple[Tensor, dict]:
    """Assemble the training objective from precomputed renders and latents.

    The self-reconstruction pair (source and same-clip frame) and the
    cross-identity transfer contribute unweighted; individual terms carry
    their own weights.
    """
    log: dict[str, float] = {}

    rec_self, t = reconstruction_loss(render_self, src, weights, perceptual)
    log.update({f"{k}_self": v for k, v in t.items()})
    rec_same, t = reconstruction_loss(render_same, drv_same, weights, perceptual)
    log.update({f"{k}_same": v for k, v in t.items()})
    total = rec_self + rec_same

    if weights.f > 0 and mask_self is not None:
        feat_self = masked_region_loss(render_self, src, mask_self)
        log["feat_self"] = feat_self
        total = total + weights.f * feat_self
    if weights.f > 0 and mask_same is not None:
        feat_same = masked_region_loss(render_same, drv_same, mask_same)
        log["feat_same"] = feat_same
        total = total + weights.f * feat_same

    id_puppet = identity_cosine_loss(embedder, render_other, src)
    log["id_puppet"] = id_puppet
    id_term = id_puppet
    if not no_id_reg:
        if render_id is None:
            raise ShapeError("identity anchor render is required unless it is ablated")
        id_anchor = identity_cosine_loss(embedder, render_id, src)
        log["id_anchor"] = id_anchor
        id_term = id_term + id_anchor
    total = total + weights.id * id_term

    if not no_id_reg:
        w_consist = latent_consistency_loss(w_re, w_src)
        log["w_consist"] = w_consist
        total = total + weights.w_id * w_consist

    reg = None
    for pair in pairs:
        r, rows, offs = latent_reg_loss(pair, weights.s)
        reg = r if reg is None else reg + r
    reg = reg / len(pairs)
    log["reg"] = reg
    total = total + weights.reg * reg

    if disc is not None and weights.d > 0:
        adv = None
        for pair in pairs:
            a = encoder_adversarial_loss(disc, pair.w_id)
            adv = a if adv is None else adv + a
        adv = adv / len(pairs)
        log["adv"] = adv
        total = total + weights.d * adv

    log["total"] = total
    return total, log
