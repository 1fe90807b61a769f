"""Image encoder producing an identity code plus a per-layer style offset.

A shared convolutional pyramid feeds two banks of heads. The identity bank
predicts one w row per generator layer as a common base plus per-layer
deltas (the deltas can be enabled progressively during training). The
deformation path predicts additive offsets for the early style layers:
by default a single low-dimensional motion code mapped through learnable
per-layer direction banks, or with rank 0 a full-width offset per layer,
either directly in style space or as w deltas routed through the
generator's affines without their biases.
"""

import math

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .config import EncoderConfig, GeneratorConfig
from .errors import ModelHealthError, ShapeError
from .generator import AffineBank, EqualLinear
from .latents import LatentPair, StyleLatent, WPlusLatent, validate_image

_DELTA_INIT_GAIN = 0.01


class SEBlock(nn.Module):
    def __init__(self, channels, reduction=4):
        super().__init__()
        hidden = max(4, channels // reduction)
        self.fc1 = nn.Linear(channels, hidden)
        self.fc2 = nn.Linear(hidden, channels)

    def forward(self, x):
        s = x.mean(dim=(2, 3))
        s = F.relu(self.fc1(s))
        s = torch.sigmoid(self.fc2(s))
        return x * s.reshape(*s.shape, 1, 1)


class ResidualSEBlock(nn.Module):
    def __init__(self, in_ch, out_ch, stride=1):
        super().__init__()
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, stride=stride, padding=1)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.se = SEBlock(out_ch)
        if stride != 1 or in_ch != out_ch:
            self.skip = nn.Conv2d(in_ch, out_ch, 1, stride=stride)
        else:
            self.skip = None

    def forward(self, x):
        out = F.leaky_relu(self.conv1(x), 0.2)
        out = self.se(self.conv2(out))
        res = x if self.skip is None else self.skip(x)
        return F.leaky_relu(out + res, 0.2)


class FeaturePyramidBackbone(nn.Module):
    """Shared trunk; exposes the last three stage outputs coarse-to-fine."""

    def __init__(self, resolution: int, cfg: EncoderConfig):
        super().__init__()
        if resolution < 16:
            raise ShapeError(f"encoder needs resolution >= 16, got {resolution}")
        w0, w1, w2 = cfg.backbone_widths
        self.stem = nn.Conv2d(3, cfg.stem_width, 3, stride=2, padding=1)
        n_pre = max(0, int(math.log2(resolution)) - 6)
        pre = []
        prev = cfg.stem_width
        for _ in range(n_pre):
            pre.append(ResidualSEBlock(prev, w0, stride=2))
            prev = w0
        self.pre = nn.Sequential(*pre)

        def stage(in_ch, out_ch):
            blocks = [ResidualSEBlock(in_ch, out_ch, stride=2)]
            for _ in range(cfg.backbone_depth - 1):
                blocks.append(ResidualSEBlock(out_ch, out_ch))
            return nn.Sequential(*blocks)

        self.stage_fine = stage(prev, w0)
        self.stage_mid = stage(w0, w1)
        self.stage_coarse = stage(w1, w2)
        fine_res = resolution >> (n_pre + 2)
        self.map_resolutions = (fine_res, fine_res // 2, fine_res // 4)

    def extract_features(self, img: Tensor) -> tuple[Tensor, Tensor, Tensor]:
        """Returns (fine, mid, coarse) maps for an image batch in [0, 1]."""
        x = F.leaky_relu(self.stem(img * 2.0 - 1.0), 0.2)
        x = self.pre(x)
        fine = self.stage_fine(x)
        mid = self.stage_mid(fine)
        coarse = self.stage_coarse(mid)
        return fine, mid, coarse


class Map2Style(nn.Module):
    """Stride-2 conv ladder collapsing a feature map to one vector."""

    def __init__(self, in_ch, map_res, head_width, out_dim):
        super().__init__()
        steps = int(math.log2(max(1, map_res)))
        convs = []
        prev = in_ch
        for _ in range(steps):
            convs.append(nn.Conv2d(prev, head_width, 3, stride=2, padding=1))
            prev = head_width
        self.convs = nn.ModuleList(convs)
        self.final = EqualLinear(prev, out_dim)

    def forward(self, x):
        for conv in self.convs:
            x = F.leaky_relu(conv(x), 0.2)
        return self.final(x.flatten(1))


def _head_groups(n_layers: int) -> list[int]:
    """Pyramid level per layer index: 2 coarse, 1 mid, 0 fine."""
    n_coarse = max(1, round(n_layers * 3 / 18))
    n_mid = max(1, round(n_layers * 4 / 18))
    groups = []
    for i in range(n_layers):
        if i < n_coarse:
            groups.append(2)
        elif i < n_coarse + n_mid:
            groups.append(1)
        else:
            groups.append(0)
    return groups


class DualHeadEncoder(nn.Module):
    def __init__(self, gen_cfg: GeneratorConfig, cfg: EncoderConfig,
                 affine_bank: AffineBank | None = None):
        cfg.validate(gen_cfg)
        super().__init__()
        self.gen_cfg = gen_cfg
        self.cfg = cfg
        self.n_layers = gen_cfg.n_layers
        self.deform_layers = gen_cfg.deform_layers
        self.backbone = FeaturePyramidBackbone(gen_cfg.resolution, cfg)
        widths = cfg.backbone_widths
        map_res = self.backbone.map_resolutions
        d = gen_cfg.latent_dim

        self.groups = _head_groups(self.n_layers)
        self.base_head = Map2Style(widths[2], map_res[2], cfg.head_width, d)
        self.delta_heads = nn.ModuleList()
        for g in self.groups:
            head = Map2Style(widths[g], map_res[g], cfg.head_width, d)
            head.final.weight.data.mul_(_DELTA_INIT_GAIN)
            self.delta_heads.append(head)

        style_widths = gen_cfg.style_widths()
        rank = 0 if cfg.deform_space == "wplus" else cfg.deform_rank
        self.deform_rank = rank
        self.deform_heads = nn.ModuleList()
        self.deform_bases = nn.ParameterList()
        if rank:
            # one motion code per frame, expressed at every deformation layer
            # through a learnable direction bank. Deformation is a handful of
            # degrees of freedom acting coherently across scales; a frame-wise
            # coefficient vector shared by all layers is the only
            # parameterization whose per-frame fits stay consistent across
            # identities, which is what lets the bank align with the real
            # directions instead of each frame's reconstruction shortcuts.
            self.deform_heads.append(
                Map2Style(widths[1], map_res[1], cfg.head_width, rank))
            for j in range(self.deform_layers):
                self.deform_bases.append(nn.Parameter(
                    torch.randn(rank, style_widths[j]) / rank ** 0.5))
        else:
            for j in range(self.deform_layers):
                g = self.groups[j]
                out_dim = d if cfg.deform_space == "wplus" else style_widths[j]
                head = Map2Style(widths[g], map_res[g], cfg.head_width, out_dim)
                head.final.weight.data.mul_(_DELTA_INIT_GAIN)
                self.deform_heads.append(head)
        self.deform_gain = nn.Parameter(torch.tensor(0.1))

        self.register_buffer("w_bias", torch.zeros(d))
        if cfg.deform_space == "wplus":
            if affine_bank is None:
                raise ShapeError("w-space deformation routing needs the generator affines")
            self._affine_ref = [affine_bank]
        else:
            self._affine_ref = []
        stage = cfg.progressive_stage
        self.progressive_stage = self.n_layers if stage is None else stage
        self.set_progressive_stage(self.progressive_stage)

    def set_w_bias(self, w_mean: Tensor) -> None:
        self.w_bias.copy_(w_mean.detach())

    def set_progressive_stage(self, stage: int) -> None:
        if not 1 <= stage <= self.n_layers:
            raise ShapeError(f"progressive stage must be in [1, {self.n_layers}], got {stage}")
        self.progressive_stage = stage

    def encode(self, img: Tensor) -> LatentPair:
        img = validate_image(img, self.gen_cfg.resolution, "encoder input")
        squeeze = img.ndim == 3
        if squeeze:
            img = img.unsqueeze(0)
        fine, mid, coarse = self.backbone.extract_features(img)
        maps = (fine, mid, coarse)

        base = self.base_head(coarse) + self.w_bias
        rows = []
        for i, head in enumerate(self.delta_heads):
            if i < self.progressive_stage:
                rows.append(base + head(maps[self.groups[i]]))
            else:
                rows.append(base)
        w_layers = torch.stack(rows, dim=-2)

        if self.deform_rank:
            coef = self.deform_gain * self.deform_heads[0](mid)
            active = [coef @ basis for basis in self.deform_bases]
        elif self.cfg.deform_space == "wplus":
            raw = [self.deform_gain * head(maps[self.groups[j]])
                   for j, head in enumerate(self.deform_heads)]
            deltas = torch.stack(raw, dim=-2)
            active = self._affine_ref[0].linear_map(deltas, list(range(self.deform_layers)))
        else:
            active = [self.deform_gain * head(maps[self.groups[j]])
                      for j, head in enumerate(self.deform_heads)]

        widths = self.gen_cfg.style_widths()
        per_layer = list(active)
        for j in range(self.deform_layers, self.n_layers):
            per_layer.append(torch.zeros(img.shape[0], widths[j],
                                         dtype=w_layers.dtype, device=w_layers.device))
        mask = tuple(j < self.deform_layers for j in range(self.n_layers))

        if not torch.isfinite(w_layers).all() or not all(torch.isfinite(v).all() for v in active):
            raise ModelHealthError("encoder produced non-finite latents")
        if squeeze:
            w_layers = w_layers.squeeze(0)
            per_layer = [v.squeeze(0) for v in per_layer]
        return LatentPair(WPlusLatent(w_layers), StyleLatent(per_layer, mask))


def build_encoder(gen_cfg: GeneratorConfig, cfg: EncoderConfig, seed: int,
                  affine_bank: AffineBank | None = None,
                  w_mean: Tensor | None = None) -> DualHeadEncoder:
    from .rng import derive_seed

    torch.manual_seed(derive_seed(seed, "encoder-weights"))
    enc = DualHeadEncoder(gen_cfg, cfg, affine_bank=affine_bank)
    if w_mean is not None:
        enc.set_w_bias(w_mean)
    return enc
