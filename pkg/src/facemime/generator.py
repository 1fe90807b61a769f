"""Style-based toy generator: mapping network, per-layer affines, synthesis.

The synthesis network uses two style-modulated 3x3 convs per resolution level
plus a per-level RGB projection accumulated through a skip path. The RGB
projection is a modulated 1x1 conv sharing the style vector of the level's
second conv, so the full style input of the network is exactly the
``n_layers`` per-conv style vectors. Per-layer noise inputs are frozen,
seeded buffers; synthesis is pure given the weights.
"""

import copy
import math

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .config import GeneratorConfig
from .errors import ShapeError
from .latents import StyleLatent, WPlusLatent
from .rng import derive_seed

_W_MEAN_SAMPLES = 10_000


class EqualLinear(nn.Module):
    """Fully connected layer with runtime weight scaling."""

    def __init__(self, in_dim, out_dim, bias_init=0.0, lr_mul=1.0):
        super().__init__()
        self.weight = nn.Parameter(torch.randn(out_dim, in_dim).div_(lr_mul))
        self.bias = nn.Parameter(torch.full((out_dim,), float(bias_init)))
        self.scale = lr_mul / math.sqrt(in_dim)
        self.lr_mul = lr_mul

    def forward(self, x):
        return F.linear(x, self.weight * self.scale, self.bias * self.lr_mul)

    def linear_only(self, x):
        """The layer without its bias (the pure linear part of the affine)."""
        return F.linear(x, self.weight * self.scale)


class PixelNorm(nn.Module):
    def forward(self, x):
        return x * torch.rsqrt(torch.mean(x**2, dim=-1, keepdim=True) + 1e-8)


class MappingNetwork(nn.Module):
    """z -> w through a stack of fully connected layers."""

    def __init__(self, latent_dim: int, n_layers: int):
        super().__init__()
        self.norm = PixelNorm()
        self.fcs = nn.ModuleList([EqualLinear(latent_dim, latent_dim) for _ in range(n_layers)])

    def forward(self, z: Tensor) -> Tensor:
        x = self.norm(z)
        for i, fc in enumerate(self.fcs):
            x = fc(x)
            if i < len(self.fcs) - 1:
                x = F.leaky_relu(x, 0.2) * math.sqrt(2)
        return x


class AffineBank(nn.Module):
    """The per-layer learned affine transforms from w codes to style vectors."""

    def __init__(self, latent_dim: int, widths: list[int]):
        super().__init__()
        self.widths = list(widths)
        self.transforms = nn.ModuleList(
            [EqualLinear(latent_dim, w, bias_init=1.0) for w in widths]
        )

    def forward(self, w_plus: Tensor) -> list[Tensor]:
        """w_plus: (..., L, D) -> list of per-layer styles (..., width_i)."""
        if w_plus.shape[-2] != len(self.transforms):
            raise ShapeError(
                f"w+ has {w_plus.shape[-2]} layers, affine bank expects {len(self.transforms)}"
            )
        return [t(w_plus[..., i, :]) for i, t in enumerate(self.transforms)]

    def linear_map(self, deltas: Tensor, layer_indices: list[int]) -> list[Tensor]:
        """Bias-free affine of per-layer w offsets (for w-space deformation routing)."""
        return [self.transforms[j].linear_only(deltas[..., k, :]) for k, j in enumerate(layer_indices)]


class ModulatedConv2d(nn.Module):
    """StyleGAN2-style conv: per-sample input-channel modulation + demodulation."""

    def __init__(self, in_ch, out_ch, kernel_size, demodulate=True, upsample=False):
        super().__init__()
        self.in_ch = in_ch
        self.out_ch = out_ch
        self.kernel_size = kernel_size
        self.demodulate = demodulate
        self.upsample = upsample
        self.weight = nn.Parameter(torch.randn(out_ch, in_ch, kernel_size, kernel_size))
        self.scale = 1.0 / math.sqrt(in_ch * kernel_size**2)

    def forward(self, x: Tensor, style: Tensor) -> Tensor:
        if style.shape[-1] != self.in_ch:
            raise ShapeError(f"style width {style.shape[-1]} != conv input channels {self.in_ch}")
        if self.upsample:
            x = F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)
        b, _, h, w = x.shape
        weight = self.weight * self.scale
        weight = weight.unsqueeze(0) * style.reshape(b, 1, self.in_ch, 1, 1)
        if self.demodulate:
            decoef = torch.rsqrt(weight.pow(2).sum(dim=(2, 3, 4)) + 1e-8)
            weight = weight * decoef.reshape(b, self.out_ch, 1, 1, 1)
        weight = weight.reshape(b * self.out_ch, self.in_ch, self.kernel_size, self.kernel_size)
        out = F.conv2d(x.reshape(1, b * self.in_ch, h, w), weight,
                       padding=self.kernel_size // 2, groups=b)
        return out.reshape(b, self.out_ch, h, w)


class SynthesisLayer(nn.Module):
    """Modulated conv + frozen noise + bias + activation."""

    def __init__(self, in_ch, out_ch, resolution, noise_seed, upsample=False):
        super().__init__()
        self.conv = ModulatedConv2d(in_ch, out_ch, 3, upsample=upsample)
        self.bias = nn.Parameter(torch.zeros(out_ch))
        self.noise_strength = nn.Parameter(torch.tensor(0.01))
        gen = torch.Generator().manual_seed(noise_seed)
        self.register_buffer("noise", torch.randn(1, 1, resolution, resolution, generator=gen))

    def forward(self, x, style):
        out = self.conv(x, style)
        out = out + self.noise_strength * self.noise
        out = out + self.bias.reshape(1, -1, 1, 1)
        return F.leaky_relu(out, 0.2) * math.sqrt(2)


class ToRGB(nn.Module):
    """Modulated 1x1 projection (no demodulation), skip-accumulated."""

    def __init__(self, in_ch):
        super().__init__()
        self.conv = ModulatedConv2d(in_ch, 3, 1, demodulate=False)
        self.bias = nn.Parameter(torch.zeros(3))

    def forward(self, x, style, skip=None):
        out = self.conv(x, style) + self.bias.reshape(1, -1, 1, 1)
        if skip is not None:
            skip = F.interpolate(skip, scale_factor=2, mode="bilinear", align_corners=False)
            out = out + skip
        return out


class SynthesisNetwork(nn.Module):
    def __init__(self, cfg: GeneratorConfig):
        super().__init__()
        self.cfg = cfg
        ch4 = cfg.channels[4]
        self.constant = nn.Parameter(torch.randn(1, ch4, 4, 4))
        self.layers = nn.ModuleList()
        self.rgbs = nn.ModuleList()
        prev = ch4
        for i, res in enumerate(cfg.level_resolutions()):
            ch = cfg.channels[res]
            seed0 = derive_seed(cfg.noise_seed, f"noise{2 * i}")
            seed1 = derive_seed(cfg.noise_seed, f"noise{2 * i + 1}")
            self.layers.append(SynthesisLayer(prev, ch, res, seed0, upsample=res > 4))
            self.layers.append(SynthesisLayer(ch, ch, res, seed1))
            self.rgbs.append(ToRGB(ch))
            prev = ch

    def forward(self, styles: list[Tensor]) -> Tensor:
        batch = styles[0].shape[0]
        x = self.constant.expand(batch, -1, -1, -1)
        skip = None
        for level in range(len(self.rgbs)):
            x = self.layers[2 * level](x, styles[2 * level])
            x = self.layers[2 * level + 1](x, styles[2 * level + 1])
            skip = self.rgbs[level](x, styles[2 * level + 1], skip)
        return torch.sigmoid(skip)


class StyleBasedGenerator(nn.Module):
    """The full decoder: mapping, affine bank, and synthesis."""

    def __init__(self, cfg: GeneratorConfig):
        cfg.validate()
        super().__init__()
        self.cfg = cfg
        self.mapping = MappingNetwork(cfg.latent_dim, cfg.mapping_layers)
        self.affines = AffineBank(cfg.latent_dim, cfg.style_widths())
        self.synthesis = SynthesisNetwork(cfg)
        self.register_buffer("w_mean", torch.zeros(cfg.latent_dim))

    # -- latent-space operations -------------------------------------------

    @property
    def offset_mask(self) -> tuple[bool, ...]:
        lf = self.cfg.deform_layers
        return tuple(i < lf for i in range(self.cfg.n_layers))

    def zero_offset(self, lead_shape: tuple[int, ...] = ()) -> StyleLatent:
        return StyleLatent.zero_offset(
            self.cfg.style_widths(), self.cfg.deform_layers, lead_shape,
            dtype=self.w_mean.dtype, device=self.w_mean.device,
        )

    def estimate_w_mean(self, seed: int, n_samples: int = _W_MEAN_SAMPLES) -> None:
        gen = torch.Generator().manual_seed(seed)
        total = torch.zeros(self.cfg.latent_dim)
        done = 0
        with torch.no_grad():
            while done < n_samples:
                n = min(2048, n_samples - done)
                z = torch.randn(n, self.cfg.latent_dim, generator=gen)
                total += self.mapping(z).sum(dim=0)
                done += n
        self.w_mean.copy_(total / n_samples)

    def map_z_to_w(self, z: Tensor, psi: float | None = None) -> WPlusLatent:
        """Map noise to w, truncate toward the mean, broadcast to all layers."""
        if psi is None:
            psi = self.cfg.truncation_psi
        if not 0.0 <= psi <= 1.0:
            raise ShapeError(f"truncation psi must be in [0, 1], got {psi}")
        if z.shape[-1] != self.cfg.latent_dim:
            raise ShapeError(f"z has dim {z.shape[-1]}, expected {self.cfg.latent_dim}")
        if not torch.isfinite(z).all():
            raise ShapeError("z contains non-finite entries")
        w = self.mapping(z)
        w = self.w_mean + psi * (w - self.w_mean)
        layers = w.unsqueeze(-2).expand(*w.shape[:-1], self.cfg.n_layers, w.shape[-1])
        return WPlusLatent(layers.contiguous())

    def affine(self, w_plus: WPlusLatent) -> StyleLatent:
        """Apply the per-layer affines; the result is a full style, not an offset."""
        w_plus.expect_shape(self.cfg.n_layers, self.cfg.latent_dim)
        styles = self.affines(w_plus.layers)
        return StyleLatent(styles, tuple(False for _ in styles))

    # -- rendering -----------------------------------------------------------

    def synthesize(self, style: StyleLatent) -> Tensor:
        """Deterministic render of a full style; output in [0, 1]."""
        style.expect_widths(self.cfg.style_widths())
        vecs = style.per_layer
        squeeze = vecs[0].ndim == 1
        if squeeze:
            vecs = [v.unsqueeze(0) for v in vecs]
        img = self.synthesis(vecs)
        return img.squeeze(0) if squeeze else img

    def generate(self, w_id: WPlusLatent, s_f: StyleLatent) -> Tensor:
        """Render identity code + deformation offset."""
        if s_f.offset_mask != self.offset_mask:
            raise ShapeError(
                "offset mask does not match the generator's deformation layers"
            )
        s_f.expect_widths(self.cfg.style_widths()).assert_offset()
        style = self.affine(w_id).add_offset(s_f)
        return self.synthesize(style)

    def clone(self) -> "StyleBasedGenerator":
        return copy.deepcopy(self)


def build_generator(cfg: GeneratorConfig, seed: int = 0) -> StyleBasedGenerator:
    """Construct a generator with seeded weights and an estimated w mean."""
    torch.manual_seed(derive_seed(seed, "generator-weights"))
    gen = StyleBasedGenerator(cfg)
    gen.estimate_w_mean(derive_seed(seed, "w-mean"))
    gen.eval()
    gen.requires_grad_(False)
    return gen
