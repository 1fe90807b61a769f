"""Latent containers and image validation.

Conventions: identity codes live in an extended per-layer w space shaped
(..., L, D); style vectors are per-layer tensors whose width is that conv
layer's input channel count. Deformation offsets are style latents whose
entries beyond the first ``deform_layers`` maskable layers are exactly zero.
Images are float tensors shaped (..., 3, R, R) with values in [0, 1].
"""

from dataclasses import dataclass

import torch
from torch import Tensor

from .errors import ShapeError


@dataclass
class WPlusLatent:
    """Per-layer identity code: (..., n_layers, latent_dim)."""

    layers: Tensor

    def __post_init__(self):
        if self.layers.ndim < 2:
            raise ShapeError(f"w+ latent needs >= 2 dims (L, D), got {tuple(self.layers.shape)}")
        if not torch.isfinite(self.layers).all():
            raise ShapeError("w+ latent contains non-finite entries")

    @property
    def n_layers(self) -> int:
        return self.layers.shape[-2]

    @property
    def latent_dim(self) -> int:
        return self.layers.shape[-1]

    def expect_shape(self, n_layers: int, latent_dim: int) -> "WPlusLatent":
        if self.n_layers != n_layers or self.latent_dim != latent_dim:
            raise ShapeError(
                f"w+ latent shaped {tuple(self.layers.shape[-2:])}, "
                f"expected ({n_layers}, {latent_dim})"
            )
        return self

    def detach(self) -> "WPlusLatent":
        return WPlusLatent(self.layers.detach())

    def clone(self) -> "WPlusLatent":
        return WPlusLatent(self.layers.clone())

    def __add__(self, other: "WPlusLatent") -> "WPlusLatent":
        return WPlusLatent(self.layers + other.layers)


@dataclass
class StyleLatent:
    """Per-layer style vectors plus the mask of offset-capable layers.

    ``offset_mask[i]`` marks whether layer i may carry a deformation offset;
    a full style (output of the affine bank) carries an all-False mask.
    """

    per_layer: list[Tensor]
    offset_mask: tuple[bool, ...]

    def __post_init__(self):
        if len(self.per_layer) != len(self.offset_mask):
            raise ShapeError(
                f"{len(self.per_layer)} style layers but {len(self.offset_mask)} mask entries"
            )
        lead = self.per_layer[0].shape[:-1] if self.per_layer else ()
        for i, vec in enumerate(self.per_layer):
            if vec.ndim < 1:
                raise ShapeError(f"style layer {i} must be at least 1-D")
            if vec.shape[:-1] != lead:
                raise ShapeError("style layers disagree on leading (batch) dims")

    @property
    def n_layers(self) -> int:
        return len(self.per_layer)

    def widths(self) -> list[int]:
        return [int(v.shape[-1]) for v in self.per_layer]

    def expect_widths(self, widths: list[int]) -> "StyleLatent":
        if self.widths() != list(widths):
            raise ShapeError(f"style widths {self.widths()} do not match generator {list(widths)}")
        return self

    def is_offset(self) -> bool:
        """True when every masked-off layer is exactly zero."""
        for vec, allowed in zip(self.per_layer, self.offset_mask):
            if not allowed and bool((vec != 0).any()):
                return False
        return True

    def assert_offset(self) -> "StyleLatent":
        if not self.is_offset():
            raise ShapeError(
                "deformation offset has nonzero entries beyond the offset-capable layers"
            )
        return self

    def add_offset(self, offset: "StyleLatent") -> "StyleLatent":
        """Per-layer vector addition on the offset-capable layers."""
        offset.expect_widths(self.widths()).assert_offset()
        mixed = [
            base + off if allowed else base
            for base, off, allowed in zip(self.per_layer, offset.per_layer, offset.offset_mask)
        ]
        return StyleLatent(mixed, self.offset_mask)

    def detach(self) -> "StyleLatent":
        return StyleLatent([v.detach() for v in self.per_layer], self.offset_mask)

    def clone(self) -> "StyleLatent":
        return StyleLatent([v.clone() for v in self.per_layer], self.offset_mask)

    @staticmethod
    def zero_offset(
        widths: list[int],
        deform_layers: int,
        lead_shape: tuple[int, ...] = (),
        dtype: torch.dtype = torch.float32,
        device: torch.device | str = "cpu",
    ) -> "StyleLatent":
        mask = tuple(i < deform_layers for i in range(len(widths)))
        vecs = [torch.zeros(*lead_shape, w, dtype=dtype, device=device) for w in widths]
        return StyleLatent(vecs, mask)


@dataclass
class LatentPair:
    """Encoder output: identity code + deformation offset."""

    w_id: WPlusLatent
    s_f: StyleLatent

    def __post_init__(self):
        self.s_f.assert_offset()

    def detach(self) -> "LatentPair":
        return LatentPair(self.w_id.detach(), self.s_f.detach())


def validate_image(img: Tensor, resolution: int | None = None, name: str = "image") -> Tensor:
    """Check the (..., 3, R, R) layout, value range, and finiteness."""
    if img.ndim < 3 or img.shape[-3] != 3 or img.shape[-1] != img.shape[-2]:
        raise ShapeError(f"{name} must be (..., 3, R, R), got {tuple(img.shape)}")
    if resolution is not None and img.shape[-1] != resolution:
        raise ShapeError(f"{name} resolution {img.shape[-1]} != expected {resolution}")
    with torch.no_grad():
        if not torch.isfinite(img).all():
            raise ShapeError(f"{name} contains non-finite values")
        if float(img.min()) < -1e-5 or float(img.max()) > 1 + 1e-5:
            raise ShapeError(f"{name} values outside [0, 1]")
    return img
