"""Serialization and data loading.

Arrays, checkpoints and synthetic datasets all go through one container
format: a magic header, a length-prefixed JSON manifest with sorted keys,
then raw little-endian array bytes. No timestamps, no pickling, so equal
content gives equal bytes.

Synthetic clips store rendered frames together with the exact latents
that produced them; loading against the producing generator re-renders a
frame and demands bitwise equality. PNG export is the lossy path.
"""

import hashlib
import json
import os
import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from PIL import Image
from scipy import ndimage

from .config import DataConfig, GeneratorConfig, canonical_json, to_plain_dict
from .errors import DataError
from .generator import StyleBasedGenerator
from .latents import StyleLatent, WPlusLatent
from .rng import RngHub, derive_seed

_MAGIC = b"NAC1"
_DTYPES = {"float32", "float64", "int32", "int64", "uint8", "bool"}
ARRAY_SUFFIX = ".nac"


# -- named-array container -----------------------------------------------------


def save_arrays(path: str | Path, arrays: dict[str, np.ndarray], config: dict) -> None:
    path = Path(path)
    entries = {}
    blobs = []
    offset = 0
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name])
        dtype = str(arr.dtype)
        if dtype not in _DTYPES:
            raise DataError(f"array {name!r} has unsupported dtype {dtype}")
        raw = arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes()
        entries[name] = {"dtype": dtype, "shape": list(arr.shape),
                         "offset": offset, "nbytes": len(raw)}
        blobs.append(raw)
        offset += len(raw)
    manifest = json.dumps({"config": config, "arrays": entries},
                          sort_keys=True, separators=(",", ":")).encode()
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(len(manifest).to_bytes(8, "little"))
        f.write(manifest)
        for raw in blobs:
            f.write(raw)


def load_arrays(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    path = Path(path)
    if not path.exists():
        raise DataError(f"no such file: {path}")
    buf = path.read_bytes()
    if buf[:4] != _MAGIC:
        raise DataError(f"{path} is not an array container (bad magic)")
    mlen = int.from_bytes(buf[4:12], "little")
    if 12 + mlen > len(buf):
        raise DataError(f"{path} is truncated (manifest)")
    try:
        manifest = json.loads(buf[12:12 + mlen])
    except json.JSONDecodeError as e:
        raise DataError(f"{path} has a corrupt manifest: {e}") from e
    data = buf[12 + mlen:]
    arrays = {}
    for name, meta in manifest["arrays"].items():
        dtype = meta["dtype"]
        if dtype not in _DTYPES:
            raise DataError(f"{path}: array {name!r} has unsupported dtype {dtype}")
        end = meta["offset"] + meta["nbytes"]
        if end > len(data):
            raise DataError(f"{path} is truncated (array {name!r})")
        arr = np.frombuffer(data[meta["offset"]:end],
                            dtype=np.dtype(dtype).newbyteorder("<"))
        expected = int(np.prod(meta["shape"], dtype=np.int64)) if meta["shape"] else 1
        if arr.size != expected:
            raise DataError(f"{path}: array {name!r} size mismatch")
        arrays[name] = arr.reshape(meta["shape"]).astype(dtype)
    return arrays, manifest["config"]


# -- module checkpoints ----------------------------------------------------------


def module_weights_digest(module: torch.nn.Module) -> str:
    h = hashlib.sha256()
    for name, tensor in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(np.ascontiguousarray(tensor.detach().cpu().numpy()).tobytes())
    return h.hexdigest()


def save_module_checkpoint(path: str | Path, module: torch.nn.Module, kind: str,
                           config: dict, extra: dict | None = None) -> None:
    arrays = {f"param/{k}": v.detach().cpu().numpy()
              for k, v in module.state_dict().items()}
    save_arrays(path, arrays, {"kind": kind, "config": config, "extra": extra or {}})


def load_module_checkpoint(path: str | Path, expected_kind: str
                           ) -> tuple[dict[str, torch.Tensor], dict, dict]:
    arrays, config = load_arrays(path)
    if config.get("kind") != expected_kind:
        raise DataError(
            f"{path}: checkpoint kind {config.get('kind')!r}, expected {expected_kind!r}"
        )
    state = {k[len("param/"):]: torch.from_numpy(v.copy())
             for k, v in arrays.items() if k.startswith("param/")}
    return state, config.get("config", {}), config.get("extra", {})


# -- images ----------------------------------------------------------------------


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)


def save_png(path: str | Path, img: np.ndarray) -> None:
    """img: float32 (3, H, W) in [0, 1]. Quantizes to 8 bit."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(to_uint8(img).transpose(1, 2, 0)).save(path)


def load_image(path: str | Path) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise DataError(f"no such image: {path}")
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    return arr.transpose(2, 0, 1)


def _check_frame_geometry(shape: tuple[int, ...], path) -> None:
    h, w = shape[-2:]
    if h != w or h < 16 or (h & (h - 1)) != 0:
        raise DataError(f"{path}: frames must be square power-of-two, >= 16, got {h}x{w}")


# -- folder-of-clips datasets ------------------------------------------------------


@dataclass
class ClipRef:
    identity: str
    clip: str
    paths: list[Path]


class ClipDataset:
    """Frames on disk laid out as <root>/<identity>/<clip>/<NNNN>.png."""

    def __init__(self, root: str | Path):
        self.root = Path(root)
        if not self.root.is_dir():
            raise DataError(f"dataset root {self.root} is not a directory")
        self.index: list[ClipRef] = []
        for ident in sorted(p for p in self.root.iterdir() if p.is_dir()):
            for clip in sorted(p for p in ident.iterdir() if p.is_dir()):
                frames = sorted(clip.glob("*.png"))
                if frames:
                    self.index.append(ClipRef(ident.name, clip.name, frames))
        if not self.index:
            raise DataError(f"dataset root {self.root} contains no clips")

    def load_clip(self, ref: ClipRef, max_frames: int = 0) -> np.ndarray:
        paths = ref.paths[:max_frames] if max_frames else ref.paths
        frames = [load_image(p) for p in paths]
        shapes = {f.shape for f in frames}
        if len(shapes) != 1:
            raise DataError(f"clip {ref.identity}/{ref.clip} mixes frame sizes: {shapes}")
        _check_frame_geometry(frames[0].shape, f"{ref.identity}/{ref.clip}")
        return np.stack(frames).astype(np.float32)


# -- motion masks -------------------------------------------------------------------


def compute_motion_mask(frames: np.ndarray) -> np.ndarray:
    """Regions whose luminance varies over the clip, dilated. (T,3,H,W) -> (H,W)."""
    t, _, h, w = frames.shape
    if t < 4:
        return central_box_mask(h, w)
    lum = 0.299 * frames[:, 0] + 0.587 * frames[:, 1] + 0.114 * frames[:, 2]
    var = lum.var(axis=0)
    thresh = np.quantile(var, 0.75)
    if thresh <= 0:
        return central_box_mask(h, w)
    mask = var >= thresh
    mask = ndimage.binary_dilation(mask, iterations=2)
    return mask.astype(np.float32)


def central_box_mask(h: int, w: int) -> np.ndarray:
    mask = np.zeros((h, w), dtype=np.float32)
    mask[h // 4: h - h // 4, w // 4: w - w // 4] = 1.0
    return mask


# -- synthetic paired data ------------------------------------------------------------


@dataclass
class SyntheticClip:
    identity: str
    clip: str
    frames: np.ndarray          # (T, 3, R, R) float32
    w_id: np.ndarray            # (L, D) float32
    offsets: list[np.ndarray]   # per active layer: (T, width_j) float32
    mask: np.ndarray            # (H, W) float32

    def frame(self, t: int) -> torch.Tensor:
        return torch.from_numpy(self.frames[t])

    def latents(self, t: int, gen: StyleBasedGenerator) -> tuple[WPlusLatent, StyleLatent]:
        w = WPlusLatent(torch.from_numpy(self.w_id))
        off = gen.zero_offset()
        for j, arr in enumerate(self.offsets):
            off.per_layer[j] = torch.from_numpy(arr[t].copy())
        return w, off


class SyntheticDataset:
    def __init__(self, clips: list[SyntheticClip], meta: dict):
        self.clips = clips
        self.meta = meta

    @property
    def resolution(self) -> int:
        return self.clips[0].frames.shape[-1]

    def save(self, path: str | Path) -> None:
        arrays: dict[str, np.ndarray] = {}
        for c in self.clips:
            base = f"{c.identity}/{c.clip}"
            arrays[f"{base}/frames"] = c.frames
            arrays[f"{base}/w_id"] = c.w_id
            arrays[f"{base}/mask"] = c.mask
            for j, off in enumerate(c.offsets):
                arrays[f"{base}/offset{j:02d}"] = off
        save_arrays(path, arrays, self.meta)

    @classmethod
    def load(cls, path: str | Path, gen: StyleBasedGenerator | None = None
             ) -> "SyntheticDataset":
        arrays, meta = load_arrays(path)
        if meta.get("kind") != "synthetic-clips":
            raise DataError(f"{path}: not a synthetic clip container")
        groups: dict[tuple[str, str], dict[str, np.ndarray]] = {}
        for name, arr in arrays.items():
            m = re.fullmatch(r"([^/]+)/([^/]+)/(\w+)", name)
            if not m:
                raise DataError(f"{path}: unexpected array name {name!r}")
            groups.setdefault((m.group(1), m.group(2)), {})[m.group(3)] = arr
        clips = []
        for (ident, clip), parts in sorted(groups.items()):
            offs = [parts[k] for k in sorted(parts) if k.startswith("offset")]
            clips.append(SyntheticClip(ident, clip, parts["frames"], parts["w_id"],
                                       offs, parts["mask"]))
        ds = cls(clips, meta)
        if gen is not None:
            ds.verify_against(gen)
        return ds

    def verify_against(self, gen: StyleBasedGenerator) -> None:
        """Demand that the generator reproduces a stored frame bit for bit."""
        cfg_here = to_plain_dict(gen.cfg)
        if self.meta.get("generator") != cfg_here:
            raise DataError("dataset was produced by a differently configured generator")
        if self.meta.get("weights_sha") != module_weights_digest(gen):
            raise DataError("dataset was produced by a generator with different weights")
        c = self.clips[0]
        w = WPlusLatent(torch.from_numpy(c.w_id).unsqueeze(0))
        off = gen.zero_offset((1,))
        for j, arr in enumerate(c.offsets):
            off.per_layer[j] = torch.from_numpy(arr[0:1].copy())
        with torch.no_grad():
            img = gen.generate(w, off)[0].numpy()
        if not np.array_equal(img, c.frames[0]):
            raise DataError("stored frames do not match a re-render from stored latents")


def _style_unit_scales(gen: StyleBasedGenerator, seed: int, n: int = 256) -> list[float]:
    g = torch.Generator().manual_seed(seed)
    z = torch.randn(n, gen.cfg.latent_dim, generator=g)
    with torch.no_grad():
        style = gen.affine(gen.map_z_to_w(z))
    return [float(v.std(dim=0).mean()) for v in style.per_layer]


def _responsive_frames(gen: StyleBasedGenerator, seed: int, rank: int = 8,
                       n_refs: int = 4, n_probes: int = 16) -> list[torch.Tensor]:
    """Orthonormal style directions the renderer visibly responds to.

    Sketches the render Jacobian with random pixel cotangents at a few
    reference identities and keeps, per deformation layer, the top
    principal directions of the sketch. The renderer maps many style
    directions to (nearly) nothing on screen; an offset along those could
    never be recovered from frames, so motion trajectories are only drawn
    along directions that show.
    """
    g = torch.Generator().manual_seed(seed)
    z = torch.randn(n_refs, gen.cfg.latent_dim, generator=g)
    with torch.no_grad():
        w = gen.map_z_to_w(z)
    off = gen.zero_offset((n_refs,))
    probes = []
    for j in range(gen.cfg.deform_layers):
        probe = off.per_layer[j].clone().requires_grad_(True)
        off.per_layer[j] = probe
        probes.append(probe)
    img = gen.generate(w, off)
    sketches: list[list[torch.Tensor]] = [[] for _ in probes]
    for k in range(n_probes):
        cot = torch.randn(img.shape, generator=g)
        grads = torch.autograd.grad(img, probes, grad_outputs=cot,
                                    retain_graph=k < n_probes - 1)
        for rows, grad in zip(sketches, grads):
            rows.append(grad)
    frames = []
    for rows in sketches:
        s = torch.cat(rows)
        _, vals, vt = torch.linalg.svd(s, full_matrices=False)
        keep = max(1, min(rank, int((vals > 1e-6 * vals[0]).sum())))
        frames.append(vt[:keep])
    return frames


def make_synthetic_dataset(gen: StyleBasedGenerator, cfg: DataConfig, seed: int,
                           n_identities: int | None = None,
                           frames_per_clip: int | None = None) -> SyntheticDataset:
    """Sample identities plus smooth trajectories over a shared motion basis.

    The per-layer deformation directions are drawn once, inside the
    renderer's responsive subspace, and shared by every identity; only the
    trajectory coefficients are identity-specific. Offsets transfer across
    identities exactly because they mean the same thing for everyone, and
    they stay recoverable from frames because every basis direction
    actually moves pixels.
    """
    n_ids = cfg.n_identities if n_identities is None else n_identities
    n_frames = cfg.frames_per_clip if frames_per_clip is None else frames_per_clip
    hub = RngHub(seed)
    lf = gen.cfg.deform_layers
    widths = gen.cfg.style_widths()
    n_basis = 3
    amp = 0.1 * cfg.offset_scale
    # basis directions keyed to the generator, not the dataset seed: held-out
    # splits sampled under another seed move along the same motion manifold
    basis_key = derive_seed(0, f"motion-basis:{module_weights_digest(gen)}")
    units = _style_unit_scales(gen, basis_key)
    resp = _responsive_frames(gen, basis_key)
    bg = torch.Generator().manual_seed(basis_key)
    bases = []
    for j in range(lf):
        mix = torch.randn(n_basis, resp[j].shape[0], generator=bg)
        rows = mix @ resp[j]
        rows = rows / rows.norm(dim=1, keepdim=True)
        bases.append(rows * (units[j] * widths[j] ** 0.5))

    clips = []
    for i in range(n_ids):
        tg = hub.torch_gen(f"identity{i}")
        z = torch.randn(1, gen.cfg.latent_dim, generator=tg)
        with torch.no_grad():
            w_id = gen.map_z_to_w(z)

        freqs = torch.randint(1, 4, (n_basis,), generator=tg).float()
        phases = torch.rand(n_basis, generator=tg) * 2 * torch.pi
        t = torch.arange(n_frames).float() / max(1, n_frames)
        coeffs = torch.sin(2 * torch.pi * freqs.unsqueeze(1) * t + phases.unsqueeze(1))

        offsets = []
        for j in range(lf):
            traj = amp * (coeffs.t() @ bases[j]) / (n_basis ** 0.5)
            offsets.append(traj)

        # render one frame at a time so any later re-render matches bitwise
        frames = []
        with torch.no_grad():
            for ti in range(n_frames):
                off = gen.zero_offset((1,))
                for j in range(lf):
                    off.per_layer[j] = offsets[j][ti:ti + 1]
                frames.append(gen.generate(w_id, off))
        frames = torch.cat(frames).numpy().astype(np.float32)
        mask = compute_motion_mask(frames)
        clips.append(SyntheticClip(
            f"id{i:03d}", "c00", frames,
            w_id.layers.squeeze(0).numpy().astype(np.float32),
            [o.numpy().astype(np.float32) for o in offsets], mask,
        ))

    meta = {
        "kind": "synthetic-clips",
        "generator": to_plain_dict(gen.cfg),
        "weights_sha": module_weights_digest(gen),
        "seed": seed,
        "offset_scale": cfg.offset_scale,
        "n_identities": n_ids,
        "frames_per_clip": n_frames,
    }
    return SyntheticDataset(clips, meta)


@dataclass
class LoadedClip:
    """A clip read back from image files; no ground-truth latents."""
    identity: str
    clip: str
    frames: np.ndarray
    mask: np.ndarray
    offsets = None


def load_clip_folder(root: str | Path, max_frames: int = 0) -> list[LoadedClip]:
    ds = ClipDataset(root)
    clips = []
    for ref in ds.index:
        frames = ds.load_clip(ref, max_frames)
        clips.append(LoadedClip(ref.identity, ref.clip, frames,
                                compute_motion_mask(frames)))
    return clips


def export_clip_pngs(ds: SyntheticDataset, root: str | Path) -> int:
    """Write frames as <root>/<identity>/<clip>/NNNN.png. Lossy (8 bit)."""
    count = 0
    for c in ds.clips:
        for i in range(c.frames.shape[0]):
            save_png(Path(root) / c.identity / c.clip / f"{i:04d}.png", c.frames[i])
            count += 1
    return count


def cache_root() -> Path:
    return Path(os.environ.get("FACEMIME_HOME", Path.home() / ".cache" / "facemime"))
