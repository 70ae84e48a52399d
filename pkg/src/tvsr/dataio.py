"""Frame I/O, BD degradation (Gaussian blur + decimation) and patch sampling.

Frames are ``H x W x 3`` float arrays (RGB, values in ``[0, 1]``); a sequence
is an ``L x H x W x 3`` array, so uniform spatial size is structural.
"""

from __future__ import annotations

import math
import os
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image
from scipy import ndimage

FRAME_PATTERN = "{:08d}.png"


def as_frame(x) -> np.ndarray:
    """Validate and return ``x`` as a float64 ``H x W x 3`` frame."""
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[2] != 3 or arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ValueError(f"expected an HxWx3 frame, got shape {arr.shape}")
    return arr


def as_sequence(x) -> np.ndarray:
    """Validate and return ``x`` as a float64 ``L x H x W x 3`` sequence.

    Accepts an array or a list of equally sized frames.
    """
    if isinstance(x, (list, tuple)):
        if not x:
            raise ValueError("a sequence needs at least one frame")
        shapes = {np.shape(f) for f in x}
        if len(shapes) != 1:
            raise ValueError(f"frames differ in size: {sorted(shapes)}")
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 4 or arr.shape[-1] != 3 or 0 in arr.shape:
        raise ValueError(f"expected an LxHxWx3 sequence, got shape {arr.shape}")
    return arr


@dataclass(frozen=True)
class DegradationSpec:
    sigma: float = 1.6
    scale: int = 4
    kernel_size: int = 13

    def __post_init__(self):
        if self.sigma <= 0:
            raise ValueError(f"sigma must be positive, got {self.sigma}")
        if self.scale < 1:
            raise ValueError(f"scale must be >= 1, got {self.scale}")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ValueError(f"kernel_size must be a positive odd integer, got {self.kernel_size}")

    @property
    def recommended_kernel_size(self) -> int:
        return 2 * math.ceil(3 * self.sigma) + 1

    def to_dict(self) -> dict[str, str]:
        return {"sigma": repr(float(self.sigma)), "scale": str(self.scale),
                "kernel_size": str(self.kernel_size)}

    @classmethod
    def from_dict(cls, d: dict[str, str]) -> "DegradationSpec":
        return cls(sigma=float(d.get("sigma", 1.6)), scale=int(d.get("scale", 4)),
                   kernel_size=int(d.get("kernel_size", 13)))


@dataclass
class ClipSample:
    lr_clip: np.ndarray
    hr_clip: np.ndarray
    center_index: int

    def __post_init__(self):
        self.lr_clip = as_sequence(self.lr_clip)
        self.hr_clip = as_sequence(self.hr_clip)
        if len(self.lr_clip) != len(self.hr_clip):
            raise ValueError("lr_clip and hr_clip differ in length")
        lh, lw = self.lr_clip.shape[1:3]
        hh, hw = self.hr_clip.shape[1:3]
        if hh % lh or hw % lw or hh // lh != hw // lw:
            raise ValueError(f"hr size {hh}x{hw} is not an integer multiple of lr size {lh}x{lw}")
        if not 0 <= self.center_index < len(self.lr_clip):
            raise ValueError(f"center_index {self.center_index} out of range")

    @property
    def scale(self) -> int:
        return self.hr_clip.shape[1] // self.lr_clip.shape[1]


def gaussian_kernel(sigma: float, size: int) -> np.ndarray:
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    if size < 1 or size % 2 == 0:
        raise ValueError(f"size must be a positive odd integer, got {size}")
    r = size // 2
    ax = np.arange(-r, r + 1, dtype=np.float64)
    g = np.exp(-(ax**2) / (2.0 * sigma**2))
    k = np.outer(g, g)
    return k / k.sum()


def blur(frame: np.ndarray, spec: DegradationSpec) -> np.ndarray:
    """Gaussian blur with reflective (mirror, edge not repeated) boundaries."""
    frame = as_frame(frame)
    k = gaussian_kernel(spec.sigma, spec.kernel_size)
    out = np.empty_like(frame)
    for c in range(3):
        out[..., c] = ndimage.correlate(frame[..., c], k, mode="mirror")
    return out


def degrade(hr: np.ndarray, spec: DegradationSpec = DegradationSpec()) -> np.ndarray:
    """Blur then keep every ``scale``-th pixel starting at offset 0."""
    hr = as_frame(hr)
    h, w = hr.shape[:2]
    s = spec.scale
    if h % s or w % s:
        raise ValueError(f"frame size {h}x{w} is not divisible by scale {s}")
    lr = blur(hr, spec)[::s, ::s]
    return np.clip(lr, 0.0, 1.0)


def degrade_sequence(seq, spec: DegradationSpec = DegradationSpec()) -> np.ndarray:
    return np.stack([degrade(f, spec) for f in as_sequence(seq)])


def bicubic_upsample(lr: np.ndarray, scale: int) -> np.ndarray:
    """Bicubic (a=-0.75, half-pixel centres, clamped borders) enlargement."""
    if scale < 1:
        raise ValueError(f"scale must be >= 1, got {scale}")
    lr = as_frame(lr)
    if scale == 1:
        return lr.copy()
    x = torch.from_numpy(np.ascontiguousarray(lr.transpose(2, 0, 1)))[None]
    y = bicubic_tensor(x, scale)
    return y[0].numpy().transpose(1, 2, 0)


def bicubic_tensor(x: torch.Tensor, scale: int) -> torch.Tensor:
    """Tensor form of :func:`bicubic_upsample` for ``(B, C, h, w)`` input."""
    if scale == 1:
        return x
    return F.interpolate(x, scale_factor=scale, mode="bicubic", align_corners=False)


def sample_patch(clip, spec: DegradationSpec, patch_lr: int, rng_seed=None) -> ClipSample:
    """Crop one random scale-aligned window shared by every frame of ``clip``.

    ``rng_seed`` may be an int or a ``numpy.random.Generator`` (advanced in place).
    """
    clip = as_sequence(clip)
    s = spec.scale
    patch_hr = patch_lr * s
    _, h, w, _ = clip.shape
    if h < patch_hr or w < patch_hr:
        raise ValueError(f"frames of {h}x{w} are smaller than the {patch_hr}x{patch_hr} HR patch")
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    y0 = s * int(rng.integers(0, (h - patch_hr) // s + 1))
    x0 = s * int(rng.integers(0, (w - patch_hr) // s + 1))
    hr = clip[:, y0:y0 + patch_hr, x0:x0 + patch_hr]
    lr = np.stack([degrade(f, spec) for f in hr])
    return ClipSample(lr, hr, center_index=len(clip) // 2)


def synthetic_sequence(rng_seed=None, length: int = 7, height: int = 64, width: int = 64,
                       velocity: tuple[float, float] = (0.7, 1.3), smoothness: float = 2.0) -> np.ndarray:
    """Smooth random texture translated by ``velocity`` pixels per frame.

    Used for micro-scale training and tests; sub-pixel shifts make neighbouring
    frames carry complementary samples after decimation.
    """
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    vy, vx = velocity
    pad = int(math.ceil(max(abs(vy), abs(vx)) * length)) + 4
    H, W = height + 2 * pad, width + 2 * pad
    base = ndimage.gaussian_filter(rng.random((H, W, 3)), sigma=(smoothness, smoothness, 0), mode="wrap")
    base = (base - base.min()) / (base.max() - base.min() + 1e-12)
    frames = []
    for t in range(length):
        shifted = ndimage.shift(base, (vy * t, vx * t, 0), order=3, mode="wrap")
        frames.append(shifted[pad:pad + height, pad:pad + width])
    return np.clip(np.stack(frames), 0.0, 1.0)


# --- disk I/O ---------------------------------------------------------------

_NUM = re.compile(r"(\d+)")


def _frame_key(p: Path):
    nums = _NUM.findall(p.stem)
    return (int(nums[-1]) if nums else -1, p.name)


def list_frames(dir_path) -> list[Path]:
    d = Path(dir_path)
    if not d.is_dir():
        raise FileNotFoundError(f"{d}: not a directory")
    files = sorted((p for p in d.iterdir() if p.suffix.lower() == ".png"), key=_frame_key)
    if not files:
        raise FileNotFoundError(f"{d}: no PNG frames found")
    return files


def load_frame(path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    except (OSError, ValueError) as e:
        raise OSError(f"{path}: cannot read frame ({e})") from e
    return arr


def load_sequence(dir_path) -> np.ndarray:
    """Load numerically ordered PNG frames (``00000001.png`` or ``im1.png`` style)."""
    files = list_frames(dir_path)
    frames = []
    for p in files:
        f = load_frame(p)
        if frames and f.shape != frames[0].shape:
            raise OSError(f"{p}: size {f.shape[:2]} differs from {frames[0].shape[:2]}")
        frames.append(f)
    return np.stack(frames)


def load_septuplet(clip_dir) -> np.ndarray:
    """Vimeo-90k layout adapter: ``<clip>/im1.png ... im7.png``."""
    d = Path(clip_dir)
    files = [d / f"im{i}.png" for i in range(1, 8)]
    for p in files:
        if not p.is_file():
            raise FileNotFoundError(f"{p}: missing septuplet frame")
    frames = [load_frame(p) for p in files]
    if len({f.shape for f in frames}) != 1:
        raise OSError(f"{d}: septuplet frames differ in size")
    return np.stack(frames)


def to_uint8(frame) -> np.ndarray:
    return np.round(np.clip(np.asarray(frame, dtype=np.float64), 0, 1) * 255.0).astype(np.uint8)


def save_frame(frame, path) -> None:
    Image.fromarray(to_uint8(frame)).save(path)


def save_sequence(seq, dir_path) -> list[Path]:
    seq = as_sequence(seq)
    d = Path(dir_path)
    d.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, f in enumerate(seq):
        p = d / FRAME_PATTERN.format(i)
        save_frame(f, p)
        paths.append(p)
    return paths


# --- manifests ----------------------------------------------------------------

@dataclass
class ManifestEntry:
    path: str
    num_frames: int
    split: str = "train"


@dataclass
class DatasetManifest:
    """Clip list plus the degradation every clip is paired with.

    On disk: ``# key=value`` header lines for the degradation, then one clip per
    line as ``path<TAB>num_frames<TAB>split``. Relative paths resolve against
    the manifest's directory.
    """

    entries: list[ManifestEntry] = field(default_factory=list)
    degradation: DegradationSpec = field(default_factory=DegradationSpec)
    root: Path | None = None

    def resolve(self, entry: ManifestEntry) -> Path:
        p = Path(entry.path)
        if not p.is_absolute() and self.root is not None:
            p = self.root / p
        return p

    def split(self, tag: str) -> list[ManifestEntry]:
        return [e for e in self.entries if e.split == tag]

    def load(self, entry: ManifestEntry) -> np.ndarray:
        seq = load_sequence(self.resolve(entry))
        if len(seq) != entry.num_frames:
            raise OSError(f"{self.resolve(entry)}: expected {entry.num_frames} frames, found {len(seq)}")
        return seq

    def validate(self) -> None:
        for e in self.entries:
            n = len(list_frames(self.resolve(e)))
            if n != e.num_frames:
                raise OSError(f"{self.resolve(e)}: expected {e.num_frames} frames, found {n}")

    def write(self, path) -> None:
        lines = ["# tvsr dataset manifest"]
        lines += [f"# {k}={v}" for k, v in self.degradation.to_dict().items()]
        lines += [f"{e.path}\t{e.num_frames}\t{e.split}" for e in self.entries]
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def read(cls, path) -> "DatasetManifest":
        path = Path(path)
        if not path.is_file():
            raise FileNotFoundError(f"{path}: manifest not found")
        header: dict[str, str] = {}
        entries = []
        for n, line in enumerate(path.read_text().splitlines(), 1):
            if not line.strip():
                continue
            if line.startswith("#"):
                body = line[1:].strip()
                if "=" in body:
                    k, v = body.split("=", 1)
                    header[k.strip()] = v.strip()
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise ValueError(f"{path}:{n}: expected path<TAB>num_frames<TAB>split")
            entries.append(ManifestEntry(parts[0], int(parts[1]), parts[2]))
        return cls(entries, DegradationSpec.from_dict(header), root=path.parent)


def scan_sequences(root) -> Iterator[tuple[str, Path]]:
    """Yield ``(name, dir)`` for every directory under ``root`` holding PNG frames."""
    root = Path(root)
    for dirpath, _, files in sorted(os.walk(root)):
        if any(f.lower().endswith(".png") for f in files):
            d = Path(dirpath)
            yield (d.relative_to(root).as_posix() or d.name), d


def vimeo_manifest(root, list_file, split: str = "train",
                   degradation: DegradationSpec = DegradationSpec()) -> DatasetManifest:
    """Manifest over a Vimeo-90k septuplet tree from its ``sep_*list.txt``."""
    root = Path(root)
    names = [ln.strip() for ln in Path(list_file).read_text().splitlines() if ln.strip()]
    entries = [ManifestEntry(str(root / n), 7, split) for n in names]
    return DatasetManifest(entries, degradation, root=root)
