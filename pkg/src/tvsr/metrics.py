"""PSNR / SSIM on luminance and RGB, per-frame PSNR curves and temporal profiles."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .dataio import DatasetManifest, DegradationSpec, as_sequence, degrade_sequence, save_frame

PSNR_CAP = 99.0
SSIM_K1, SSIM_K2 = 0.01, 0.03


def rgb_to_y(frame) -> np.ndarray:
    """BT.601 studio-swing luma of an RGB frame in [0, 1]; result in [16/255, 235/255]."""
    f = np.asarray(frame, dtype=np.float64)
    return (65.481 * f[..., 0] + 128.553 * f[..., 1] + 24.966 * f[..., 2] + 16.0) / 255.0


def _crop(x: np.ndarray, border: int) -> np.ndarray:
    if border <= 0:
        return x
    return x[border:-border, border:-border]


def psnr(a, b, border_crop: int = 0) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    if border_crop < 0 or 2 * border_crop >= min(a.shape[:2]):
        raise ValueError(f"border_crop {border_crop} leaves nothing of a {a.shape[:2]} image")
    mse = float(np.mean((_crop(a, border_crop) - _crop(b, border_crop)) ** 2))
    if mse < 1e-12:
        return PSNR_CAP
    return 10.0 * math.log10(1.0 / mse)


def ssim_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    ax = np.arange(size, dtype=np.float64) - (size - 1) / 2
    g = np.exp(-(ax**2) / (2 * sigma**2))
    g /= g.sum()
    return g


def _filter_valid(x: np.ndarray, g: np.ndarray) -> np.ndarray:
    # separable 'valid' correlation with the 1-D window along both axes
    x = sliding_window_view(x, len(g), axis=0) @ g
    return sliding_window_view(x, len(g), axis=1) @ g


def ssim(a, b, window: int = 11, sigma: float = 1.5) -> float:
    """Gaussian-windowed SSIM (L=1), averaged over every valid window position."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    if a.ndim != 2:
        raise ValueError("ssim expects single-channel maps")
    if min(a.shape) < window:
        raise ValueError(f"image {a.shape} is smaller than the {window}x{window} window")
    g = ssim_window(window, sigma)
    c1, c2 = SSIM_K1**2, SSIM_K2**2
    mu_a, mu_b = _filter_valid(a, g), _filter_valid(b, g)
    var_a = _filter_valid(a * a, g) - mu_a**2
    var_b = _filter_valid(b * b, g) - mu_b**2
    cov = _filter_valid(a * b, g) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def ssim_rgb(a, b) -> float:
    return float(np.mean([ssim(a[..., c], b[..., c]) for c in range(3)]))


# --- evaluation -------------------------------------------------------------------------

@dataclass
class EvalProtocol:
    border_crop: int = 8
    skip_frames: int = 0  # frames dropped at both ends before averaging
    channels: tuple[str, ...] = ("y", "rgb")

    def describe(self) -> str:
        return (f"border_crop={self.border_crop} frames={'all' if not self.skip_frames else f'skip {self.skip_frames} per end'} "
                f"y=BT.601-studio channels={','.join(self.channels)}")


@dataclass
class SequenceScore:
    name: str
    psnr_y: float = math.nan
    ssim_y: float = math.nan
    psnr_rgb: float = math.nan
    ssim_rgb: float = math.nan
    psnr_y_per_frame: list[float] = field(default_factory=list, repr=False)


@dataclass
class EvalReport:
    sequences: list[SequenceScore]
    protocol: EvalProtocol

    def mean(self, key: str) -> float:
        return float(np.mean([getattr(s, key) for s in self.sequences]))

    def to_tsv(self) -> str:
        lines = [f"# {self.protocol.describe()}", "sequence\tpsnr_y\tssim_y\tpsnr_rgb\tssim_rgb"]
        for s in self.sequences:
            lines.append(f"{s.name}\t{s.psnr_y:.4f}\t{s.ssim_y:.6f}\t{s.psnr_rgb:.4f}\t{s.ssim_rgb:.6f}")
        lines.append(f"mean\t{self.mean('psnr_y'):.4f}\t{self.mean('ssim_y'):.6f}\t"
                     f"{self.mean('psnr_rgb'):.4f}\t{self.mean('ssim_rgb'):.6f}")
        return "\n".join(lines) + "\n"

    def to_table(self) -> str:
        w = max([8] + [len(s.name) for s in self.sequences])
        lines = [f"protocol: {self.protocol.describe()}",
                 f"{'sequence':<{w}}  {'Y PSNR/SSIM':>16}  {'RGB PSNR/SSIM':>16}"]
        rows = [(s.name, s.psnr_y, s.ssim_y, s.psnr_rgb, s.ssim_rgb) for s in self.sequences]
        rows.append(("mean", self.mean("psnr_y"), self.mean("ssim_y"), self.mean("psnr_rgb"), self.mean("ssim_rgb")))
        for name, py, sy, pr, sr in rows:
            lines.append(f"{name:<{w}}  {py:>8.2f}/{sy:.4f}  {pr:>8.2f}/{sr:.4f}")
        return "\n".join(lines) + "\n"


def score_sequence(name: str, pred, gt, protocol: EvalProtocol = EvalProtocol()) -> SequenceScore:
    """Per-frame metrics averaged over the included frames of one sequence."""
    pred = np.clip(as_sequence(pred), 0.0, 1.0)
    gt = as_sequence(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"prediction {pred.shape} and ground truth {gt.shape} differ")
    k = protocol.skip_frames
    idx = range(k, len(gt) - k) if len(gt) > 2 * k else range(len(gt))
    b = protocol.border_crop
    out = SequenceScore(name)
    py = [psnr(rgb_to_y(pred[i]), rgb_to_y(gt[i]), b) for i in idx]
    out.psnr_y_per_frame = py
    if "y" in protocol.channels:
        out.psnr_y = float(np.mean(py))
        out.ssim_y = float(np.mean([ssim(_crop(rgb_to_y(pred[i]), b), _crop(rgb_to_y(gt[i]), b)) for i in idx]))
    if "rgb" in protocol.channels:
        out.psnr_rgb = float(np.mean([psnr(pred[i], gt[i], b) for i in idx]))
        out.ssim_rgb = float(np.mean([ssim_rgb(_crop(pred[i], b), _crop(gt[i], b)) for i in idx]))
    return out


def evaluate(model, manifest: DatasetManifest, protocol: EvalProtocol = EvalProtocol(),
             split: str | None = None, outputs: dict | None = None) -> EvalReport:
    """Degrade every ground-truth sequence, super-resolve it and score it.

    ``model`` may be ``None`` for the plain bicubic baseline. Sequences are
    reported sorted by name. When ``outputs`` is a dict, predictions are stored
    in it by sequence name.
    """
    from .dataio import bicubic_upsample
    from .models import forward_video

    deg = manifest.degradation
    entries = manifest.split(split) if split else manifest.entries
    scores = []
    for e in sorted(entries, key=lambda e: e.path):
        gt = manifest.load(e)
        h, w = gt.shape[1:3]
        gt = gt[:, : h - h % deg.scale, : w - w % deg.scale]
        lr = degrade_sequence(gt, deg)
        if model is None:
            pred = np.stack([bicubic_upsample(f, deg.scale) for f in lr])
        else:
            pred = forward_video(model, lr)
        if outputs is not None:
            outputs[e.path] = pred
        scores.append(score_sequence(e.path, pred, gt, protocol))
    return EvalReport(scores, protocol)


def psnr_curve(pred, gt, border_crop: int = 0) -> list[float]:
    pred, gt = np.clip(as_sequence(pred), 0, 1), as_sequence(gt)
    return [psnr(rgb_to_y(p), rgb_to_y(g), border_crop) for p, g in zip(pred, gt)]


def psnr_over_time(model, gt, degradation: DegradationSpec | None = None, border_crop: int = 0) -> list[float]:
    """Y-PSNR of every output frame for one ground-truth sequence."""
    from .models import forward_video

    degradation = degradation or DegradationSpec(scale=model.spec.scale)
    gt = as_sequence(gt)
    return psnr_curve(forward_video(model, degrade_sequence(gt, degradation)), gt, border_crop)


def write_curve_tsv(curve, path) -> None:
    Path(path).write_text("frame\tpsnr_y\n" + "".join(f"{i}\t{v:.6f}\n" for i, v in enumerate(curve)))


@dataclass
class TemporalProfile:
    image: np.ndarray  # (num_frames, width, 3)
    row: int

    def save_png(self, path) -> None:
        save_frame(self.image, path)


def temporal_profile(frames, row: int) -> TemporalProfile:
    """Stack row ``row`` of every frame; row ``t`` of the result is frame ``t``'s line."""
    seq = as_sequence(frames)
    if not 0 <= row < seq.shape[1]:
        raise ValueError(f"row {row} outside [0, {seq.shape[1]})")
    return TemporalProfile(seq[:, row].copy(), row)
