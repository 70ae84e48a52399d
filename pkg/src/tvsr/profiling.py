"""Parameter / MAC accounting, latency measurement and gradient-flow probes."""

from __future__ import annotations

import os
import platform
import statistics
import time
from dataclasses import dataclass

import numpy as np
import torch

from .models import HiddenState, ModelSpec, Variant, VSRNet, layer_inventory


@dataclass
class ProfileReport:
    spec: ModelSpec
    params: int
    gmacs: float
    height: int
    width: int
    runtime_ms: float | None = None
    hardware: str = ""

    @property
    def input_frames(self) -> str:
        return "recurrent" if self.spec.variant is Variant.RRN else str(self.spec.num_frames)


def _inventory(model_or_spec):
    spec = model_or_spec if isinstance(model_or_spec, ModelSpec) else model_or_spec.spec
    return layer_inventory(spec)


def count_params(model_or_spec) -> int:
    """Sum of ``Cin*Cout*prod(kernel) + Cout`` over the layer inventory."""
    return sum(l.params for l in _inventory(model_or_spec))


def count_macs_int(model_or_spec, h: int, w: int) -> int:
    """Multiply-accumulates per output frame for an ``h x w`` LR input.

    All layers run at LR resolution; 3D layers count once per temporal slice.
    Biases, activations, additions and depth-to-space are not counted.
    """
    return sum(l.macs_per_pixel for l in _inventory(model_or_spec)) * h * w


def count_macs(model_or_spec, h: int, w: int) -> float:
    """GMAC (1e9 MACs) per output frame."""
    return count_macs_int(model_or_spec, h, w) / 1e9


def hardware_string(device: torch.device | None = None) -> str:
    device = device or torch.device("cpu")
    if device.type == "cuda":
        return f"cuda:{torch.cuda.get_device_name(device)}"
    cpu = platform.processor() or platform.machine()
    return f"cpu:{cpu} threads={torch.get_num_threads()} cores={os.cpu_count()} torch={torch.__version__}"


def _sync(device):
    if device.type == "cuda":
        torch.cuda.synchronize(device)


def benchmark_runtime(model: VSRNet, h: int, w: int, warmup: int = 2, iters: int = 10) -> tuple[float, str]:
    """Median wall-clock milliseconds per produced HR frame, and the hardware string.

    The recurrent model is timed one step at a time (one frame per step); CNNs
    one ``2T+1`` window per output frame.
    """
    if iters < 10:
        raise ValueError("iters must be >= 10")
    p = next(model.parameters())
    dev, dt = p.device, p.dtype
    model.eval()
    gen = torch.Generator().manual_seed(0)
    if model.spec.variant is Variant.RRN:
        prev = torch.rand(1, 3, h, w, generator=gen).to(dev, dt)
        cur = torch.rand(1, 3, h, w, generator=gen).to(dev, dt)
        state = HiddenState.zeros(model, 1, h, w, dtype=dt, device=dev)
        run = lambda: model.step(prev, cur, state)
    else:
        window = torch.rand(1, model.spec.num_frames, 3, h, w, generator=gen).to(dev, dt)
        run = lambda: model(window)
    times = []
    with torch.inference_mode():
        for i in range(warmup + iters):
            _sync(dev)
            t0 = time.perf_counter()
            run()
            _sync(dev)
            if i >= warmup:
                times.append((time.perf_counter() - t0) * 1e3)
    return statistics.median(times), hardware_string(dev)


def profile(spec: ModelSpec, h: int = 180, w: int = 320, bench: bool = False, warmup: int = 2,
            iters: int = 10, device: torch.device | None = None) -> ProfileReport:
    rep = ProfileReport(spec, count_params(spec), count_macs(spec, h, w), h, w)
    if bench:
        from .models import build_model
        model = build_model(spec).to(device or torch.device("cpu"))
        rep.runtime_ms, rep.hardware = benchmark_runtime(model, h, w, warmup, iters)
    return rep


def profile_table(reports: list[ProfileReport], tsv: bool = False) -> str:
    head = ["Method", "Blocks", "Input Frames", "# Param. [M]", "FLOPs [GMAC]", "Runtime [ms]"]
    names = {Variant.EARLY_2D: "2D CNN", Variant.SLOW_3D: "3D CNN", Variant.RRN: "RRN"}
    rows = []
    for r in reports:
        size = "S" if r.spec.blocks <= 5 else "L"
        rows.append([f"{names[r.spec.variant]} {size}", str(r.spec.blocks), r.input_frames,
                     f"{r.params / 1e6:.1f}" if not tsv else str(r.params),
                     f"{r.gmacs:.1f}",
                     "-" if r.runtime_ms is None else f"{r.runtime_ms:.0f}"])
    if tsv:
        return "\n".join("\t".join(x) for x in [head, *rows]) + "\n"
    widths = [max(len(x[i]) for x in [head, *rows]) for i in range(len(head))]
    fmt = lambda x: "  ".join(c.rjust(wd) if i else c.ljust(wd) for i, (c, wd) in enumerate(zip(x, widths)))
    out = [fmt(head), "  ".join("-" * wd for wd in widths), *map(fmt, rows)]
    hw = {r.hardware for r in reports if r.hardware}
    if hw:
        out.append("hardware: " + "; ".join(sorted(hw)))
    return "\n".join(out) + "\n"


def gradient_flow(model: VSRNet, batch) -> tuple[np.ndarray, float]:
    """Per-block first-conv gradient norms plus the norm of the output conv's bias gradient.

    The bias gradient of the residual-producing conv does not depend on depth,
    so it serves as the reference scale for judging vanishing.
    """
    from .training import batch_loss

    x, y = batch
    p = next(model.parameters())
    x, y = x.to(p.device, p.dtype), y.to(p.device, p.dtype)
    model.zero_grad(set_to_none=True)
    batch_loss(model, x, y).backward()
    norms = []
    for blk in model.blocks:
        g = blk.conv1.weight.grad
        n = float(g.norm()) if g is not None else 0.0
        norms.append(n if np.isfinite(n) else np.nan)
    ref = float(model.output_conv().bias.grad.norm())
    model.zero_grad(set_to_none=True)
    return np.asarray(norms), ref


def gradient_flow_probe(model: VSRNet, batch) -> np.ndarray:
    """L2 norm of the loss gradient w.r.t. each block's first conv weight, input to output.

    ``batch`` is ``(inputs, targets)`` as produced by
    :func:`tvsr.training.make_batch`. Non-finite norms are returned as NaN.
    """
    return gradient_flow(model, batch)[0]
