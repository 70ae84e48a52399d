"""Early-fusion 2D CNN, slow-fusion 3D CNN and the recurrent residual network.

All three share the same reconstruction: a ``3 r^2``-channel residual map at
LR resolution is rearranged by depth-to-space and added to the bicubic
enlargement of the reference frame.

Tensor layout is ``(B, C, h, w)`` for frames and ``(B, L, C, h, w)`` for clips.
The public ``forward_*`` helpers also accept numpy frames/sequences in the
``H x W x 3`` layout used by :mod:`tvsr.dataio` and return numpy results.
"""

from __future__ import annotations

import io
import zipfile
from dataclasses import asdict, dataclass, field, fields
from enum import Enum
from pathlib import Path
from typing import NamedTuple

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .dataio import bicubic_tensor

COLORS = 3


class Variant(str, Enum):
    EARLY_2D = "early2d"
    SLOW_3D = "slow3d"
    RRN = "rrn"

    @classmethod
    def parse(cls, value) -> "Variant":
        if isinstance(value, cls):
            return value
        key = str(value).strip().lower().replace("-", "").replace("_", "")
        aliases = {"early2d": cls.EARLY_2D, "2d": cls.EARLY_2D, "2dcnn": cls.EARLY_2D,
                   "slow3d": cls.SLOW_3D, "3d": cls.SLOW_3D, "3dcnn": cls.SLOW_3D,
                   "rrn": cls.RRN, "rnn": cls.RRN}
        if key not in aliases:
            raise ValueError(f"unsupported variant {value!r}")
        return aliases[key]


@dataclass(frozen=True)
class ModelSpec:
    variant: Variant
    blocks: int
    channels: int = 128
    scale: int = 4
    temporal_radius: int = 3
    residual_hidden: bool = True

    def __post_init__(self):
        object.__setattr__(self, "variant", Variant.parse(self.variant))
        if self.blocks < 1:
            raise ValueError(f"blocks must be >= 1, got {self.blocks}")
        if self.channels < 1 or self.scale < 1 or self.temporal_radius < 0:
            raise ValueError("channels and scale must be >= 1, temporal_radius >= 0")

    @property
    def num_frames(self) -> int:
        """Input frames consumed per output frame (2 for the recurrent step)."""
        if self.variant is Variant.RRN:
            return 2
        return 2 * self.temporal_radius + 1

    @property
    def residual_channels(self) -> int:
        return COLORS * self.scale**2

    def to_text(self) -> str:
        d = asdict(self)
        d["variant"] = self.variant.value
        return "".join(f"{k}={str(v).lower() if isinstance(v, bool) else v}\n" for k, v in d.items())

    @classmethod
    def from_text(cls, text: str) -> "ModelSpec":
        kv = dict(line.split("=", 1) for line in text.splitlines() if "=" in line)
        kw = {}
        for f in fields(cls):
            if f.name not in kv:
                continue
            v = kv[f.name].strip()
            if f.name == "variant":
                kw[f.name] = Variant.parse(v)
            elif f.name == "residual_hidden":
                kw[f.name] = v.lower() in ("1", "true", "yes")
            else:
                kw[f.name] = int(v)
        return cls(**kw)


class LayerInfo(NamedTuple):
    name: str
    kind: str  # "conv2d" | "conv3d"
    in_channels: int
    out_channels: int
    kernel: tuple[int, ...]
    temporal: int = 1  # output positions along time, multiplies the MAC count

    @property
    def params(self) -> int:
        return self.in_channels * self.out_channels * int(np.prod(self.kernel)) + self.out_channels

    @property
    def macs_per_pixel(self) -> int:
        return self.in_channels * self.out_channels * int(np.prod(self.kernel)) * self.temporal


def layer_inventory(spec: ModelSpec) -> list[LayerInfo]:
    """Analytic layer list for ``spec``; no tensors are allocated."""
    Fc, C, R = spec.channels, COLORS, spec.residual_channels
    inv: list[LayerInfo] = []
    if spec.variant is Variant.SLOW_3D:
        N = spec.num_frames
        k3 = (3, 3, 3)
        inv.append(LayerInfo("head", "conv3d", C, Fc, k3, N))
        for i in range(spec.blocks):
            inv.append(LayerInfo(f"blocks.{i}.conv1", "conv3d", Fc, Fc, k3, N))
            inv.append(LayerInfo(f"blocks.{i}.conv2", "conv3d", Fc, Fc, k3, N))
        inv.append(LayerInfo("fusion", "conv2d", Fc * N, R, (1, 1)))
        return inv

    k2 = (3, 3)
    if spec.variant is Variant.EARLY_2D:
        inv.append(LayerInfo("fusion", "conv2d", spec.num_frames * C, Fc, k2))
    else:
        inv.append(LayerInfo("fusion", "conv2d", 2 * C + R + Fc, Fc, k2))
    for i in range(spec.blocks):
        inv.append(LayerInfo(f"blocks.{i}.conv1", "conv2d", Fc, Fc, k2))
        inv.append(LayerInfo(f"blocks.{i}.conv2", "conv2d", Fc, Fc, k2))
    if spec.variant is Variant.EARLY_2D:
        inv.append(LayerInfo("tail", "conv2d", Fc, R, k2))
    else:
        inv.append(LayerInfo("head_h", "conv2d", Fc, Fc, k2))
        inv.append(LayerInfo("head_o", "conv2d", Fc, R, k2))
    return inv


# --- building blocks ------------------------------------------------------------

def depth_to_space(x: torch.Tensor, r: int) -> torch.Tensor:
    """``(..., C*r*r, h, w) -> (..., C, h*r, w*r)``.

    Channel ``c*r*r + dy*r + dx`` at ``(y, x)`` lands in channel ``c`` at
    ``(y*r + dy, x*r + dx)``.
    """
    *lead, ch, h, w = x.shape
    if ch % (r * r):
        raise ValueError(f"{ch} channels are not divisible by r^2={r * r}")
    c = ch // (r * r)
    x = x.reshape(-1, c, r, r, h, w).permute(0, 1, 4, 2, 5, 3)
    return x.reshape(*lead, c, h * r, w * r)


def space_to_depth(x: torch.Tensor, r: int) -> torch.Tensor:
    *lead, c, H, W = x.shape
    if H % r or W % r:
        raise ValueError(f"spatial size {H}x{W} is not divisible by {r}")
    h, w = H // r, W // r
    x = x.reshape(-1, c, h, r, w, r).permute(0, 1, 3, 5, 2, 4)
    return x.reshape(*lead, c * r * r, h, w)


class ResidualBlock(nn.Module):
    """conv -> ReLU -> conv, with an identity skip unless ``skip`` is False."""

    def __init__(self, channels: int, conv=nn.Conv2d, skip: bool = True):
        super().__init__()
        self.conv1 = conv(channels, channels, 3, padding=1)
        self.conv2 = conv(channels, channels, 3, padding=1)
        self.skip = skip

    def forward(self, x):
        r = self.conv2(F.relu(self.conv1(x)))
        return x + r if self.skip else r


@dataclass
class HiddenState:
    """Recurrent carry: features ``h`` (B, F, h, w) and residual output ``o`` (B, 3r^2, h, w)."""

    h: torch.Tensor
    o: torch.Tensor

    @classmethod
    def zeros(cls, model: "RRN", batch: int, height: int, width: int,
              dtype=torch.float32, device=None) -> "HiddenState":
        s = model.spec
        return cls(torch.zeros(batch, s.channels, height, width, dtype=dtype, device=device),
                   torch.zeros(batch, s.residual_channels, height, width, dtype=dtype, device=device))

    def detach(self) -> "HiddenState":
        return HiddenState(self.h.detach(), self.o.detach())

    def clone(self) -> "HiddenState":
        return HiddenState(self.h.clone(), self.o.clone())


@dataclass
class UnrollTrace:
    """Block activations of one recurrent step, ``x_0 .. x_K``."""

    activations: list[torch.Tensor] = field(default_factory=list)


class VSRNet(nn.Module):
    spec: ModelSpec

    def inventory(self) -> list[LayerInfo]:
        return layer_inventory(self.spec)

    def residual_convs(self) -> list[nn.Module]:
        """Last conv of every residual branch, ordered input to output."""
        return [b.conv2 for b in self.blocks]

    def output_conv(self) -> nn.Module:
        raise NotImplementedError

    def forward_video(self, clip: torch.Tensor) -> torch.Tensor:
        raise NotImplementedError


class Early2D(VSRNet):
    def __init__(self, spec: ModelSpec):
        super().__init__()
        self.spec = spec
        Fc = spec.channels
        self.fusion = nn.Conv2d(spec.num_frames * COLORS, Fc, 3, padding=1)
        self.blocks = nn.ModuleList(ResidualBlock(Fc) for _ in range(spec.blocks))
        self.tail = nn.Conv2d(Fc, spec.residual_channels, 3, padding=1)

    def output_conv(self):
        return self.tail

    def residual(self, window: torch.Tensor) -> torch.Tensor:
        b, n, c, h, w = window.shape
        x = self.fusion(window.reshape(b, n * c, h, w))
        for blk in self.blocks:
            x = blk(x)
        return self.tail(x)

    def forward(self, window: torch.Tensor) -> torch.Tensor:
        """``(B, N, 3, h, w)`` window -> ``(B, 3, h*r, w*r)`` centre-frame estimate."""
        _check_window(self, window)
        r = self.spec.scale
        centre = window[:, self.spec.temporal_radius]
        return depth_to_space(self.residual(window), r) + bicubic_tensor(centre, r)

    def forward_video(self, clip):
        return _sliding_video(self, clip)


class Slow3D(VSRNet):
    def __init__(self, spec: ModelSpec):
        super().__init__()
        self.spec = spec
        Fc = spec.channels
        # padding=1 along time appends one all-zero frame on each side, keeping N slices
        self.head = nn.Conv3d(COLORS, Fc, 3, padding=1)
        self.blocks = nn.ModuleList(ResidualBlock(Fc, conv=nn.Conv3d) for _ in range(spec.blocks))
        self.fusion = nn.Conv2d(Fc * spec.num_frames, spec.residual_channels, 1)

    def output_conv(self):
        return self.fusion

    def residual(self, window: torch.Tensor) -> torch.Tensor:
        x = self.head(window.transpose(1, 2))  # (B, C, N, h, w)
        for blk in self.blocks:
            x = blk(x)
        b, f, n, h, w = x.shape
        return self.fusion(x.reshape(b, f * n, h, w))

    def forward(self, window: torch.Tensor) -> torch.Tensor:
        _check_window(self, window)
        r = self.spec.scale
        centre = window[:, self.spec.temporal_radius]
        return depth_to_space(self.residual(window), r) + bicubic_tensor(centre, r)

    def forward_video(self, clip):
        return _sliding_video(self, clip)


class RRN(VSRNet):
    def __init__(self, spec: ModelSpec):
        super().__init__()
        self.spec = spec
        Fc, R = spec.channels, spec.residual_channels
        self.fusion = nn.Conv2d(2 * COLORS + R + Fc, Fc, 3, padding=1)
        self.blocks = nn.ModuleList(ResidualBlock(Fc, skip=spec.residual_hidden) for _ in range(spec.blocks))
        self.head_h = nn.Conv2d(Fc, Fc, 3, padding=1)
        self.head_o = nn.Conv2d(Fc, R, 3, padding=1)

    def output_conv(self):
        return self.head_o

    def step(self, prev: torch.Tensor, cur: torch.Tensor, state: HiddenState | None = None,
             trace: UnrollTrace | None = None) -> tuple[HiddenState, torch.Tensor]:
        if prev.shape != cur.shape or cur.dim() != 4 or cur.shape[1] != COLORS:
            raise ValueError(f"frames must share a (B, 3, h, w) shape, got {tuple(prev.shape)} and {tuple(cur.shape)}")
        b, _, h, w = cur.shape
        if state is None:
            state = HiddenState.zeros(self, b, h, w, dtype=cur.dtype, device=cur.device)
        if state.h.shape != (b, self.spec.channels, h, w) or state.o.shape != (b, self.spec.residual_channels, h, w):
            raise ValueError("hidden state does not match the model channels and frame size")
        x = F.relu(self.fusion(torch.cat([prev, cur, state.o, state.h], dim=1)))
        if trace is not None:
            trace.activations.append(x)
        for blk in self.blocks:
            x = blk(x)
            if trace is not None:
                trace.activations.append(x)
        h_t = F.relu(self.head_h(x))
        o_t = self.head_o(x)
        r = self.spec.scale
        sr = depth_to_space(o_t, r) + bicubic_tensor(cur, r)
        return HiddenState(h_t, o_t), sr

    def forward(self, clip: torch.Tensor, state: HiddenState | None = None) -> torch.Tensor:
        """Unroll over ``(B, L, 3, h, w)``; the first step sees its own frame as predecessor."""
        return self.forward_video(clip, state)

    def forward_video(self, clip, state=None):
        if clip.dim() != 5 or clip.shape[1] < 1:
            raise ValueError(f"expected a (B, L, 3, h, w) clip, got {tuple(clip.shape)}")
        outs = []
        for t in range(clip.shape[1]):
            prev = clip[:, max(t - 1, 0)]
            state, sr = self.step(prev, clip[:, t], state)
            outs.append(sr)
        return torch.stack(outs, dim=1)


def _check_window(model: VSRNet, window: torch.Tensor) -> None:
    n = model.spec.num_frames
    if window.dim() != 5 or window.shape[1] != n or window.shape[2] != COLORS:
        raise ValueError(f"expected a (B, {n}, 3, h, w) window, got {tuple(window.shape)}")


def window_indices(length: int, radius: int) -> np.ndarray:
    """``(length, 2*radius+1)`` frame indices with symmetric replication at the ends."""
    padded = np.pad(np.arange(length), radius, mode="symmetric")
    return np.stack([padded[t:t + 2 * radius + 1] for t in range(length)])


def _sliding_video(model: VSRNet, clip: torch.Tensor) -> torch.Tensor:
    if clip.dim() != 5 or clip.shape[1] < 1:
        raise ValueError(f"expected a (B, L, 3, h, w) clip, got {tuple(clip.shape)}")
    idx = window_indices(clip.shape[1], model.spec.temporal_radius)
    return torch.stack([model(clip[:, torch.from_numpy(row)]) for row in idx], dim=1)


_CLASSES = {Variant.EARLY_2D: Early2D, Variant.SLOW_3D: Slow3D, Variant.RRN: RRN}


def build_model(spec: ModelSpec, rng_seed: int = 0, dtype=torch.float32) -> VSRNet:
    """Instantiate ``spec`` with Kaiming fan-in normal weights and zero biases.

    The second conv of every residual branch is scaled by 0.1 after init.
    """
    if not isinstance(spec, ModelSpec):
        raise TypeError("spec must be a ModelSpec")
    cls = _CLASSES.get(spec.variant)
    if cls is None:
        raise ValueError(f"unsupported variant {spec.variant!r}")
    model = cls(spec).to(dtype)
    g = torch.Generator().manual_seed(int(rng_seed))
    with torch.no_grad():
        for m in model.modules():
            if isinstance(m, (nn.Conv2d, nn.Conv3d)):
                nn.init.kaiming_normal_(m.weight, mode="fan_in", nonlinearity="relu", generator=g)
                nn.init.zeros_(m.bias)
        for conv in model.residual_convs():
            conv.weight.mul_(0.1)
    _check_inventory(model)
    return model


def _check_inventory(model: VSRNet) -> None:
    realized = {n: m for n, m in model.named_modules() if isinstance(m, (nn.Conv2d, nn.Conv3d))}
    inv = model.inventory()
    if [l.name for l in inv] != list(realized):
        raise ValueError("layer inventory does not match the realized modules")
    for l in inv:
        w = realized[l.name].weight
        if tuple(w.shape) != (l.out_channels, l.in_channels, *l.kernel):
            raise ValueError(f"layer {l.name}: weight {tuple(w.shape)} disagrees with inventory")


def zero_output_(model: VSRNet) -> VSRNet:
    """Zero the residual-producing conv so the model reduces to bicubic upsampling."""
    conv = model.output_conv()
    with torch.no_grad():
        conv.weight.zero_()
        conv.bias.zero_()
    return model


# --- numpy-facing helpers ---------------------------------------------------------

def _to_tensor(x, model: nn.Module) -> torch.Tensor:
    p = next(model.parameters())
    if isinstance(x, torch.Tensor):
        return x.to(dtype=p.dtype, device=p.device)
    arr = np.asarray(x, dtype=np.float64)
    t = torch.from_numpy(np.ascontiguousarray(np.moveaxis(arr, -1, -3)))
    return t.to(dtype=p.dtype, device=p.device)


def _to_numpy(t: torch.Tensor) -> np.ndarray:
    return np.moveaxis(t.detach().cpu().double().numpy(), -3, -1)


def _forward_window(model: VSRNet, window, variant: Variant):
    if model.spec.variant is not variant:
        raise ValueError(f"model variant {model.spec.variant.value} is not {variant.value}")
    numpy_in = not isinstance(window, torch.Tensor)
    x = _to_tensor(window, model)
    if numpy_in:
        if x.dim() != 4:
            raise ValueError("expected an N x h x w x 3 window")
        x = x[None]
    with torch.no_grad():
        y = model(x)
    return _to_numpy(y[0]) if numpy_in else y


def forward_early2d(model: VSRNet, window):
    return _forward_window(model, window, Variant.EARLY_2D)


def forward_slow3d(model: VSRNet, window):
    return _forward_window(model, window, Variant.SLOW_3D)


def rrn_step(model: RRN, prev, cur, state: HiddenState | None = None,
             trace: UnrollTrace | None = None):
    """One recurrent step. Numpy frames in -> numpy ``sr`` out; the state stays in torch."""
    if model.spec.variant is not Variant.RRN:
        raise ValueError("rrn_step needs an RRN model")
    numpy_in = not isinstance(cur, torch.Tensor)
    p, c = _to_tensor(prev, model), _to_tensor(cur, model)
    if numpy_in:
        p, c = p[None], c[None]
    with torch.no_grad():
        state, sr = model.step(p, c, state, trace)
    return state, (_to_numpy(sr[0]) if numpy_in else sr)


def forward_video(model: VSRNet, seq):
    """Super-resolve a whole sequence; output length equals input length."""
    numpy_in = not isinstance(seq, torch.Tensor)
    x = _to_tensor(seq, model)
    if numpy_in:
        if x.dim() != 4 or x.shape[0] < 1:
            raise ValueError("expected a non-empty L x h x w x 3 sequence")
        x = x[None]
    if x.shape[1] < 1:
        raise ValueError("empty sequence")
    with torch.no_grad():
        y = model.forward_video(x)
    return _to_numpy(y[0]) if numpy_in else y


# --- checkpoints ----------------------------------------------------------------------

def save_checkpoint(path, model: VSRNet, step: int = 0, extras: dict[str, bytes] | None = None) -> None:
    """Zip archive: ``spec.txt``, ``state.txt``, ``params/<name>.npy`` plus optional extras."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with zipfile.ZipFile(tmp, "w", zipfile.ZIP_DEFLATED) as zf:
        zf.writestr("spec.txt", model.spec.to_text())
        zf.writestr("state.txt", f"step={int(step)}\n")
        for name, p in model.state_dict().items():
            zf.writestr(f"params/{name}.npy", _npy_bytes(p.detach().cpu().numpy()))
        for name, data in (extras or {}).items():
            zf.writestr(name, data)
    tmp.replace(path)


def load_checkpoint(path, dtype=torch.float32) -> tuple[VSRNet, int, dict[str, bytes]]:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"{path}: checkpoint not found")
    with zipfile.ZipFile(path) as zf:
        spec = ModelSpec.from_text(zf.read("spec.txt").decode())
        step = int(dict(l.split("=", 1) for l in zf.read("state.txt").decode().split())["step"])
        params = {n[len("params/"):-len(".npy")]: np.load(io.BytesIO(zf.read(n)))
                  for n in zf.namelist() if n.startswith("params/")}
        extras = {n: zf.read(n) for n in zf.namelist()
                  if not n.startswith("params/") and n not in ("spec.txt", "state.txt")}
    model = _CLASSES[spec.variant](spec).to(dtype)
    expected = model.state_dict()
    if set(params) != set(expected):
        missing, unexpected = set(expected) - set(params), set(params) - set(expected)
        raise ValueError(f"{path}: parameters disagree with spec (missing {sorted(missing)}, "
                         f"unexpected {sorted(unexpected)})")
    for name, t in expected.items():
        if tuple(params[name].shape) != tuple(t.shape):
            raise ValueError(f"{path}: {name} has shape {params[name].shape}, spec needs {tuple(t.shape)}")
    model.load_state_dict({n: torch.from_numpy(a).to(dtype) for n, a in params.items()})
    return model, step, extras


def _npy_bytes(arr: np.ndarray) -> bytes:
    buf = io.BytesIO()
    np.save(buf, arr, allow_pickle=False)
    return buf.getvalue()

