"""L1 supervision, Adam with per-variant step schedules, and the hidden-state ablation."""

from __future__ import annotations

import io
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Sequence as Seq

import numpy as np
import torch

from .dataio import DatasetManifest, DegradationSpec, degrade_sequence, sample_patch
from .models import (ModelSpec, Variant, VSRNet, build_model, load_checkpoint,
                     save_checkpoint, _npy_bytes)

log = logging.getLogger(__name__)

# (base_lr, decay_points, total_epochs, batch_size) per variant
DEFAULT_SCHEDULES = {
    Variant.EARLY_2D: (1e-4, (10,), 30, 64),
    Variant.SLOW_3D: (1e-3, (10,), 30, 64),
    Variant.RRN: (1e-4, (60,), 70, 4),
}


class DivergenceError(RuntimeError):
    """Raised when the training loss becomes NaN or infinite."""


@dataclass
class TrainSpec:
    schedule: str = "rrn"
    base_lr: float = 1e-4
    decay_points: tuple[int, ...] = (60,)
    decay_factor: float = 0.1
    total_epochs: int = 70
    batch_size: int = 4
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 5e-4
    clip_len: int = 7
    patch_lr: int = 64
    seed: int = 0
    steps_per_epoch: int = 0  # 0: ceil(num_clips / batch_size)
    max_steps: int = 0  # 0: run all epochs
    checkpoint_every: int = 0  # in steps; 0 disables periodic checkpoints
    val_clips: int = 4
    deterministic: bool = True

    def __post_init__(self):
        self.decay_points = tuple(int(p) for p in self.decay_points)
        if any(b <= a for a, b in zip(self.decay_points, self.decay_points[1:])):
            raise ValueError(f"decay_points must be strictly increasing: {self.decay_points}")
        if self.decay_points and self.decay_points[-1] >= self.total_epochs:
            raise ValueError("decay_points must lie below total_epochs")
        if self.batch_size < 1 or self.clip_len < 1 or self.total_epochs < 1:
            raise ValueError("batch_size, clip_len and total_epochs must be positive")

    @classmethod
    def for_variant(cls, variant, **overrides) -> "TrainSpec":
        v = Variant.parse(variant)
        lr, points, epochs, batch = DEFAULT_SCHEDULES[v]
        base = cls(schedule=v.value, base_lr=lr, decay_points=points, total_epochs=epochs, batch_size=batch)
        return replace(base, **overrides)

    def lr_at(self, epoch: int) -> float:
        if not 0 <= epoch < self.total_epochs:
            raise ValueError(f"epoch {epoch} outside [0, {self.total_epochs})")
        n = sum(1 for p in self.decay_points if epoch >= p)
        return self.base_lr * self.decay_factor**n

    def to_dict(self) -> dict[str, str]:
        out = {}
        for k, v in asdict(self).items():
            if isinstance(v, (tuple, list)):
                v = ",".join(str(x) for x in v)
            elif isinstance(v, bool):
                v = str(v).lower()
            out[k] = str(v)
        return out

    @classmethod
    def from_dict(cls, d: dict[str, str]) -> "TrainSpec":
        kw = {}
        for f in fields(cls):
            if f.name not in d:
                continue
            v = str(d[f.name]).strip()
            default = f.default
            if f.name == "decay_points":
                kw[f.name] = tuple(int(x) for x in v.split(",") if x.strip())
            elif isinstance(default, bool):
                kw[f.name] = v.lower() in ("1", "true", "yes")
            elif isinstance(default, int):
                kw[f.name] = int(v)
            elif isinstance(default, float):
                kw[f.name] = float(v)
            else:
                kw[f.name] = v
        return cls(**kw)


def lr_schedule(variant, epoch: int) -> float:
    """Learning rate of the reference recipe for ``variant`` at ``epoch`` (0-based)."""
    return TrainSpec.for_variant(variant).lr_at(epoch)


def l1_loss(pred, target):
    """Mean absolute error over every element; tensors keep the graph, arrays give a float."""
    if tuple(pred.shape) != tuple(target.shape):
        raise ValueError(f"shape mismatch: {tuple(pred.shape)} vs {tuple(target.shape)}")
    if isinstance(pred, torch.Tensor):
        return (pred - target).abs().mean()
    return float(np.mean(np.abs(np.asarray(pred, dtype=np.float64) - np.asarray(target, dtype=np.float64))))


@dataclass
class TrainState:
    epoch: int = 0
    global_step: int = 0
    best_psnr: float = -math.inf
    rng: np.random.Generator = field(default_factory=np.random.default_rng)


@dataclass
class TrainResult:
    model: VSRNet
    state: TrainState
    losses: list[float]
    records: list[tuple[int, int, float, float]]  # (step, epoch, loss, lr)
    val_psnr: list[tuple[int, float]]


def set_deterministic(on: bool = True) -> None:
    torch.use_deterministic_algorithms(on)


# --- batches -------------------------------------------------------------------------

def _clip_source(data, split: str = "train"):
    if isinstance(data, DatasetManifest):
        entries = data.split(split) or data.entries
        return [lambda e=e: data.load(e) for e in entries], data.degradation
    return [lambda s=s: np.asarray(s, dtype=np.float64) for s in data], None


def make_batch(model: VSRNet, clips, spec: TrainSpec, degradation: DegradationSpec,
               rng: np.random.Generator):
    """Sample ``batch_size`` aligned LR/HR crops.

    Returns ``(inputs, targets)``: for the recurrent model both are full clips
    ``(B, L, 3, ., .)``; for CNNs the input is a ``2T+1`` window and the target
    its centre HR frame ``(B, 3, H, W)``.
    """
    n = model.spec.num_frames if model.spec.variant is not Variant.RRN else spec.clip_len
    lrs, hrs = [], []
    for _ in range(spec.batch_size):
        seq = clips[int(rng.integers(len(clips)))]()
        if len(seq) < n:
            raise ValueError(f"clip of {len(seq)} frames is shorter than the required {n}")
        t0 = int(rng.integers(len(seq) - n + 1))
        sample = sample_patch(seq[t0:t0 + n], degradation, spec.patch_lr, rng)
        lrs.append(sample.lr_clip)
        hrs.append(sample.hr_clip if model.spec.variant is Variant.RRN else sample.hr_clip[sample.center_index])
    p = next(model.parameters())
    x = torch.from_numpy(np.moveaxis(np.stack(lrs), -1, -3).copy()).to(p.dtype)
    y = torch.from_numpy(np.moveaxis(np.stack(hrs), -1, -3).copy()).to(p.dtype)
    return x.to(p.device), y.to(p.device)


def batch_loss(model: VSRNet, inputs: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    """Training loss; for the recurrent model the mean L1 over every unrolled step."""
    return l1_loss(model(inputs), targets)


def _grad_norms(model) -> dict[str, float]:
    return {n: float(p.grad.norm()) for n, p in model.named_parameters() if p.grad is not None}


# --- checkpoints with optimizer state ------------------------------------------------------

def save_train_checkpoint(path, model, optimizer, state: TrainState) -> None:
    extras = {"train_state.json": json.dumps({
        "epoch": state.epoch, "global_step": state.global_step, "best_psnr": state.best_psnr,
        "rng": state.rng.bit_generator.state}).encode()}
    names = {id(p): n for n, p in model.named_parameters()}
    for group in optimizer.param_groups:
        for p in group["params"]:
            st = optimizer.state.get(p)
            if not st:
                continue
            n = names[id(p)]
            extras[f"optim/{n}.exp_avg.npy"] = _npy_bytes(st["exp_avg"].cpu().numpy())
            extras[f"optim/{n}.exp_avg_sq.npy"] = _npy_bytes(st["exp_avg_sq"].cpu().numpy())
            extras[f"optim/{n}.step.npy"] = _npy_bytes(np.asarray(float(st["step"])))
    save_checkpoint(path, model, state.global_step, extras)


def load_train_checkpoint(path, spec: TrainSpec):
    model, step, extras = load_checkpoint(path)
    optimizer = make_optimizer(model, spec)
    meta = json.loads(extras["train_state.json"]) if "train_state.json" in extras else {}
    rng = np.random.default_rng()
    if "rng" in meta:
        rng.bit_generator.state = meta["rng"]
    state = TrainState(meta.get("epoch", 0), step, meta.get("best_psnr", -math.inf), rng)
    for n, p in model.named_parameters():
        key = f"optim/{n}"
        if f"{key}.exp_avg.npy" not in extras:
            continue
        load = lambda s: torch.from_numpy(np.load(io.BytesIO(extras[f"{key}.{s}.npy"])))
        optimizer.state[p] = {"step": load("step").to(torch.float32),
                              "exp_avg": load("exp_avg").to(p.dtype),
                              "exp_avg_sq": load("exp_avg_sq").to(p.dtype)}
    return model, optimizer, state


def make_optimizer(model, spec: TrainSpec) -> torch.optim.Adam:
    # weight_decay here is the coupled (L2 added to the gradient) form
    return torch.optim.Adam(model.parameters(), lr=spec.base_lr, betas=(spec.beta1, spec.beta2),
                            weight_decay=spec.weight_decay)


# --- training loop --------------------------------------------------------------------------

def validate(model: VSRNet, val_seqs, degradation: DegradationSpec, border: int = 8) -> float:
    from .metrics import psnr, rgb_to_y
    from .models import forward_video

    scores = []
    model.eval()
    for seq in val_seqs:
        out = np.clip(forward_video(model, degrade_sequence(seq, degradation)), 0, 1)
        b = min(border, out.shape[1] // 4, out.shape[2] // 4)
        scores += [psnr(rgb_to_y(o), rgb_to_y(g), b) for o, g in zip(out, seq)]
    model.train()
    return float(np.mean(scores))


def train(model: VSRNet, data, spec: TrainSpec, out_dir=None, val_data=None,
          degradation: DegradationSpec | None = None, resume=None) -> TrainResult:
    """Fit ``model`` on ``data`` (a :class:`DatasetManifest` or a list of HR sequences).

    With ``out_dir`` a metrics log ``train.log`` (``step<TAB>epoch<TAB>loss<TAB>lr``),
    ``val.tsv`` and checkpoints are written there. ``resume`` names a checkpoint
    written by this function; training continues from its step with identical
    optimizer moments and sampling RNG.
    """
    set_deterministic(spec.deterministic)
    clips, manifest_deg = _clip_source(data)
    if not clips:
        raise ValueError("no training clips")
    degradation = degradation or manifest_deg or DegradationSpec(scale=model.spec.scale)
    if degradation.scale != model.spec.scale:
        raise ValueError(f"degradation scale {degradation.scale} != model scale {model.spec.scale}")

    if resume is not None:
        model, optimizer, state = load_train_checkpoint(resume, spec)
    else:
        optimizer = make_optimizer(model, spec)
        state = TrainState(rng=np.random.default_rng(spec.seed))

    if val_data is None and isinstance(data, DatasetManifest):
        val_entries = data.split("val")[: spec.val_clips]
        val_data = [data.load(e) for e in val_entries]
    val_data = list(val_data or [])[: spec.val_clips]

    steps_per_epoch = spec.steps_per_epoch or math.ceil(len(clips) / spec.batch_size)
    total = spec.total_epochs * steps_per_epoch
    if spec.max_steps:
        total = min(total, spec.max_steps)

    out = Path(out_dir) if out_dir is not None else None
    logf = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        logf = open(out / "train.log", "a")
        if state.global_step == 0:
            logf.write(f"# variant={model.spec.variant.value} blocks={model.spec.blocks} "
                       f"channels={model.spec.channels} scale={model.spec.scale}\n")
            logf.write(f"# batch_size={spec.batch_size} clip_len={spec.clip_len} "
                       f"lr_patch={spec.patch_lr}x{spec.patch_lr} "
                       f"hr_patch={spec.patch_lr * degradation.scale}x{spec.patch_lr * degradation.scale}\n")
            logf.write("# step\tepoch\tloss\tlr\n")

    losses, records, val_hist = [], [], []
    model.train()
    try:
        while state.global_step < total:
            epoch = state.global_step // steps_per_epoch
            lr = spec.lr_at(min(epoch, spec.total_epochs - 1))
            for g in optimizer.param_groups:
                g["lr"] = lr
            x, y = make_batch(model, clips, spec, degradation, state.rng)
            optimizer.zero_grad(set_to_none=True)
            loss = batch_loss(model, x, y)
            loss.backward()
            value = float(loss.detach())
            if not math.isfinite(value):
                norms = _grad_norms(model)
                worst = sorted(norms.items(), key=lambda kv: -kv[1] if math.isfinite(kv[1]) else -math.inf)[:5]
                raise DivergenceError(f"non-finite loss {value} at step {state.global_step} "
                                      f"(epoch {epoch}); gradient norms: {worst}")
            optimizer.step()
            state.global_step += 1
            state.epoch = epoch
            losses.append(value)
            records.append((state.global_step, epoch, value, lr))
            if logf:
                logf.write(f"{state.global_step}\t{epoch}\t{value:.8g}\t{lr:.8g}\n")
                logf.flush()

            epoch_done = state.global_step % steps_per_epoch == 0 or state.global_step == total
            if epoch_done and val_data:
                score = validate(model, val_data, degradation)
                val_hist.append((epoch, score))
                if out is not None:
                    with open(out / "val.tsv", "a") as vf:
                        vf.write(f"{epoch}\t{score:.6f}\n")
                if score > state.best_psnr:
                    state.best_psnr = score
                    if out is not None:
                        save_train_checkpoint(out / "best.ckpt", model, optimizer, state)
            if out is not None and spec.checkpoint_every and state.global_step % spec.checkpoint_every == 0:
                save_train_checkpoint(out / f"step{state.global_step:08d}.ckpt", model, optimizer, state)
        if out is not None:
            save_train_checkpoint(out / "last.ckpt", model, optimizer, state)
    finally:
        if logf:
            logf.close()
    return TrainResult(model, state, losses, records, val_hist)


# --- residual ablation ----------------------------------------------------------------------

@dataclass
class AblationConfig:
    channels: int = 8
    scale: int = 2
    steps: int = 100
    lr: float = 1e-3
    batch_size: int = 2
    clip_len: int = 5
    patch_lr: int = 12
    num_clips: int = 6
    seed: int = 0
    # first-block gradient below this fraction of the output-bias gradient counts as vanishing
    vanish_ratio: float = 1e-3


@dataclass
class AblationRow:
    blocks: int
    residual: bool
    initial_loss: float
    final_loss: float
    val_psnr: float
    grad_first: float
    grad_last: float
    grad_output: float
    diverged: bool
    vanished: bool
    losses: list[float] = field(repr=False, default_factory=list)

    @property
    def failed(self) -> bool:
        return self.diverged or self.vanished

    @property
    def grad_ratio(self) -> float:
        """First-block gradient relative to the output conv's bias gradient."""
        return self.grad_first / self.grad_output if self.grad_output > 0 else math.nan


@dataclass
class AblationReport:
    rows: list[AblationRow]

    def row(self, blocks: int, residual: bool) -> AblationRow:
        return next(r for r in self.rows if r.blocks == blocks and r.residual == residual)

    def table(self) -> str:
        """Table-2 layout: one column per block count, failed runs shown as ``∗``."""
        ks = sorted({r.blocks for r in self.rows})
        lines = ["Blocks\t" + "\t".join(str(k) for k in ks)]
        for residual, label in ((False, "RRN w/o residual"), (True, "RRN w/ residual")):
            cells = []
            for k in ks:
                try:
                    r = self.row(k, residual)
                except StopIteration:
                    cells.append("-")
                    continue
                cells.append("∗" if r.failed else f"{r.val_psnr:.2f}")
            lines.append(label + "\t" + "\t".join(cells))
        return "\n".join(lines)

    def tsv(self) -> str:
        head = "blocks\tresidual\tinitial_loss\tfinal_loss\tval_psnr_y\tgrad_first\tgrad_last\tgrad_output\tgrad_ratio\tdiverged\tvanished"
        body = [f"{r.blocks}\t{str(r.residual).lower()}\t{r.initial_loss:.6g}\t{r.final_loss:.6g}\t"
                f"{r.val_psnr:.4f}\t{r.grad_first:.6g}\t{r.grad_last:.6g}\t{r.grad_output:.6g}\t{r.grad_ratio:.6g}\t"
                f"{str(r.diverged).lower()}\t{str(r.vanished).lower()}" for r in self.rows]
        return "\n".join([head, *body]) + "\n"


def ablate_hidden_residual(k_list: Seq[int] = range(2, 11), config: AblationConfig = AblationConfig(),
                           progress=None) -> AblationReport:
    """Train RRN briefly with and without the hidden-state skip for every block count."""
    from .dataio import synthetic_sequence
    from .profiling import gradient_flow

    rng = np.random.default_rng(config.seed)
    hr_size = config.patch_lr * config.scale * 2
    clips = [synthetic_sequence(rng, config.clip_len, hr_size, hr_size) for _ in range(config.num_clips)]
    val = [synthetic_sequence(rng, config.clip_len, hr_size, hr_size)]
    deg = DegradationSpec(scale=config.scale)
    tspec = TrainSpec(schedule="rrn", base_lr=config.lr, decay_points=(), total_epochs=1,
                      batch_size=config.batch_size, clip_len=config.clip_len, patch_lr=config.patch_lr,
                      seed=config.seed, steps_per_epoch=config.steps, val_clips=0)
    probe_rng = np.random.default_rng(config.seed + 1)
    probe_model = build_model(ModelSpec(Variant.RRN, 1, config.channels, config.scale), config.seed)
    probe_batch = make_batch(probe_model, [lambda c=c: c for c in clips], tspec, deg, probe_rng)

    rows = []
    for k in k_list:
        for residual in (False, True):
            mspec = ModelSpec(Variant.RRN, k, config.channels, config.scale, residual_hidden=residual)
            model = build_model(mspec, config.seed)
            norms, ref = gradient_flow(model, probe_batch)
            diverged = False
            losses: list[float] = []
            try:
                res = train(model, clips, tspec, degradation=deg)
                losses = res.losses
            except DivergenceError as e:
                log.warning("K=%d residual=%s diverged: %s", k, residual, e)
                diverged = True
            first, last = float(norms[0]), float(norms[-1])
            vanished = (not np.all(np.isfinite(norms))) or not ref > 0 or first / ref < config.vanish_ratio
            score = math.nan if diverged else validate(model, val, deg, border=2)
            row = AblationRow(k, residual, losses[0] if losses else math.nan,
                              losses[-1] if losses else math.nan, score, first, last, ref,
                              diverged or not math.isfinite(score), vanished, losses)
            rows.append(row)
            if progress:
                progress(row)
    return AblationReport(rows)
