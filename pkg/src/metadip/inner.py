"""DIP fitting loop.

One routine drives both the plain fit and the differentiable (unrolled)
fit used for meta-training, so both produce the same iterates.
"""
from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from .errors import DimensionError, NonFiniteError, UnsupportedOperationError
from .imaging import EmaAccumulator, check_image, nmse, psnr, total_variation
from .networks import LatentInput, ParameterSet

TV_WEIGHT_PER_PIXEL = 1e-6


@dataclass(frozen=True)
class InnerLoopConfig:
    """Settings for one DIP fit.

    ``lr`` is a scalar, a length-``steps`` sequence, or a ``steps x groups``
    array. Learned log learning rates passed to :func:`fit` take precedence;
    if they cover fewer steps than requested the last row is repeated
    (``lr_extension="repeat"``) or ``lr`` is used (``"fixed"``).
    """

    steps: int = 50
    lr: float | tuple = 1e-3
    momentum: float = 0.9
    tv_weight: float | None = None  # None: TV_WEIGHT_PER_PIXEL * H * W
    jitter_std: float = 0.0
    ema_decay: float = 0.99
    use_ema: bool = False
    optimizer: str = "sgd"
    adam_betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    track_metrics: bool = True
    seed: int = 0
    unroll_cap: int = 20
    lr_extension: str = "repeat"

    def __post_init__(self):
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")
        if self.tv_weight is not None and self.tv_weight < 0:
            raise ValueError("tv_weight must be nonnegative")
        if self.jitter_std < 0:
            raise ValueError("jitter_std must be nonnegative")
        if not 0.0 <= self.ema_decay < 1.0:
            raise ValueError("ema_decay must lie in [0, 1)")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"optimizer must be 'sgd' or 'adam', got {self.optimizer!r}")
        if self.lr_extension not in ("repeat", "fixed"):
            raise ValueError("lr_extension must be 'repeat' or 'fixed'")
        lr = np.asarray(self.lr, dtype=np.float64)
        if lr.ndim > 2 or not np.all(lr > 0) or not np.all(np.isfinite(lr)):
            raise ValueError("learning rates must be finite and positive")
        if lr.ndim >= 1 and lr.shape[0] != self.steps:
            raise ValueError(f"per-step learning rates cover {lr.shape[0]} steps, config has {self.steps}")
        if isinstance(self.lr, (list, np.ndarray)):
            object.__setattr__(self, "lr", tuple(np.asarray(self.lr).tolist()))

    def with_steps(self, steps: int) -> "InnerLoopConfig":
        lr = self.lr
        if np.ndim(lr) >= 1:
            arr = np.asarray(lr)
            idx = np.minimum(np.arange(steps), arr.shape[0] - 1)
            lr = tuple(arr[idx].tolist()) if steps else 1e-3
        return replace(self, steps=steps, lr=lr)


def vanilla_dip_config(steps: int = 1000, **overrides) -> InnerLoopConfig:
    """Random-init DIP preset: Adam at 3e-4, latent jitter 1/30, EMA output."""
    kw = dict(steps=steps, lr=3e-4, optimizer="adam", momentum=0.0, jitter_std=1.0 / 30.0, use_ema=True, ema_decay=0.99)
    kw.update(overrides)
    return InnerLoopConfig(**kw)


@dataclass
class FitResult:
    reconstruction: np.ndarray
    raw_final: np.ndarray
    loss_trace: list[float]
    psnr_trace: list[float] = field(default_factory=list)
    nmse_trace: list[float] = field(default_factory=list)
    cumulative_seconds: list[float] = field(default_factory=list)
    params: ParameterSet | None = field(default=None, repr=False)

    @property
    def steps(self) -> int:
        return len(self.loss_trace) - 1

    @property
    def wall_time_per_step(self) -> float:
        return self.cumulative_seconds[-1] / max(self.steps, 1) if self.cumulative_seconds else 0.0

    def to_csv(self, path, header: dict | None = None) -> None:
        """Write ``step,loss,psnr,nmse`` rows; ``header`` items become ``# key=value`` lines."""
        with open(path, "w", newline="") as fh:
            for k, v in (header or {}).items():
                fh.write(f"# {k}={v}\n")
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["step", "loss", "psnr", "nmse"])
            for t, loss in enumerate(self.loss_trace):
                p = self.psnr_trace[t] if t < len(self.psnr_trace) else ""
                e = self.nmse_trace[t] if t < len(self.nmse_trace) else ""
                writer.writerow([t, repr(loss), repr(p) if p != "" else "", repr(e) if e != "" else ""])

    def timing_to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["step", "cumulative_seconds"])
            for t, s in enumerate(self.cumulative_seconds):
                writer.writerow([t, f"{s:.6f}"])


def resolve_tv_weight(config: InnerLoopConfig, latent: LatentInput) -> float:
    if config.tv_weight is not None:
        return float(config.tv_weight)
    return TV_WEIGHT_PER_PIXEL * latent.height * latent.width


def step_learning_rates(config: InnerLoopConfig, n_groups: int, log_lrs: torch.Tensor | None = None, dtype=torch.float64) -> torch.Tensor:
    """``steps x groups`` learning-rate table (differentiable in ``log_lrs``)."""
    steps = config.steps
    if log_lrs is not None:
        if log_lrs.ndim != 2 or log_lrs.shape[1] != n_groups:
            raise DimensionError(f"log learning rates must be T x {n_groups}, got {tuple(log_lrs.shape)}")
        lrs = torch.exp(log_lrs.to(dtype))
        t_learned = lrs.shape[0]
        if steps <= t_learned:
            return lrs[:steps]
        if config.lr_extension == "repeat":
            extra = lrs[-1:].expand(steps - t_learned, n_groups)
        else:
            extra = torch.full((steps - t_learned, n_groups), float(np.ravel(config.lr)[-1]), dtype=dtype)
        return torch.cat([lrs, extra], dim=0)
    lr = np.asarray(config.lr, dtype=np.float64)
    if lr.ndim == 0:
        table = np.full((steps, n_groups), float(lr))
    elif lr.ndim == 1:
        table = np.repeat(lr[:, None], n_groups, axis=1)
    else:
        if lr.shape[1] != n_groups:
            raise DimensionError(f"learning-rate table has {lr.shape[1]} groups, network has {n_groups}")
        table = lr
    return torch.as_tensor(table, dtype=dtype)


def inner_loss(net, params: ParameterSet, latent: LatentInput, op, y, tv_weight: float, jitter=None, return_output=False):
    """Data fidelity of the network output plus ``tv_weight * TV(output)``."""
    out = net(params, latent, jitter)
    y_values = y.values if hasattr(y, "values") else y
    target = torch.as_tensor(np.asarray(y_values), dtype=out.dtype)
    pred = op.forward_torch(out.reshape(-1))
    if pred.shape != target.shape:
        raise DimensionError(f"measurement length {target.numel()} != m = {op.m}")
    loss = ((pred - target) ** 2).sum()
    if tv_weight:
        loss = loss + tv_weight * total_variation(out)
    return (loss, out) if return_output else loss


def _unroll(net, params0, latent, op, y, config, lrs, *, differentiable, first_order=False, on_step=None):
    names = params0.names
    gidx = params0.group_index()
    params = list(params0.values())
    if not differentiable:
        params = [p.detach().clone().requires_grad_(True) for p in params]
    tv_w = resolve_tv_weight(config, latent)
    y_values = y.values if hasattr(y, "values") else y
    target = torch.as_tensor(np.asarray(y_values), dtype=params0.dtype)
    gen = torch.Generator().manual_seed(int(config.seed))
    z_shape = latent.z.shape
    state = [torch.zeros_like(p) for p in params]
    second = [torch.zeros_like(p) for p in params] if config.optimizer == "adam" else None
    b1, b2 = config.adam_betas
    steps = config.steps
    loss = None
    for t in range(steps + 1):
        jitter = None
        if config.jitter_std > 0 and t < steps and z_shape[0] > 0:
            jitter = (torch.randn(z_shape, generator=gen, dtype=torch.float64) * config.jitter_std).to(params0.dtype)
        out = net(ParameterSet(zip(names, params)), latent, jitter)
        pred = op.forward_torch(out.reshape(-1))
        if pred.shape != target.shape:
            raise DimensionError(f"measurement length {target.numel()} != m = {op.m}")
        loss = ((pred - target) ** 2).sum()
        if tv_w:
            loss = loss + tv_w * total_variation(out)
        if not torch.isfinite(loss):
            raise NonFiniteError(f"inner loss became non-finite at step {t}")
        if on_step is not None:
            on_step(t, loss, out)
        if t == steps:
            break
        grads = torch.autograd.grad(loss, params, create_graph=differentiable and not first_order)
        lr_row = lrs[t]
        new_params = []
        for k, (p, g) in enumerate(zip(params, grads)):
            lr = lr_row[gidx[k]].to(p.dtype)
            if config.optimizer == "sgd":
                state[k] = config.momentum * state[k] + g
                upd = state[k]
            else:
                state[k] = b1 * state[k] + (1 - b1) * g
                second[k] = b2 * second[k] + (1 - b2) * g * g
                mhat = state[k] / (1 - b1 ** (t + 1))
                vhat = second[k] / (1 - b2 ** (t + 1))
                upd = mhat / (torch.sqrt(vhat) + config.adam_eps)
            p_new = p - lr * upd
            if not differentiable:
                p_new = p_new.detach().requires_grad_(True)
                state[k] = state[k].detach()
                if second is not None:
                    second[k] = second[k].detach()
            new_params.append(p_new)
        params = new_params
    return ParameterSet(zip(names, params)), loss


def fit(net, params0: ParameterSet, latent: LatentInput, op, y, config: InnerLoopConfig, ground_truth=None, log_lrs=None) -> FitResult:
    """Fit the network weights to a measurement; return traces and outputs."""
    lrs = step_learning_rates(config, len(params0.groups), log_lrs, dtype=params0.dtype)
    truth = check_image(ground_truth, name="ground truth") if ground_truth is not None else None
    ema = EmaAccumulator(config.ema_decay)
    losses, psnrs, nmses, seconds = [], [], [], []
    last = {}
    start = time.perf_counter()

    def on_step(t, loss, out):
        img = np.clip(out.detach().to(torch.float64).numpy(), 0.0, 1.0)
        losses.append(float(loss.detach()))
        if config.use_ema:
            ema.update(img)
        if truth is not None and config.track_metrics:
            if img.shape != truth.shape:
                raise DimensionError(f"ground truth shape {truth.shape} != output shape {img.shape}")
            psnrs.append(psnr(truth, img))
            nmses.append(nmse(truth, img))
        last["img"] = img
        seconds.append(time.perf_counter() - start)

    params, _ = _unroll(net, params0, latent, op, y, config, lrs, differentiable=False, on_step=on_step)
    raw = last["img"]
    recon = ema.average if config.use_ema else raw
    return FitResult(
        reconstruction=np.asarray(recon),
        raw_final=raw,
        loss_trace=losses,
        psnr_trace=psnrs,
        nmse_trace=nmses,
        cumulative_seconds=seconds,
        params=params.detach(),
    )


def fit_differentiable(net, params0: ParameterSet, latent: LatentInput, op, y, config: InnerLoopConfig, log_lrs=None, first_order=False):
    """Unrolled fit whose final loss is differentiable in ``params0`` and ``log_lrs``.

    Returns ``(adapted_params, final_loss)``. With ``first_order=True`` the
    inner gradients are treated as constants (same iterates, cheaper graph).
    """
    if config.jitter_std > 0:
        raise UnsupportedOperationError("latent jitter is not supported inside the differentiable inner loop")
    if config.steps > config.unroll_cap:
        raise ValueError(f"{config.steps} unrolled steps exceed the cap of {config.unroll_cap}")
    lrs = step_learning_rates(config, len(params0.groups), log_lrs, dtype=params0.dtype)
    return _unroll(net, params0, latent, op, y, config, lrs, differentiable=True, first_order=first_order)


def initial_log_lrs(steps: int, n_groups: int, lr: float, dtype=torch.float32) -> torch.Tensor:
    return torch.full((steps, n_groups), math.log(lr), dtype=dtype)
