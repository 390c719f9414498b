"""MAML outer loop over DIP initializations, and the checkpoint format."""
from __future__ import annotations

import json
import logging
import math
import os
import struct
import tempfile
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from .errors import (
    DataError,
    DivergenceError,
    FormatError,
    IncompatibleCheckpointError,
    NonFiniteError,
    UnsupportedVersionError,
)
from .imaging import ImageDataset, add_gaussian_noise, check_image, psnr
from .inner import TV_WEIGHT_PER_PIXEL, InnerLoopConfig, fit, fit_differentiable
from .networks import DipNetConfig, LatentInput, ParameterSet, build_network, config_from_dict, make_latent
from .operators import make_operator

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"MDIPCKPT"
CHECKPOINT_VERSION = 1
_PREFIX = struct.Struct("<8sHQ")


@dataclass(frozen=True)
class MetaConfig:
    outer_steps: int = 2000
    inner_steps: int = 20
    test_steps: int = 50
    batch_size: int = 1
    sigma_8bit: float = 25.0
    outer_lr: float = 1e-4
    lr_outer_lr: float | None = 1e-2  # rate for the log learning rates; None -> outer_lr
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    clip_norm: float = 10.0
    learn_lrs: bool = True
    init_lr: float = 5e-4  # well inside the stable range, so learned rates can grow
    momentum: float = 0.9
    tv_weight_per_pixel: float = TV_WEIGHT_PER_PIXEL
    first_order: bool = False
    seed: int = 0
    eval_every: int = 100
    val_tasks: int = 8
    checkpoint_every: int = 500
    divergence_factor: float = 10.0
    divergence_patience: int = 100
    unroll_cap: int = 20

    def __post_init__(self):
        if self.outer_steps < 0 or self.inner_steps < 0:
            raise ValueError("step counts must be nonnegative")
        if self.inner_steps > self.unroll_cap:
            raise ValueError(f"inner_steps {self.inner_steps} exceeds the unroll cap {self.unroll_cap}")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.outer_lr < 0 or self.init_lr <= 0:
            raise ValueError("learning rates must be positive (outer_lr may be 0)")
        if self.sigma_8bit < 0:
            raise ValueError("sigma must be nonnegative")


@dataclass
class MetaInitialization:
    """Learned starting point for DIP: weights, per-step log learning rates, and input."""

    net_config: object
    params0: ParameterSet
    log_lrs: torch.Tensor
    latent: LatentInput
    inner: dict = field(default_factory=dict)
    provenance: dict = field(default_factory=dict)
    version: int = CHECKPOINT_VERSION

    def network(self):
        net, _ = build_network(self.net_config, 0, dtype=self.params0.dtype)
        return net

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return (self.latent.height, self.latent.width, self.net_config.out_channels)

    def inner_config(self, steps: int | None = None, **overrides) -> InnerLoopConfig:
        steps = self.inner.get("test_steps", 50) if steps is None else steps
        kw = dict(
            steps=steps,
            lr=self.inner.get("init_lr", 5e-4),
            momentum=self.inner.get("momentum", 0.9),
            tv_weight=self.inner.get("tv_weight_per_pixel", TV_WEIGHT_PER_PIXEL) * self.latent.height * self.latent.width,
            use_ema=self.inner.get("use_ema", False),
            lr_extension=self.inner.get("lr_extension", "repeat"),
            unroll_cap=self.inner.get("unroll_cap", 20),
        )
        kw.update(overrides)
        return InnerLoopConfig(**kw)

    def check_compatible(self, image_shape) -> None:
        if tuple(image_shape) != self.image_shape:
            raise IncompatibleCheckpointError(
                f"checkpoint produces {self.image_shape} images; problem needs {tuple(image_shape)}"
            )

    def solve(self, op, y, steps: int | None = None, ground_truth=None, **overrides):
        cfg = self.inner_config(steps, **overrides)
        log_lrs = self.log_lrs if self.inner.get("learn_lrs", True) else None
        return fit(self.network(), self.params0, self.latent, op, y, cfg, ground_truth=ground_truth, log_lrs=log_lrs)

    def copy(self) -> "MetaInitialization":
        return replace(
            self,
            params0=self.params0.detach(),
            log_lrs=self.log_lrs.detach().clone(),
            inner=dict(self.inner),
            provenance=dict(self.provenance),
        )


def seed_initialization(net_config, image_shape, config: MetaConfig, dtype=torch.float32) -> MetaInitialization:
    """Random starting point for meta-training (also the random-init DIP baseline)."""
    h, w = image_shape[:2]
    _, params = build_network(net_config, config.seed, dtype=dtype)
    latent = make_latent(net_config, h, w, config.seed)
    n_groups = len(params.groups)
    log_lrs = torch.full((max(config.inner_steps, 1), n_groups), math.log(config.init_lr), dtype=dtype)
    inner = {
        "train_steps": config.inner_steps,
        "test_steps": config.test_steps,
        "momentum": config.momentum,
        "tv_weight_per_pixel": config.tv_weight_per_pixel,
        "init_lr": config.init_lr,
        "learn_lrs": config.learn_lrs,
        "lr_extension": "repeat",
        "use_ema": False,
        "unroll_cap": config.unroll_cap,
    }
    return MetaInitialization(net_config, params, log_lrs, latent, inner=inner, provenance={})


# ---------------------------------------------------------------------------
# Tasks


@dataclass
class TaskBatch:
    pairs: list[tuple[np.ndarray, np.ndarray]]
    sigma_8bit: float
    seeds: list[int]

    def __len__(self):
        return len(self.pairs)


def sample_task(dataset, sigma_8bit: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Pick an image and corrupt it with AWGN, both determined by ``seed``."""
    if len(dataset) == 0:
        raise DataError("cannot sample a task from an empty dataset")
    rng = np.random.default_rng([seed, 0x7A5C])
    idx = int(rng.integers(len(dataset)))
    clean = check_image(dataset[idx])
    noise_seed = int(rng.integers(2**63 - 1))
    return clean, add_gaussian_noise(clean, sigma_8bit, noise_seed)


def sample_batch(dataset, sigma_8bit: float, seeds) -> TaskBatch:
    seeds = [int(s) for s in seeds]
    return TaskBatch([sample_task(dataset, sigma_8bit, s) for s in seeds], sigma_8bit, seeds)


# ---------------------------------------------------------------------------
# Outer loop


@dataclass
class OuterState:
    """Adaptive-moment state for the outer update."""

    m: list[torch.Tensor] | None = None
    v: list[torch.Tensor] | None = None
    t: int = 0


def _meta_tensors(init: MetaInitialization, learn_lrs: bool):
    params = init.params0.requires_grad_()
    log_lrs = init.log_lrs.detach().clone().requires_grad_(learn_lrs)
    return params, log_lrs


def meta_loss(init: MetaInitialization, batch: TaskBatch, config: MetaConfig, params=None, log_lrs=None, net=None):
    """Mean final inner loss over the batch, differentiable in weights and log rates.

    ``net`` replaces the architecture built from ``init.net_config`` (any
    callable ``net(params, latent, jitter=None)``).
    """
    net = net or init.network()
    if params is None:
        params, log_lrs = _meta_tensors(init, config.learn_lrs)
    inner_cfg = init.inner_config(config.inner_steps, unroll_cap=config.unroll_cap)
    total = 0.0
    for clean, noisy in batch.pairs:
        op = make_operator("denoise", noisy.size)
        _, loss = fit_differentiable(
            net, params, init.latent, op, noisy.reshape(-1), inner_cfg, log_lrs=log_lrs, first_order=config.first_order
        )
        total = total + loss
    return total / len(batch)


def meta_step(init: MetaInitialization, batch: TaskBatch, state: OuterState, config: MetaConfig, net=None):
    """One MAML update of ``(params0, log_lrs)``; returns ``(init, state, metrics)``.

    A non-finite meta-gradient leaves the initialization and state untouched
    and is reported in ``metrics["skipped"]``.
    """
    params, log_lrs = _meta_tensors(init, config.learn_lrs)
    try:
        outer = meta_loss(init, batch, config, params, log_lrs, net=net)
    except NonFiniteError as exc:
        logger.warning("inner loop diverged (%s); skipping update", exc)
        return init, state, {"outer_loss": float("nan"), "grad_norm": float("nan"), "skipped": True}
    leaves = params.values() + ([log_lrs] if config.learn_lrs else [])
    grads = torch.autograd.grad(outer, leaves, allow_unused=True)
    grads = [torch.zeros_like(p) if g is None else g for p, g in zip(leaves, grads)]
    norm = float(torch.sqrt(sum((g.to(torch.float64) ** 2).sum() for g in grads)))
    metrics = {"outer_loss": float(outer.detach()), "grad_norm": norm, "skipped": False}
    if not math.isfinite(norm) or not math.isfinite(metrics["outer_loss"]):
        logger.warning("non-finite meta-gradient (loss=%s, norm=%s); skipping update", metrics["outer_loss"], norm)
        metrics["skipped"] = True
        return init, state, metrics
    if config.clip_norm and norm > config.clip_norm:
        scale = config.clip_norm / norm
        grads = [g * scale for g in grads]

    if state.m is None:
        state = OuterState([torch.zeros_like(g) for g in grads], [torch.zeros_like(g) for g in grads], 0)
    b1, b2 = config.betas
    t = state.t + 1
    new_m = [b1 * m + (1 - b1) * g for m, g in zip(state.m, grads)]
    new_v = [b2 * v + (1 - b2) * g * g for v, g in zip(state.v, grads)]
    rates = [config.outer_lr] * len(params) + [config.lr_outer_lr if config.lr_outer_lr is not None else config.outer_lr] * (
        len(leaves) - len(params)
    )
    updated = []
    for p, m, v, rate in zip(leaves, new_m, new_v, rates):
        mhat = m / (1 - b1**t)
        vhat = v / (1 - b2**t)
        updated.append((p - rate * mhat / (torch.sqrt(vhat) + config.eps)).detach())
    new_params = ParameterSet(zip(params.names, updated[: len(params)]))
    new_log_lrs = updated[-1] if config.learn_lrs else init.log_lrs.detach().clone()
    new_init = replace(init, params0=new_params, log_lrs=new_log_lrs)
    return new_init, OuterState(new_m, new_v, t), metrics


def validation_scores(init: MetaInitialization, tasks: TaskBatch, steps: int) -> tuple[float, float]:
    """Mean final inner loss and mean clean-image PSNR after ``steps`` plain fitting steps.

    A fit that diverges scores ``(inf, -inf)``.
    """
    net = init.network()
    cfg = init.inner_config(steps, track_metrics=False)
    log_lrs = init.log_lrs if init.inner.get("learn_lrs", True) else None
    losses, psnrs = [], []
    for clean, noisy in tasks.pairs:
        op = make_operator("denoise", noisy.size)
        try:
            res = fit(net, init.params0, init.latent, op, noisy.reshape(-1), cfg, log_lrs=log_lrs)
        except NonFiniteError:
            return float("inf"), float("-inf")
        losses.append(res.loss_trace[-1])
        psnrs.append(psnr(clean, res.reconstruction))
    return float(np.mean(losses)), float(np.mean(psnrs))


def _task_seed(master: int, *parts: int) -> int:
    return int(np.random.default_rng([master, *parts]).integers(2**62))


def meta_train(
    dataset: ImageDataset,
    config: MetaConfig = MetaConfig(),
    net_config=None,
    *,
    checkpoint_dir=None,
    history: list | None = None,
    dtype=torch.float32,
) -> MetaInitialization:
    """Meta-train a DIP initialization on denoising tasks.

    Returns the initialization with the highest validation PSNR among those
    evaluated every ``eval_every`` steps (the starting point included). The
    fitting target is always the noisy image; the clean validation images
    only score the fits.
    """
    if len(dataset) == 0:
        raise DataError("cannot meta-train on an empty dataset")
    net_config = net_config or DipNetConfig(out_channels=dataset.shape[2])
    train, val = dataset.split(0.1)
    if len(train) == 0:
        train = val
    init = seed_initialization(net_config, dataset.shape, config, dtype=dtype)
    init.provenance = {
        "dataset": dataset.meta.get("source", dataset.meta.get("root", "custom")),
        "dataset_size": len(dataset),
        "sigma_8bit": config.sigma_8bit,
        "inner_steps": config.inner_steps,
        "outer_steps": config.outer_steps,
        "seed": config.seed,
        "meta_config": {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(config).items()},
    }
    if config.outer_steps == 0:
        return init

    val_source = val if len(val) else train
    val_tasks = sample_batch(val_source, config.sigma_8bit, [_task_seed(config.seed, 1, k) for k in range(config.val_tasks)])
    # validated at the test horizon so rates that blow up past the unroll lose;
    # scored on clean images since a low noisy-target loss can mean fitted noise
    best_loss, best_psnr = validation_scores(init, val_tasks, config.test_steps)
    best = init.copy()
    if history is not None:
        history.append(
            {"step": 0, "outer_loss": float("nan"), "grad_norm": float("nan"), "val_loss": best_loss, "val_psnr": best_psnr}
        )
    state = OuterState()
    reference, above = None, 0
    for j in range(1, config.outer_steps + 1):
        seeds = [_task_seed(config.seed, 0, j, b) for b in range(config.batch_size)]
        batch = sample_batch(train, config.sigma_8bit, seeds)
        init, state, metrics = meta_step(init, batch, state, config)
        if reference is None and not metrics["skipped"]:
            reference = metrics["outer_loss"]
        bad = metrics["skipped"] or (reference is not None and metrics["outer_loss"] > config.divergence_factor * reference)
        if bad:
            above += 1
            if above >= config.divergence_patience:
                raise DivergenceError(
                    f"outer loss stayed non-finite or above {config.divergence_factor}x its initial value "
                    f"({reference}) for {above} steps; last {metrics['outer_loss']:.4g} at step {j}"
                )
        else:
            above = 0
        row = {"step": j, **metrics, "val_loss": float("nan"), "val_psnr": float("nan")}
        if j % config.eval_every == 0 or j == config.outer_steps:
            val_loss, val_psnr = validation_scores(init, val_tasks, config.test_steps)
            row.update(val_loss=val_loss, val_psnr=val_psnr)
            logger.info("meta step %d: outer %.4f val loss %.4f val psnr %.2f", j, metrics["outer_loss"], val_loss, val_psnr)
            if val_psnr > best_psnr:
                best_loss, best_psnr, best = val_loss, val_psnr, init.copy()
        if history is not None:
            history.append(row)
        if checkpoint_dir is not None and (j % config.checkpoint_every == 0 or j == config.outer_steps):
            save_checkpoint(init, Path(checkpoint_dir) / f"step{j:06d}.ckpt")
    best.provenance["best_val_loss"] = best_loss
    best.provenance["best_val_psnr"] = best_psnr
    return best


# ---------------------------------------------------------------------------
# Checkpoints


def _f32(t) -> bytes:
    arr = t.detach().to(torch.float32).numpy() if isinstance(t, torch.Tensor) else np.asarray(t, dtype=np.float32)
    return np.ascontiguousarray(arr, dtype="<f4").tobytes()


def checkpoint_bytes(init: MetaInitialization) -> bytes:
    header = {
        "net": init.net_config.to_dict(),
        "inner": init.inner,
        "provenance": init.provenance,
        "params": [[name, list(shape)] for name, shape in zip(init.params0.names, init.params0.shapes)],
        "log_lrs_shape": list(init.log_lrs.shape),
        "z_shape": list(init.latent.z.shape),
        "B_shape": list(init.latent.B.shape),
        "feature_scale": init.latent.feature_scale,
    }
    text = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts = [_PREFIX.pack(CHECKPOINT_MAGIC, init.version, len(text)), text]
    parts += [_f32(t) for t in init.params0.values()]
    parts += [_f32(init.log_lrs), _f32(init.latent.z), _f32(init.latent.B)]
    return b"".join(parts)


def save_checkpoint(init: MetaInitialization, path) -> Path:
    """Write atomically (temp file then rename)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    data = checkpoint_bytes(init)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def checkpoint_from_bytes(data: bytes) -> MetaInitialization:
    if len(data) < _PREFIX.size:
        raise FormatError("checkpoint is truncated")
    magic, version, hlen = _PREFIX.unpack_from(data)
    if magic != CHECKPOINT_MAGIC:
        raise FormatError("not a checkpoint file (bad magic)")
    if version != CHECKPOINT_VERSION:
        raise UnsupportedVersionError(f"checkpoint format version {version} is not supported (expected {CHECKPOINT_VERSION})")
    offset = _PREFIX.size
    if len(data) < offset + hlen:
        raise FormatError("checkpoint header is truncated")
    try:
        header = json.loads(data[offset : offset + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"checkpoint header is corrupt: {exc}") from exc
    offset += hlen
    shapes = [tuple(s) for _, s in header["params"]]
    sections = shapes + [tuple(header["log_lrs_shape"]), tuple(header["z_shape"]), tuple(header["B_shape"])]
    sizes = [int(np.prod(s)) for s in sections]
    if len(data) - offset != 4 * sum(sizes):
        raise FormatError("checkpoint body is truncated or has trailing bytes")
    arrays = []
    for shape, size in zip(sections, sizes):
        arrays.append(np.frombuffer(data, dtype="<f4", count=size, offset=offset).reshape(shape).astype(np.float32))
        offset += 4 * size
    n = len(shapes)
    params = ParameterSet((name, torch.from_numpy(a.copy())) for (name, _), a in zip(header["params"], arrays[:n]))
    log_lrs = torch.from_numpy(arrays[n].copy())
    latent = LatentInput(arrays[n + 1], arrays[n + 2], header["feature_scale"])
    return MetaInitialization(
        config_from_dict(header["net"]), params, log_lrs, latent, header["inner"], header["provenance"], version
    )


def load_checkpoint(path) -> MetaInitialization:
    return checkpoint_from_bytes(Path(path).read_bytes())
