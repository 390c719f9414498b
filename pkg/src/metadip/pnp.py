"""Plug-and-play ADMM baseline with a pluggable denoiser and grid search."""
from __future__ import annotations

import itertools
import time
from collections.abc import Callable
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import gaussian_filter

from .errors import NonFiniteError, RegistryError, UnsupportedOperationError
from .imaging import clamp01, psnr
from .operators import Measurement, MeasurementOperator, least_squares_update, subgradient_data_update


@dataclass(frozen=True)
class DenoiserPlugin:
    """``fn(image, strength) -> image``; strength is a noise std on the 0-255 scale."""

    name: str
    fn: Callable[[np.ndarray, float], np.ndarray]
    strength_semantics: str = ""

    def __call__(self, img, strength: float) -> np.ndarray:
        img = np.asarray(img, dtype=np.float64)
        out = np.asarray(self.fn(img, float(strength)), dtype=np.float64)
        if out.shape != img.shape:
            raise ValueError(f"denoiser {self.name!r} changed the image shape {img.shape} -> {out.shape}")
        return out


def _identity(img, strength):
    return img.copy()


def _gaussian_blur(img, strength):
    sigma = strength / 10.0
    if sigma <= 0:
        return img.copy()
    return gaussian_filter(img, sigma=(sigma, sigma, 0), mode="reflect")


def _grad(x):
    gv = np.zeros_like(x)
    gh = np.zeros_like(x)
    gv[:-1] = x[1:] - x[:-1]
    gh[:, :-1] = x[:, 1:] - x[:, :-1]
    return gv, gh


def _grad_adjoint(pv, ph):
    out = np.zeros_like(pv)
    out[:-1] -= pv[:-1]
    out[1:] += pv[:-1]
    out[:, :-1] -= ph[:, :-1]
    out[:, 1:] += ph[:, :-1]
    return out


def tv_prox(img, weight: float, iterations: int = 50) -> np.ndarray:
    """Proximal map of ``weight * TV`` (anisotropic), by accelerated projected
    gradient on the box-constrained dual."""
    g = np.asarray(img, dtype=np.float64)
    if weight <= 0:
        return g.copy()
    pv, ph = np.zeros_like(g), np.zeros_like(g)
    qv, qh = pv, ph
    t = 1.0
    step = 1.0 / 8.0
    for _ in range(iterations):
        dv, dh = _grad(g - _grad_adjoint(qv, qh))
        nv = np.clip(qv + step * dv, -weight, weight)
        nh = np.clip(qh + step * dh, -weight, weight)
        t_next = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * t * t))
        qv = nv + ((t - 1.0) / t_next) * (nv - pv)
        qh = nh + ((t - 1.0) / t_next) * (nh - ph)
        pv, ph, t = nv, nh, t_next
    return g - _grad_adjoint(pv, ph)


def _tv_denoiser(img, strength):
    return tv_prox(img, strength / 255.0)


_REGISTRY: dict[str, DenoiserPlugin] = {}


def register_denoiser(plugin: DenoiserPlugin) -> None:
    _REGISTRY[plugin.name] = plugin


register_denoiser(DenoiserPlugin("identity", _identity, "ignored"))
register_denoiser(DenoiserPlugin("gaussian", _gaussian_blur, "blur std in pixels = strength / 10"))
register_denoiser(DenoiserPlugin("tv", _tv_denoiser, "TV prox weight = strength / 255"))


def builtin_denoisers() -> dict[str, DenoiserPlugin]:
    return dict(_REGISTRY)


def get_denoiser(name: str) -> DenoiserPlugin:
    try:
        return _REGISTRY[name]
    except KeyError:
        raise RegistryError(f"unknown denoiser {name!r}; available: {sorted(_REGISTRY)}") from None


# ---------------------------------------------------------------------------
# ADMM


@dataclass(frozen=True)
class ADMMConfig:
    rho: float = 1.0
    strength: float = 15.0
    iterations: int = 50
    subgradient_steps: int = 10
    step_size: float | None = None

    def __post_init__(self):
        if self.rho <= 0 or self.strength < 0 or self.iterations < 0 or self.subgradient_steps < 1:
            raise ValueError(f"invalid ADMM configuration {self}")


@dataclass
class ADMMResult:
    image: np.ndarray
    residuals: list[float] = field(default_factory=list)  # ||x - v|| after each iteration


def pnp_admm_solve(op: MeasurementOperator, y, denoiser: DenoiserPlugin, config: ADMMConfig, shape) -> ADMMResult:
    """Scaled-dual PnP-ADMM for cs (exact least squares) and cpr (subgradient) problems."""
    if op.kind not in ("cs", "cpr"):
        raise UnsupportedOperationError(f"PnP-ADMM handles cs and cpr operators; for {op.kind} call the denoiser directly")
    shape = tuple(shape)
    if int(np.prod(shape)) != op.n:
        raise ValueError(f"image shape {shape} does not hold n = {op.n} values")
    y_values = np.asarray(y.values if isinstance(y, Measurement) else y, dtype=np.float64)
    if op.kind == "cs":
        x = op._dense().T @ y_values
    else:
        x = np.zeros(op.n)
    v = x.copy()
    u = np.zeros(op.n)
    residuals = []
    for k in range(config.iterations):
        if op.kind == "cs":
            x = least_squares_update(op, y_values, v, config.rho, u)
        else:
            x = subgradient_data_update(
                op, x, y_values, steps=config.subgradient_steps, step_size=config.step_size, rho=config.rho, target=v - u
            )
        v = denoiser((x + u).reshape(shape), config.strength).reshape(-1)
        u = u + x - v
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(v)) and np.all(np.isfinite(u))):
            raise NonFiniteError(f"PnP-ADMM iterate became non-finite at iteration {k + 1} ({config})")
        residuals.append(float(np.linalg.norm(x - v)))
    return ADMMResult(clamp01(v.reshape(shape)), residuals)


@dataclass(frozen=True)
class ValidationTask:
    op: MeasurementOperator
    y: object
    truth: np.ndarray
    task_id: str = ""


DEFAULT_GRID = {"strength": (5.0, 15.0, 25.0), "rho": (0.1, 1.0, 10.0), "iterations": (25, 50, 100)}
TABLE_COLUMNS = ("strength", "rho", "iterations", "mean_psnr", "mean_seconds")


def grid_search(tasks, denoiser: DenoiserPlugin, grids: dict | None = None, solver=pnp_admm_solve):
    """Evaluate every (strength, rho, iterations) combination by mean PSNR.

    Returns ``(best_config, table)``; ``table`` is a list of row dicts in grid
    order. Ties go to fewer iterations, then lower strength, then lower rho.
    """
    grids = {**DEFAULT_GRID, **(grids or {})}
    for axis in ("strength", "rho", "iterations"):
        if len(grids[axis]) == 0:
            raise ValueError(f"grid axis {axis!r} is empty")
    tasks = list(tasks)
    if not tasks:
        raise ValueError("grid search needs at least one validation task")
    table = []
    for strength, rho, iterations in itertools.product(grids["strength"], grids["rho"], grids["iterations"]):
        cfg = ADMMConfig(rho=float(rho), strength=float(strength), iterations=int(iterations))
        scores, secs = [], []
        for task in tasks:
            start = time.perf_counter()
            result = solver(task.op, task.y, denoiser, cfg, task.truth.shape)
            secs.append(time.perf_counter() - start)
            image = result.image if isinstance(result, ADMMResult) else result
            scores.append(psnr(task.truth, image))
        table.append(
            {
                "strength": cfg.strength,
                "rho": cfg.rho,
                "iterations": cfg.iterations,
                "mean_psnr": float(np.mean(scores)),
                "mean_seconds": float(np.mean(secs)),
            }
        )
    best = min(table, key=lambda r: (-r["mean_psnr"], r["iterations"], r["strength"], r["rho"]))
    return ADMMConfig(rho=best["rho"], strength=best["strength"], iterations=best["iterations"]), table
