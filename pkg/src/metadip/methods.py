"""Named reconstruction methods and problem construction shared by the
harness and the estimator wrappers."""
from __future__ import annotations

import re
import time
from dataclasses import dataclass, field

import numpy as np

from .errors import IncompatibleCheckpointError
from .imaging import check_image, clamp01
from .inner import FitResult, fit, vanilla_dip_config
from .meta import MetaConfig, MetaInitialization, load_checkpoint, seed_initialization
from .networks import DipNetConfig
from .operators import make_operator
from .pnp import ADMMConfig, get_denoiser, pnp_admm_solve

META_METHODS = ("metadip", "metasiren")
_DIP_RE = re.compile(r"^dip(\d+)$")
_PNP_PREFIX = "pnp-admm+"


@dataclass(frozen=True)
class ProblemSpec:
    kind: str = "denoise"
    sigma_8bit: float = 25.0
    ratio: float = 0.25

    def measurement_count(self, n: int) -> int:
        if self.kind == "denoise":
            return n
        return max(1, int(round(self.ratio * n)))

    def label(self) -> str:
        return self.kind if self.kind == "denoise" else f"{self.kind}@{self.ratio:g}"


@dataclass
class Problem:
    op: object
    y: object
    truth: np.ndarray | None
    shape: tuple[int, int, int]
    spec: ProblemSpec


def make_problem(image, spec: ProblemSpec, operator_seed: int, noise_seed: int) -> Problem:
    x = check_image(image)
    n = x.size
    op = make_operator(spec.kind, n, spec.measurement_count(n), spec.sigma_8bit, operator_seed)
    return Problem(op, op.apply(x.reshape(-1), noise_seed), x, x.shape, spec)


@dataclass(frozen=True)
class MethodSpec:
    """A named method: ``metadip``, ``metasiren``, ``dip<N>`` or ``pnp-admm+<denoiser>``."""

    name: str
    checkpoint: str | None = None
    overrides: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.name in META_METHODS:
            if not self.checkpoint:
                raise ValueError(f"method {self.name!r} requires a checkpoint path")
        elif not (_DIP_RE.match(self.name) or self.name.startswith(_PNP_PREFIX)):
            raise ValueError(
                f"unknown method {self.name!r}; expected metadip, metasiren, dip<steps> or pnp-admm+<denoiser>"
            )

    @property
    def is_meta(self) -> bool:
        return self.name in META_METHODS

    @property
    def dip_steps(self) -> int | None:
        m = _DIP_RE.match(self.name)
        return int(m.group(1)) if m else None


@dataclass
class MethodOutput:
    image: np.ndarray
    seconds: float
    fit: FitResult | None = None
    residuals: list = field(default_factory=list)


def random_init_dip(net_config, shape, op, y, steps: int, seed: int = 0, ground_truth=None, **overrides) -> FitResult:
    """Vanilla DIP from a seeded random initialization."""
    init = seed_initialization(net_config, shape, MetaConfig(seed=seed, inner_steps=0, test_steps=steps))
    return fit(init.network(), init.params0, init.latent, op, y, vanilla_dip_config(steps, **overrides), ground_truth=ground_truth)


class MethodRunner:
    """Resolves a :class:`MethodSpec` once (checkpoint loading happens here,
    outside any timed region) and then solves problems with it."""

    def __init__(self, spec: MethodSpec, net_config=None, seed: int = 0, admm: ADMMConfig | None = None):
        self.spec = spec
        self.seed = seed
        self.net_config = net_config or DipNetConfig()
        self.admm = admm or ADMMConfig()
        self.init: MetaInitialization | None = None
        if spec.is_meta:
            self.init = load_checkpoint(spec.checkpoint)
            expected = "siren" if spec.name == "metasiren" else "dip"
            if self.init.net_config.kind != expected:
                raise IncompatibleCheckpointError(
                    f"{spec.name} needs a {expected} checkpoint, {spec.checkpoint} holds a {self.init.net_config.kind} network"
                )

    def solve(self, problem: Problem, steps: int | None = None) -> MethodOutput:
        spec = self.spec
        if spec.is_meta:
            self.init.check_compatible(problem.shape)
            start = time.perf_counter()
            res = self.init.solve(problem.op, problem.y, steps=steps, ground_truth=problem.truth, **spec.overrides)
            return MethodOutput(res.reconstruction, time.perf_counter() - start, res)
        if spec.dip_steps is not None:
            n_steps = spec.dip_steps if steps is None else steps
            start = time.perf_counter()
            res = random_init_dip(
                self.net_config, problem.shape, problem.op, problem.y, n_steps, self.seed, problem.truth, **spec.overrides
            )
            return MethodOutput(res.reconstruction, time.perf_counter() - start, res)
        denoiser = get_denoiser(spec.name[len(_PNP_PREFIX) :])
        start = time.perf_counter()
        if problem.op.kind == "denoise":
            image = clamp01(denoiser(np.asarray(problem.y.values).reshape(problem.shape), self.admm.strength))
            return MethodOutput(image, time.perf_counter() - start)
        result = pnp_admm_solve(problem.op, problem.y, denoiser, self.admm, problem.shape)
        return MethodOutput(result.image, time.perf_counter() - start, residuals=result.residuals)
