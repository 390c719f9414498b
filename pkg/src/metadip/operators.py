"""Measurement operators: AWGN denoising, Gaussian compressive sensing, and
compressive phase retrieval, plus the data-fidelity sub-solvers used by ADMM.

Signals are flat vectors of length ``n``; an ``H x W x C`` image maps to a
signal by C-order ``reshape(-1)``.
"""
from __future__ import annotations

import struct
import threading
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.linalg
import torch

from .errors import DimensionError, FormatError, UnsupportedOperationError, UnsupportedVersionError

KINDS = ("denoise", "cs", "cpr")
_KIND_CODE = {k: i for i, k in enumerate(KINDS)}

MAGIC = b"MDIPOP1"
_HEADER = struct.Struct("<7sBQQdQ")


@dataclass(frozen=True, eq=False)
class MeasurementOperator:
    """Forward model ``y = M(x, e)``.

    ``matrix`` is float32 for ``cs`` and complex64 for ``cpr`` (a real matrix
    may be injected for ``cpr`` in tests); it is ``None`` for ``denoise``.
    """

    kind: str
    n: int
    m: int
    sigma_8bit: float = 0.0
    seed: int = 0
    matrix: np.ndarray | None = field(default=None, repr=False)
    _cache: dict = field(default_factory=dict, repr=False, compare=False)
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False, compare=False)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown operator kind {self.kind!r}; expected one of {KINDS}")
        if self.sigma_8bit < 0:
            raise ValueError("sigma must be nonnegative")
        if self.kind == "denoise":
            if self.matrix is not None or self.m != self.n:
                raise ValueError("denoise operator has m = n and no matrix")
        elif self.matrix is None or self.matrix.shape != (self.m, self.n):
            raise DimensionError(f"{self.kind} operator needs an {self.m} x {self.n} matrix")

    @property
    def noise_std(self) -> float:
        return self.sigma_8bit / 255.0

    @property
    def ratio(self) -> float:
        return self.m / self.n

    def _dense(self) -> np.ndarray:
        """Matrix in float64 / complex128."""
        key = "dense"
        if key not in self._cache:
            dtype = np.complex128 if np.iscomplexobj(self.matrix) else np.float64
            self._cache[key] = np.asarray(self.matrix, dtype=dtype)
        return self._cache[key]

    def _check_signal(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64).reshape(-1)
        if x.size != self.n:
            raise DimensionError(f"signal has length {x.size}, operator expects n = {self.n}")
        return x

    # -- numpy forward ------------------------------------------------------

    def linear(self, x) -> np.ndarray:
        """``x`` for denoise, ``A x`` otherwise (complex for cpr)."""
        x = self._check_signal(x)
        if self.kind == "denoise":
            return x.copy()
        return self._dense() @ x

    def forward(self, x) -> np.ndarray:
        """Noiseless measurement of ``x``."""
        z = self.linear(x)
        return np.abs(z) if self.kind == "cpr" else z

    def apply(self, x, noise_seed: int = 0) -> "Measurement":
        z = self.linear(x)
        std = self.noise_std
        if std > 0:
            rng = np.random.default_rng(noise_seed)
            if self.kind == "cpr":
                e = rng.normal(0.0, std / np.sqrt(2.0), (2, self.m))
                z = z + (e[0] + 1j * e[1])
            else:
                z = z + rng.normal(0.0, std, self.m)
        values = np.abs(z) if self.kind == "cpr" else np.asarray(z, dtype=np.float64)
        return Measurement(values=np.asarray(values, dtype=np.float64), operator=self)

    # -- torch forward ------------------------------------------------------

    def _torch_matrices(self, dtype: torch.dtype) -> tuple[torch.Tensor, torch.Tensor | None]:
        key = ("torch", dtype)
        with self._lock:
            if key not in self._cache:
                dense = self._dense()
                re = torch.as_tensor(np.ascontiguousarray(dense.real), dtype=dtype)
                im = torch.as_tensor(np.ascontiguousarray(dense.imag), dtype=dtype) if np.iscomplexobj(dense) else None
                self._cache[key] = (re, im)
        return self._cache[key]

    def forward_torch(self, x: torch.Tensor) -> torch.Tensor:
        x = x.reshape(-1)
        if x.numel() != self.n:
            raise DimensionError(f"signal has length {x.numel()}, operator expects n = {self.n}")
        if self.kind == "denoise":
            return x
        re, im = self._torch_matrices(x.dtype)
        if self.kind == "cs":
            return re @ x
        zr = re @ x
        zi = im @ x if im is not None else torch.zeros_like(zr)
        return safe_modulus(zr, zi)

    def data_loss(self, x_est, y) -> float | torch.Tensor:
        """``||forward(x_est) - y||^2`` for numpy (float) or torch (tensor) input."""
        y_values = y.values if isinstance(y, Measurement) else y
        if isinstance(x_est, torch.Tensor):
            target = torch.as_tensor(np.asarray(y_values), dtype=x_est.dtype)
            pred = self.forward_torch(x_est)
            if pred.shape != target.shape:
                raise DimensionError(f"measurement length {target.numel()} != m = {self.m}")
            return ((pred - target) ** 2).sum()
        y_values = np.asarray(y_values, dtype=np.float64).reshape(-1)
        if y_values.size != self.m:
            raise DimensionError(f"measurement length {y_values.size} != m = {self.m}")
        return float(np.sum((self.forward(x_est) - y_values) ** 2))

    # -- serialization ------------------------------------------------------

    def to_bytes(self) -> bytes:
        if self.seed < 0:
            raise ValueError("only nonnegative seeds can be serialized")
        header = _HEADER.pack(MAGIC, _KIND_CODE[self.kind], self.n, self.m, float(self.sigma_8bit), self.seed)
        if self.matrix is None:
            return header
        mat = np.asarray(self.matrix)
        body = np.ascontiguousarray(mat.real, dtype="<f4").tobytes()
        if self.kind == "cpr":
            body += np.ascontiguousarray(mat.imag if np.iscomplexobj(mat) else np.zeros_like(mat.real), dtype="<f4").tobytes()
        return header + body

    @classmethod
    def from_bytes(cls, data: bytes) -> "MeasurementOperator":
        if len(data) < _HEADER.size:
            raise FormatError("operator record is truncated")
        magic, code, n, m, sigma, seed = _HEADER.unpack_from(data)
        if magic[:6] != MAGIC[:6]:
            raise FormatError("not an operator record (bad magic)")
        if magic != MAGIC:
            raise UnsupportedVersionError(f"unsupported operator record version {magic[6:]!r}")
        if code >= len(KINDS):
            raise FormatError(f"unknown operator kind code {code}")
        kind = KINDS[code]
        body = data[_HEADER.size :]
        if kind == "denoise":
            return cls(kind, n, m, sigma, seed)
        planes = 2 if kind == "cpr" else 1
        if len(body) != planes * m * n * 4:
            raise FormatError("operator record is truncated or has trailing bytes")
        flat = np.frombuffer(body, dtype="<f4").astype(np.float32)
        matrix = flat[: m * n].reshape(m, n)
        if kind == "cpr":
            matrix = (matrix + 1j * flat[m * n :].reshape(m, n)).astype(np.complex64)
        return cls(kind, n, m, sigma, seed, matrix)


@dataclass(frozen=True, eq=False)
class Measurement:
    values: np.ndarray
    operator: MeasurementOperator

    def __post_init__(self):
        if self.values.shape != (self.operator.m,):
            raise DimensionError(f"measurement length {self.values.shape} != m = {self.operator.m}")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("measurement contains non-finite values")


def safe_modulus(re: torch.Tensor, im: torch.Tensor) -> torch.Tensor:
    """``sqrt(re^2 + im^2)`` whose (higher-order) gradient at 0 is 0."""
    r2 = re * re + im * im
    pos = r2 > 0
    return torch.where(pos, torch.sqrt(torch.where(pos, r2, torch.ones_like(r2))), torch.zeros_like(r2))


def make_operator(kind: str, n: int, m: int | None = None, sigma_8bit: float = 0.0, seed: int = 0) -> MeasurementOperator:
    """Sample an operator; cs entries are N(0, 1/m), cpr entries CN(0, 1/m)."""
    if kind not in KINDS:
        raise ValueError(f"unknown operator kind {kind!r}; expected one of {KINDS}")
    if n < 1:
        raise ValueError("n must be positive")
    if kind == "denoise":
        return MeasurementOperator("denoise", n, n, sigma_8bit, seed)
    if m is None or not 1 <= m <= n:
        raise ValueError(f"compressive operators need 1 <= m <= n, got m={m}, n={n}")
    rng = np.random.default_rng(seed)
    if kind == "cs":
        matrix = (rng.standard_normal((m, n)) / np.sqrt(m)).astype(np.float32)
    else:
        scale = np.sqrt(1.0 / (2.0 * m))
        matrix = (rng.standard_normal((m, n)) * scale + 1j * rng.standard_normal((m, n)) * scale).astype(np.complex64)
    return MeasurementOperator(kind, n, m, sigma_8bit, seed, matrix)


def injected_operator(kind: str, matrix, sigma_8bit: float = 0.0, seed: int = 0) -> MeasurementOperator:
    """Operator around a caller-supplied matrix (test hook)."""
    mat = np.asarray(matrix)
    if mat.ndim != 2:
        raise DimensionError("matrix must be 2-D")
    mat = mat.astype(np.complex64 if np.iscomplexobj(mat) else np.float32)
    m, n = mat.shape
    return MeasurementOperator(kind, n, m, sigma_8bit, seed, mat)


def apply(op: MeasurementOperator, x, noise_seed: int = 0) -> Measurement:
    return op.apply(x, noise_seed)


def data_loss(op: MeasurementOperator, x_est, y):
    return op.data_loss(x_est, y)


def save_operator(op: MeasurementOperator, path) -> None:
    Path(path).write_bytes(op.to_bytes())


def load_operator(path) -> MeasurementOperator:
    return MeasurementOperator.from_bytes(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# ADMM data-fidelity sub-solvers


def least_squares_update(op: MeasurementOperator, y, v, rho: float, u) -> np.ndarray:
    """Exact minimizer of ``||Ax - y||^2 + rho ||x - (v - u)||^2``.

    The Cholesky factor of ``A^T A + rho I`` is cached on the operator per rho.
    """
    if op.kind != "cs":
        raise UnsupportedOperationError(f"least-squares update is defined for cs operators, not {op.kind}")
    if rho <= 0:
        raise ValueError("rho must be positive")
    y_values = np.asarray(y.values if isinstance(y, Measurement) else y, dtype=np.float64)
    target = op._check_signal(v) - op._check_signal(u)
    A = op._dense()
    key = ("chol", float(rho))
    with op._lock:
        if key not in op._cache:
            gram = A.T @ A
            gram[np.diag_indices_from(gram)] += rho
            op._cache[key] = scipy.linalg.cho_factor(gram, lower=True, check_finite=False)
        factor = op._cache[key]
    return scipy.linalg.cho_solve(factor, A.T @ y_values + rho * target, check_finite=False)


def _spectral_norm_sq(op: MeasurementOperator, iterations: int = 20) -> float:
    key = ("lmax", iterations)
    if key not in op._cache:
        A = op._dense()
        v = np.full(op.n, 1.0 / np.sqrt(op.n))
        lam = 0.0
        for _ in range(iterations):
            w = np.real(A.conj().T @ (A @ v))
            lam = float(np.linalg.norm(w))
            if lam == 0.0:
                break
            v = w / lam
        op._cache[key] = lam
    return op._cache[key]


def _cpr_objective(A, x, y, rho, target):
    z = A @ x
    r = np.abs(z)
    val = float(np.sum((r - y) ** 2) + rho * np.sum((x - target) ** 2))
    return val, z, r


def subgradient_data_update(
    op: MeasurementOperator,
    x0,
    y,
    steps: int = 10,
    step_size: float | None = None,
    rho: float = 0.0,
    target=None,
) -> np.ndarray:
    """Backtracking subgradient descent on ``|| |Ax| - y ||^2 + rho ||x - target||^2``.

    The default step is ``1 / (2 (lambda_max(A^H A) + rho))``; the step is
    halved whenever a trial point would increase the objective, so the
    objective never increases.
    """
    if op.kind != "cpr":
        raise UnsupportedOperationError(f"subgradient update is defined for cpr operators, not {op.kind}")
    if steps < 1:
        raise ValueError("steps must be >= 1")
    y_values = np.asarray(y.values if isinstance(y, Measurement) else y, dtype=np.float64)
    x = op._check_signal(x0).copy()
    target = x.copy() if target is None else op._check_signal(target)
    if rho < 0:
        raise ValueError("rho must be nonnegative")
    A = op._dense()
    if step_size is None:
        lmax = _spectral_norm_sq(op)
        step_size = 1.0 / (2.0 * (lmax + rho)) if lmax + rho > 0 else 1.0
    f, z, r = _cpr_objective(A, x, y_values, rho, target)
    for _ in range(steps):
        # any unit phase is a valid subgradient of |z| at z = 0; phase 1 lets x = 0 move
        phase = np.divide(z, r, out=np.ones_like(z), where=r > 0)
        grad = 2.0 * np.real(A.conj().T @ ((r - y_values) * phase)) + 2.0 * rho * (x - target)
        if not np.any(grad):
            break
        for _ in range(40):
            trial = x - step_size * grad
            f_new, z_new, r_new = _cpr_objective(A, trial, y_values, rho, target)
            if f_new <= f:
                x, f, z, r = trial, f_new, z_new, r_new
                break
            step_size *= 0.5
        else:
            break
    return x
