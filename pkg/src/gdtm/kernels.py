"""Covariance functions over time and the sparse inducing-point quantities.

All kernels act on *normalized* times (see :class:`TimeTransform`), so length
scales are expressed as fractions of the corpus time span.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any, Mapping

import numpy as np
from scipy.linalg import cho_solve

from .errors import DomainError, KernelSpecError, SingularKernelError

LEAF_VARIANTS = ("wiener", "ornstein_uhlenbeck", "squared_exponential", "cauchy")
COMBINATORS = ("sum", "product")

_ALIASES = {
    "wie": "wiener",
    "brownian": "wiener",
    "ou": "ornstein_uhlenbeck",
    "se": "squared_exponential",
    "rbf": "squared_exponential",
    "cau": "cauchy",
    "add": "sum",
    "prod": "product",
    "mul": "product",
}

_MAX_JITTER_RETRIES = 3
_DEFAULT_RELATIVE_JITTER = 1e-6


def canonical_variant(name: str) -> str:
    name = str(name).lower()
    return _ALIASES.get(name, name)


@dataclass(frozen=True)
class KernelSpec:
    """Declarative kernel description: a leaf kernel or a sum/product of two specs."""

    variant: str
    sigma2: float | None = None
    length_scale: float | None = None
    left: KernelSpec | None = None
    right: KernelSpec | None = None

    def __post_init__(self):
        variant = canonical_variant(self.variant)
        object.__setattr__(self, "variant", variant)
        if variant in COMBINATORS:
            if not isinstance(self.left, KernelSpec) or not isinstance(self.right, KernelSpec):
                raise KernelSpecError(f"{variant} kernel needs two child kernels")
            if self.sigma2 is not None or self.length_scale is not None:
                raise KernelSpecError(f"{variant} kernel takes no sigma2/length_scale of its own")
            return
        if variant not in LEAF_VARIANTS:
            raise KernelSpecError(f"unknown kernel variant {self.variant!r}")
        if self.left is not None or self.right is not None:
            raise KernelSpecError(f"leaf kernel {variant} cannot have children")
        if self.sigma2 is None or not (float(self.sigma2) > 0) or not math.isfinite(self.sigma2):
            raise KernelSpecError(f"{variant} kernel needs sigma2 > 0, got {self.sigma2!r}")
        object.__setattr__(self, "sigma2", float(self.sigma2))
        if variant == "wiener":
            if self.length_scale is not None:
                raise KernelSpecError("wiener kernel has no length_scale")
        else:
            ls = self.length_scale
            if ls is None or not (float(ls) > 0) or not math.isfinite(ls):
                raise KernelSpecError(f"{variant} kernel needs length_scale > 0, got {ls!r}")
            object.__setattr__(self, "length_scale", float(ls))

    @property
    def is_leaf(self) -> bool:
        return self.variant in LEAF_VARIANTS

    def contains(self, variant: str) -> bool:
        if self.is_leaf:
            return self.variant == variant
        return self.left.contains(variant) or self.right.contains(variant)

    def describe(self) -> str:
        if self.variant == "wiener":
            return f"wiener(sigma2={self.sigma2:g})"
        if self.is_leaf:
            return f"{self.variant}(sigma2={self.sigma2:g}, length_scale={self.length_scale:g})"
        return f"{self.variant}({self.left.describe()}, {self.right.describe()})"

    def to_dict(self) -> dict[str, Any]:
        if self.is_leaf:
            out: dict[str, Any] = {"variant": self.variant, "sigma2": self.sigma2}
            if self.length_scale is not None:
                out["length_scale"] = self.length_scale
            return out
        return {"variant": self.variant, "left": self.left.to_dict(), "right": self.right.to_dict()}

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> KernelSpec:
        if not isinstance(data, Mapping):
            raise KernelSpecError(f"kernel config must be a table, got {type(data).__name__}")
        unknown = set(data) - {"variant", "sigma2", "length_scale", "left", "right"}
        if unknown:
            raise KernelSpecError(f"unknown kernel keys: {sorted(unknown)}")
        if "variant" not in data:
            raise KernelSpecError("kernel config is missing 'variant'")
        left = data.get("left")
        right = data.get("right")
        return cls(
            variant=data["variant"],
            sigma2=data.get("sigma2"),
            length_scale=data.get("length_scale"),
            left=cls.from_dict(left) if left is not None else None,
            right=cls.from_dict(right) if right is not None else None,
        )


def _check_domain(spec: KernelSpec, *arrays: np.ndarray) -> None:
    if spec.contains("wiener"):
        for a in arrays:
            if np.any(a < 0):
                raise DomainError("wiener kernel is only defined for non-negative times")
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise DomainError("kernel times must be finite")


def _kernel_block(spec: KernelSpec, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Broadcast kernel evaluation; x is (n, 1) and y is (1, m)."""
    v = spec.variant
    if v == "sum":
        return _kernel_block(spec.left, x, y) + _kernel_block(spec.right, x, y)
    if v == "product":
        return _kernel_block(spec.left, x, y) * _kernel_block(spec.right, x, y)
    if v == "wiener":
        return spec.sigma2 * np.minimum(x, y)
    diff = x - y
    if v == "ornstein_uhlenbeck":
        return spec.sigma2 * np.exp(-np.abs(diff) / spec.length_scale)
    if v == "squared_exponential":
        return spec.sigma2 * np.exp(-(diff * diff) / (2.0 * spec.length_scale**2))
    if v == "cauchy":
        return spec.sigma2 / (1.0 + (diff * diff) / spec.length_scale**2)
    raise KernelSpecError(f"unknown kernel variant {v!r}")


def kernel_eval(spec: KernelSpec, tau: float, tau_prime: float) -> float:
    x = np.array([[float(tau)]])
    y = np.array([[float(tau_prime)]])
    _check_domain(spec, x, y)
    return float(_kernel_block(spec, x, y)[0, 0])


def gram_matrix(spec: KernelSpec, rows, cols=None) -> np.ndarray:
    """Kernel matrix between two time sequences.

    With ``cols`` omitted (or identical to ``rows``) the upper triangle is
    mirrored so the result is exactly symmetric.
    """
    r = np.asarray(rows, dtype=np.float64).ravel()
    same = cols is None
    c = r if same else np.asarray(cols, dtype=np.float64).ravel()
    if not same and c.shape == r.shape and np.array_equal(c, r):
        same = True
    _check_domain(spec, r, c)
    g = _kernel_block(spec, r[:, None], c[None, :])
    if same:
        g = np.triu(g) + np.triu(g, 1).T
    return g


@dataclass(frozen=True)
class TimeTransform:
    """Affine map from raw timestamps to normalized kernel time ``offset + scale * raw``."""

    offset: float = 0.0
    scale: float = 1.0

    @classmethod
    def fit(cls, unique_times) -> TimeTransform:
        """Map the sorted unique times onto ``[1/(2T), 1]``."""
        t = np.asarray(unique_times, dtype=np.float64)
        if t.size == 0:
            raise ValueError("cannot fit a time transform to zero timestamps")
        lo, hi = float(t.min()), float(t.max())
        eps = 1.0 / (2 * t.size)
        if hi == lo:
            return cls(offset=1.0 - lo, scale=1.0)
        scale = (1.0 - eps) / (hi - lo)
        return cls(offset=eps - scale * lo, scale=scale)

    def __call__(self, raw):
        out = self.offset + self.scale * np.asarray(raw, dtype=np.float64)
        return float(out) if out.ndim == 0 else out

    def inverse(self, normalized):
        out = (np.asarray(normalized, dtype=np.float64) - self.offset) / self.scale
        return float(out) if out.ndim == 0 else out


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class InducingKernel:
    """Precomputed sparse-GP quantities for one kernel, training times and inducing times.

    ``proj`` holds the rows ``a_t = K_tU K_UU^{-1}`` and ``ktilde`` the residual
    variances ``K_tt - a_t K_Ut``; the full residual matrix is never formed.
    """

    kernel: KernelSpec
    inducing_times: np.ndarray
    train_times: np.ndarray
    kuu: np.ndarray
    kinv: np.ndarray
    chol: np.ndarray
    proj: np.ndarray
    ktilde: np.ndarray
    jitter: float
    transform: TimeTransform = field(default_factory=TimeTransform)

    @property
    def num_inducing(self) -> int:
        return self.inducing_times.size

    @property
    def num_times(self) -> int:
        return self.train_times.size

    @property
    def logdet_kuu(self) -> float:
        return float(2.0 * np.sum(np.log(np.diag(self.chol))))


def _strictly_ascending(t: np.ndarray) -> bool:
    return bool(np.all(np.diff(t) > 0))


def _try_factor(kuu: np.ndarray):
    try:
        chol = np.linalg.cholesky(kuu)
    except np.linalg.LinAlgError:
        return None
    if not np.all(np.diag(chol) > 0):
        return None
    eye = np.eye(kuu.shape[0])
    kinv = cho_solve((chol, True), eye)
    kinv = 0.5 * (kinv + kinv.T)
    err = np.linalg.norm(kinv @ (chol @ chol.T) - eye, 2)
    if not np.isfinite(err) or err > 1e-8:
        return None
    return chol, kinv


def build_inducing(
    spec: KernelSpec,
    train_times,
    inducing_times,
    jitter: float | None = None,
    transform: TimeTransform | None = None,
) -> InducingKernel:
    """Factor the inducing gram matrix and project the training times onto it.

    ``jitter=None`` selects ``1e-6`` times the mean diagonal of ``K_UU``. On a
    failed (or inaccurate) factorization the jitter is multiplied by 10, at
    most three times.
    """
    tt = np.asarray(train_times, dtype=np.float64).ravel()
    ut = np.asarray(inducing_times, dtype=np.float64).ravel()
    if tt.size == 0 or ut.size == 0:
        raise ValueError("train_times and inducing_times must be non-empty")
    if not _strictly_ascending(tt):
        raise ValueError("train_times must be strictly ascending")
    if np.any(np.diff(ut) < 0):
        raise ValueError("inducing_times must be ascending")
    k_uu_raw = gram_matrix(spec, ut)
    if jitter is None:
        jitter = _DEFAULT_RELATIVE_JITTER * float(np.mean(np.diag(k_uu_raw)))
    if jitter < 0:
        raise ValueError("jitter must be non-negative")
    eye = np.eye(ut.size)
    factored = None
    for _ in range(_MAX_JITTER_RETRIES + 1):
        kuu = k_uu_raw + jitter * eye
        factored = _try_factor(kuu)
        if factored is not None:
            break
        jitter *= 10.0
    if factored is None:
        raise SingularKernelError(
            f"gram matrix of {spec.describe()} at inducing times {ut.tolist()} "
            f"is singular (final jitter {jitter / 10.0:g})"
        )
    chol, kinv = factored
    k_tu = gram_matrix(spec, tt, ut)
    # A = K_TU K_UU^{-1}, solved rather than multiplied by kinv
    proj = cho_solve((chol, True), k_tu.T).T
    k_tt = np.diag(gram_matrix(spec, tt))
    ktilde = np.maximum(k_tt - np.sum(proj * k_tu, axis=1), 0.0)
    return InducingKernel(
        kernel=spec,
        inducing_times=_readonly(ut.copy()),
        train_times=_readonly(tt.copy()),
        kuu=_readonly(kuu),
        kinv=_readonly(kinv),
        chol=_readonly(chol),
        proj=_readonly(proj),
        ktilde=_readonly(ktilde),
        jitter=float(jitter),
        transform=transform or TimeTransform(),
    )


def cross_row(inducing: InducingKernel, tau_star):
    """Projection row(s) and residual variance(s) at arbitrary normalized time(s).

    Returns ``(a, ktilde_star)``: for a scalar time ``a`` has shape ``(M,)``,
    for an array of ``n`` times ``(n, M)``.
    """
    scalar = np.ndim(tau_star) == 0
    ts = np.atleast_1d(np.asarray(tau_star, dtype=np.float64))
    spec = inducing.kernel
    k_su = gram_matrix(spec, ts, inducing.inducing_times)
    a = cho_solve((inducing.chol, True), k_su.T).T
    k_ss = np.array([kernel_eval(spec, t, t) for t in ts])
    kt = np.maximum(k_ss - np.sum(a * k_su, axis=1), 0.0)
    if scalar:
        return a[0], float(kt[0])
    return a, kt


def place_inducing(train_times, num_inducing: int, placement: str = "quantile") -> np.ndarray:
    """Choose inducing times from the (normalized) training times.

    ``quantile`` takes evenly spaced empirical quantiles of the unique
    training times; ``equidistant`` spaces points evenly between the first
    and last training time. When ``num_inducing >= T`` the training times
    themselves are returned.
    """
    t = np.unique(np.asarray(train_times, dtype=np.float64))
    if num_inducing < 1:
        raise ValueError("num_inducing must be >= 1")
    if num_inducing >= t.size:
        return t.copy()
    if num_inducing == 1:
        return np.array([float(np.median(t))])
    if placement == "quantile":
        return np.quantile(t, np.linspace(0.0, 1.0, num_inducing))
    if placement == "equidistant":
        return np.linspace(t[0], t[-1], num_inducing)
    raise ValueError(f"unknown inducing placement {placement!r}")
