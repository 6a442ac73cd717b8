"""Model configuration, variational parameter containers, initialization and checkpoints."""

from __future__ import annotations

import dataclasses
import json
import os
import struct
import tempfile
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np

from .errors import (
    CheckpointFormatError,
    CheckpointTruncatedError,
    CheckpointVersionError,
    FingerprintMismatchError,
    NumericError,
)
from .kernels import InducingKernel, KernelSpec, TimeTransform, build_inducing, place_inducing

CHECKPOINT_MAGIC = b"GDTMCKPT"
CHECKPOINT_VERSION = 1

INIT_SMOOTHING = 0.01
INIT_RIDGE = 1e-4


@dataclass(frozen=True)
class ModelConfig:
    num_topics: int = 10
    alpha: float | tuple[float, ...] = 0.1
    kernel: KernelSpec = field(
        default_factory=lambda: KernelSpec("ornstein_uhlenbeck", sigma2=1.0, length_scale=0.5)
    )
    num_inducing: int = 20
    inducing_placement: str = "quantile"
    jitter: float | None = None
    local_max_iters: int = 100
    local_tol: float = 1e-3
    step_tau0: float = 1.0
    step_decay: float = 0.7
    batch_size: int = 64
    num_steps: int = 1000
    seed: int = 0
    elbo_every: int = 1
    checkpoint_every: int = 0
    threads: int = 1

    def __post_init__(self):
        if isinstance(self.alpha, (list, tuple, np.ndarray)):
            object.__setattr__(self, "alpha", tuple(float(a) for a in self.alpha))
        if isinstance(self.kernel, Mapping):
            object.__setattr__(self, "kernel", KernelSpec.from_dict(self.kernel))
        if self.num_topics < 2:
            raise ValueError("num_topics must be >= 2")
        alpha = self.alpha_vector()
        if alpha.size != self.num_topics or np.any(alpha <= 0):
            raise ValueError("alpha must be positive, scalar or one value per topic")
        if self.num_inducing < 2:
            raise ValueError("num_inducing must be >= 2")
        if self.inducing_placement not in ("quantile", "equidistant"):
            raise ValueError(f"unknown inducing placement {self.inducing_placement!r}")
        if self.jitter is not None and self.jitter < 0:
            raise ValueError("jitter must be non-negative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.local_max_iters < 1:
            raise ValueError("local_max_iters must be >= 1")
        if self.step_tau0 < 0:
            raise ValueError("step_tau0 must be >= 0")
        if not 0.0 <= self.step_decay <= 1.0:
            raise ValueError("step_decay must lie in [0, 1]")
        if self.threads < 1:
            raise ValueError("threads must be >= 1")

    def alpha_vector(self) -> np.ndarray:
        if isinstance(self.alpha, tuple):
            return np.array(self.alpha, dtype=np.float64)
        return np.full(self.num_topics, float(self.alpha))

    def step_size(self, step: int) -> float:
        """Learning rate for the 1-based step number ``step``."""
        return float((step + self.step_tau0) ** (-self.step_decay))

    def to_dict(self) -> dict[str, Any]:
        out = dataclasses.asdict(self)
        out["kernel"] = self.kernel.to_dict()
        if isinstance(self.alpha, tuple):
            out["alpha"] = list(self.alpha)
        return out

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> ModelConfig:
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - names
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        kwargs = dict(data)
        if "kernel" in kwargs and isinstance(kwargs["kernel"], Mapping):
            kwargs["kernel"] = KernelSpec.from_dict(kwargs["kernel"])
        return cls(**kwargs)


def _batched_cholesky(a: np.ndarray, what: str) -> np.ndarray:
    try:
        return np.linalg.cholesky(a)
    except np.linalg.LinAlgError as exc:
        raise NumericError(f"{what} is not positive definite") from exc


@dataclass(frozen=True, eq=False)
class GlobalState:
    """Natural parameters of every ``q(u_kw)`` plus the log Taylor locations ``log zeta_kt``.

    Shapes: ``eta1`` (K, V, M), ``eta2`` (K, V, M, M), ``log_zeta`` (K, T).
    """

    eta1: np.ndarray
    eta2: np.ndarray
    log_zeta: np.ndarray
    step_count: int = 0

    @property
    def K(self) -> int:
        return self.eta1.shape[0]

    @property
    def V(self) -> int:
        return self.eta1.shape[1]

    @property
    def M(self) -> int:
        return self.eta1.shape[2]

    @property
    def zeta(self) -> np.ndarray:
        return np.exp(self.log_zeta)

    @cached_property
    def _mean_cov(self):
        precision = -2.0 * self.eta2
        chol_p = _batched_cholesky(precision, "-2 * eta2")
        cov = np.linalg.inv(precision)
        cov = 0.5 * (cov + np.swapaxes(cov, -1, -2))
        mean = np.linalg.solve(precision, self.eta1[..., None])[..., 0]
        logdet = -2.0 * np.sum(np.log(np.diagonal(chol_p, axis1=-2, axis2=-1)), axis=-1)
        return mean, cov, logdet

    @property
    def mean(self) -> np.ndarray:
        return self._mean_cov[0]

    @property
    def cov(self) -> np.ndarray:
        return self._mean_cov[1]

    @property
    def logdet_cov(self) -> np.ndarray:
        return self._mean_cov[2]

    @property
    def precision(self) -> np.ndarray:
        return -2.0 * self.eta2

    @classmethod
    def from_mean_cov(cls, mean, cov, log_zeta, step_count: int = 0) -> GlobalState:
        """Build a state whose cached ``(mean, cov)`` are exactly the given arrays."""
        mean = np.array(mean, dtype=np.float64)
        cov = np.array(cov, dtype=np.float64)
        chol = _batched_cholesky(cov, "covariance")
        precision = np.linalg.inv(cov)
        precision = 0.5 * (precision + np.swapaxes(precision, -1, -2))
        state = cls(
            eta1=np.einsum("kwij,kwj->kwi", precision, mean),
            eta2=-0.5 * precision,
            log_zeta=np.array(log_zeta, dtype=np.float64),
            step_count=step_count,
        )
        logdet = 2.0 * np.sum(np.log(np.diagonal(chol, axis1=-2, axis2=-1)), axis=-1)
        state.__dict__["_mean_cov"] = (mean, cov, logdet)
        return state

    def replace(self, **changes) -> GlobalState:
        return dataclasses.replace(self, **changes)


@dataclass(frozen=True, eq=False)
class LocalState:
    """Per-document variational parameters; ``phi[i]`` belongs to word ``words[i]``."""

    lam: np.ndarray
    words: np.ndarray
    phi: np.ndarray
    iterations: int = 0
    converged: bool = True


def build_model_inducing(corpus, config: ModelConfig) -> InducingKernel:
    """Inducing-point quantities for a corpus's (normalized) training times."""
    times = corpus.times
    inducing_times = place_inducing(times, config.num_inducing, config.inducing_placement)
    return build_inducing(config.kernel, times, inducing_times, config.jitter, corpus.transform)


def init_model(corpus, config: ModelConfig, inducing: InducingKernel) -> GlobalState:
    """Initialize ``q(u)`` from K randomly chosen documents per timestamp.

    Each topic's per-time target is the smoothed log word frequency of its
    document; the mean of ``q(u_kw)`` is the ridge least-squares fit of
    those targets through the projection rows, and the covariance is the
    prior ``K_UU``.
    """
    from .inference import project_moments, update_zeta

    if not np.array_equal(np.asarray(corpus.times), inducing.train_times):
        raise ValueError("corpus times and inducing train_times differ")
    K, V, T = config.num_topics, corpus.V, corpus.T
    rng = np.random.default_rng(config.seed)
    targets = np.empty((K, V, T))
    for t, members in enumerate(corpus.docs_by_time()):
        replace = len(members) < K
        chosen = rng.choice(len(members), size=K, replace=replace)
        for k, j in enumerate(chosen):
            doc = corpus.docs[members[j]]
            freq = np.zeros(V)
            freq[doc.words] = doc.counts
            targets[k, :, t] = np.log(
                (freq + INIT_SMOOTHING) / (doc.length + INIT_SMOOTHING * V)
            )
    A = inducing.proj
    M = inducing.num_inducing
    normal = A.T @ A + INIT_RIDGE * np.eye(M)
    mean = np.linalg.solve(normal, (targets @ A).reshape(-1, M).T).T.reshape(K, V, M)
    kinv = np.asarray(inducing.kinv)
    eta2 = np.broadcast_to(-0.5 * kinv, (K, V, M, M)).copy()
    eta1 = mean @ kinv
    state = GlobalState(eta1=eta1, eta2=eta2, log_zeta=np.zeros((K, T)))
    return update_zeta(state, project_moments(state, inducing))


# -- checkpoint file ----------------------------------------------------------
#
#   magic "GDTMCKPT" | u32 version | u64 header_nbytes | header (UTF-8 JSON)
#   then little-endian float64 arrays, in order:
#     inducing_times (M) | train_times (T) | eta1 (K*V*M, C order)
#     eta2 lower triangles (K*V*M(M+1)/2, row-major tril order) | log_zeta (K*T)


@dataclass(frozen=True, eq=False)
class Checkpoint:
    state: GlobalState
    config: ModelConfig
    inducing: InducingKernel
    terms: tuple[str, ...] = ()
    fingerprint: str = ""
    extra: dict = field(default_factory=dict)

    def __iter__(self):
        return iter((self.state, self.config, self.inducing))


def save_checkpoint(
    path: str | Path,
    state: GlobalState,
    config: ModelConfig,
    inducing: InducingKernel,
    terms: Sequence[str] = (),
    fingerprint: str = "",
    extra: Mapping[str, Any] | None = None,
) -> None:
    """Write a checkpoint atomically (temp file + rename)."""
    K, V, M = state.eta1.shape
    T = state.log_zeta.shape[1]
    header = {
        "config": config.to_dict(),
        "shape": {"K": K, "V": V, "M": M, "T": T},
        "step_count": int(state.step_count),
        "jitter": inducing.jitter,
        "transform": [inducing.transform.offset, inducing.transform.scale],
        "fingerprint": fingerprint,
        "terms": list(terms),
        "extra": dict(extra or {}),
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    rows, cols = np.tril_indices(M)
    payload = [
        CHECKPOINT_MAGIC,
        struct.pack("<IQ", CHECKPOINT_VERSION, len(hbytes)),
        hbytes,
        np.asarray(inducing.inducing_times, dtype="<f8").tobytes(),
        np.asarray(inducing.train_times, dtype="<f8").tobytes(),
        np.ascontiguousarray(state.eta1, dtype="<f8").tobytes(),
        np.ascontiguousarray(state.eta2[..., rows, cols], dtype="<f8").tobytes(),
        np.ascontiguousarray(state.log_zeta, dtype="<f8").tobytes(),
    ]
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(b"".join(payload))
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_checkpoint(path: str | Path, expected_fingerprint: str | None = None) -> Checkpoint:
    data = Path(path).read_bytes()
    if len(data) < len(CHECKPOINT_MAGIC) or data[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise CheckpointFormatError(f"{path}: not a gdtm checkpoint")
    pos = len(CHECKPOINT_MAGIC)
    if len(data) < pos + 12:
        raise CheckpointTruncatedError(f"{path}: truncated header")
    version, hlen = struct.unpack_from("<IQ", data, pos)
    pos += 12
    if version != CHECKPOINT_VERSION:
        raise CheckpointVersionError(
            f"{path}: checkpoint version {version}, this build reads {CHECKPOINT_VERSION}"
        )
    if len(data) < pos + hlen:
        raise CheckpointTruncatedError(f"{path}: truncated header")
    try:
        header = json.loads(data[pos : pos + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointFormatError(f"{path}: corrupt header") from exc
    pos += hlen
    fingerprint = header.get("fingerprint", "")
    if expected_fingerprint is not None and fingerprint != expected_fingerprint:
        raise FingerprintMismatchError(
            f"{path}: checkpoint was trained on corpus {fingerprint!r}, "
            f"not {expected_fingerprint!r}"
        )
    shape = header["shape"]
    K, V, M, T = shape["K"], shape["V"], shape["M"], shape["T"]
    ntri = M * (M + 1) // 2
    sizes = [M, T, K * V * M, K * V * ntri, K * T]
    expected = pos + 8 * sum(sizes)
    if len(data) < expected:
        raise CheckpointTruncatedError(
            f"{path}: expected {expected} bytes, found {len(data)}"
        )
    if len(data) > expected:
        raise CheckpointFormatError(f"{path}: trailing bytes after payload")
    arrays = []
    for n in sizes:
        arrays.append(np.frombuffer(data, dtype="<f8", count=n, offset=pos).astype(np.float64))
        pos += 8 * n
    inducing_times, train_times, eta1, tri, log_zeta = arrays
    rows, cols = np.tril_indices(M)
    eta2 = np.zeros((K, V, M, M))
    eta2[..., rows, cols] = tri.reshape(K, V, ntri)
    eta2[..., cols, rows] = tri.reshape(K, V, ntri)
    config = ModelConfig.from_dict(header["config"])
    offset, scale = header["transform"]
    inducing = build_inducing(
        config.kernel, train_times, inducing_times, header["jitter"], TimeTransform(offset, scale)
    )
    state = GlobalState(
        eta1=eta1.reshape(K, V, M),
        eta2=eta2,
        log_zeta=log_zeta.reshape(K, T),
        step_count=int(header["step_count"]),
    )
    return Checkpoint(
        state=state,
        config=config,
        inducing=inducing,
        terms=tuple(header.get("terms", ())),
        fingerprint=fingerprint,
        extra=header.get("extra", {}),
    )
