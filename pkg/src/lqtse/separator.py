"""FiLM-conditioned spectral-mask separator with an analytic backward pass.

Per STFT frame ``t`` of the mixture spectrogram ``X``::

    f_t = log(|X_t| + 1e-8)                         (F,)
    u_t = W1 f_t + b1                               (H,)
    gamma = Wg c + bg,  beta = Wb c + bb            (H,)
    h_t = relu(gamma * u_t + beta)                  (H,)
    m_t = sigmoid(W2 h_t + b2)                      (F,)
    estimate = istft(m * X)

The mask is real and applied to the complex mixture bins, so the estimate
reuses the mixture phase. Arrays are batched: mixtures are (B, N) and
conditions (B, D). Computation follows the dtype of the parameters.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass, fields

import numpy as np

from scipy.special import expit

from .errors import CorruptCacheError, DimensionError, NonFiniteError
from .signal import N_BINS, analysis, synthesis, synthesis_adjoint

HIDDEN = 64
COND_DIM = 64
LOG_EPS = 1e-8


@dataclass
class SeparatorParams:
    W1: np.ndarray  # (H, F)
    b1: np.ndarray  # (H,)
    Wg: np.ndarray  # (H, D)
    bg: np.ndarray  # (H,)
    Wb: np.ndarray  # (H, D)
    bb: np.ndarray  # (H,)
    W2: np.ndarray  # (F, H)
    b2: np.ndarray  # (F,)

    @property
    def names(self) -> list[str]:
        return [f.name for f in fields(self)]

    def arrays(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in self.names}

    @property
    def dims(self) -> tuple[int, int, int]:
        """(F, H, D)"""
        return self.W1.shape[1], self.W1.shape[0], self.Wg.shape[1]

    @property
    def dtype(self) -> np.dtype:
        return self.W1.dtype

    def n_params(self) -> int:
        return sum(a.size for a in self.arrays().values())

    def copy(self) -> "SeparatorParams":
        return SeparatorParams(**{k: v.copy() for k, v in self.arrays().items()})

    def astype(self, dtype) -> "SeparatorParams":
        return SeparatorParams(**{k: v.astype(dtype) for k, v in self.arrays().items()})

    def zeros_like(self) -> "SeparatorParams":
        return SeparatorParams(**{k: np.zeros_like(v) for k, v in self.arrays().items()})

    def check_shapes(self) -> None:
        f, h, d = self.dims
        expected = {
            "W1": (h, f), "b1": (h,), "Wg": (h, d), "bg": (h,),
            "Wb": (h, d), "bb": (h,), "W2": (f, h), "b2": (f,),
        }
        for name, shape in expected.items():
            if getattr(self, name).shape != shape:
                raise DimensionError(f"{name} has shape {getattr(self, name).shape}, expected {shape}")

    def equal(self, other: "SeparatorParams") -> bool:
        return all(np.array_equal(a, b) for a, b in zip(self.arrays().values(), other.arrays().values()))


def n_params_for(f: int = N_BINS, h: int = HIDDEN, d: int = COND_DIM) -> int:
    return h * f + h + 2 * (h * d + h) + f * h + f


def init_params(seed: int, f: int = N_BINS, h: int = HIDDEN, d: int = COND_DIM, dtype=np.float64) -> SeparatorParams:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5E9]))

    def uniform(shape):
        bound = 1.0 / np.sqrt(shape[1])
        return rng.uniform(-bound, bound, size=shape).astype(dtype)

    return SeparatorParams(
        W1=uniform((h, f)), b1=np.zeros(h, dtype),
        Wg=uniform((h, d)), bg=np.zeros(h, dtype),
        Wb=uniform((h, d)), bb=np.zeros(h, dtype),
        W2=uniform((f, h)), b2=np.zeros(f, dtype),
    )


@dataclass
class ForwardTrace:
    spec: np.ndarray  # (B, F, T) mixture STFT
    feats: np.ndarray  # (B, T, F)
    cond: np.ndarray  # (B, D)
    u: np.ndarray  # (B, T, H)
    gamma: np.ndarray  # (B, H)
    pre: np.ndarray  # (B, T, H) FiLM output before relu
    hidden: np.ndarray  # (B, T, H)
    mask: np.ndarray  # (B, T, F)
    length: int
    dims: tuple[int, int, int]


def _as_batch(mixture: np.ndarray, cond: np.ndarray, dtype) -> tuple[np.ndarray, np.ndarray, bool]:
    x = np.asarray(mixture)
    c = np.asarray(cond)
    single = x.ndim == 1
    if single:
        x, c = x[None, :], c.reshape(1, -1)
    if c.ndim != 2 or c.shape[0] != x.shape[0]:
        raise DimensionError(f"condition batch shape {c.shape} does not match mixture batch {x.shape}")
    return x.astype(dtype, copy=False), c.astype(dtype, copy=False), single


def forward(params: SeparatorParams, mixture: np.ndarray, cond: np.ndarray, mask_override: np.ndarray | None = None):
    """Run the separator; returns ``(estimate, trace)``.

    ``mixture`` is (N,) or (B, N); ``cond`` is (D,) or (B, D).
    ``mask_override`` replaces the predicted (B, T, F) mask, for testing the
    linearity of the synthesis stage.
    """
    f_dim, h_dim, d_dim = params.dims
    x, c, single = _as_batch(mixture, cond, params.dtype)
    if c.shape[1] != d_dim:
        raise DimensionError(f"condition has dimension {c.shape[1]}, separator expects {d_dim}")
    spec = analysis(x)
    if spec.shape[1] != f_dim:
        raise DimensionError(f"spectrogram has {spec.shape[1]} bins, separator expects {f_dim}")
    mag = np.abs(spec).transpose(0, 2, 1)
    feats = np.log(mag + params.dtype.type(LOG_EPS))
    u = feats @ params.W1.T + params.b1
    gamma = c @ params.Wg.T + params.bg
    beta = c @ params.Wb.T + params.bb
    pre = gamma[:, None, :] * u + beta[:, None, :]
    hidden = np.maximum(pre, 0)
    logits = hidden @ params.W2.T + params.b2
    mask = expit(logits) if mask_override is None else np.asarray(mask_override, params.dtype)
    est = synthesis(spec * mask.transpose(0, 2, 1), x.shape[1])
    trace = ForwardTrace(spec, feats, c, u, gamma, pre, hidden, mask, x.shape[1], params.dims)
    return (est[0] if single else est), trace


def backward(params: SeparatorParams, trace: ForwardTrace, grad_est: np.ndarray) -> tuple[SeparatorParams, np.ndarray]:
    """Gradients of a scalar loss with respect to every parameter and to the condition.

    ``grad_est`` is dL/d(estimate) with the shape the forward call returned.
    Batch contributions are reduced by summation.
    """
    if trace.dims != params.dims:
        raise DimensionError(f"trace dims {trace.dims} do not match params {params.dims}")
    g = np.asarray(grad_est, dtype=params.dtype)
    if g.ndim == 1:
        g = g[None, :]
    if g.shape != (trace.spec.shape[0], trace.length):
        raise DimensionError(f"gradient shape {g.shape} does not match estimate ({trace.spec.shape[0]}, {trace.length})")
    f_dim, h_dim, _ = params.dims

    adj = synthesis_adjoint(g, trace.spec.shape[2])
    d_mask = np.real(trace.spec * np.conj(adj)).transpose(0, 2, 1)
    m = trace.mask
    d_logits = d_mask * m * (1 - m)
    flat_h = trace.hidden.reshape(-1, h_dim)
    flat_dz = d_logits.reshape(-1, f_dim)
    dW2 = flat_dz.T @ flat_h
    db2 = flat_dz.sum(axis=0)

    d_pre = (d_logits @ params.W2) * (trace.pre > 0)
    d_gamma = np.einsum("bth,bth->bh", d_pre, trace.u)
    d_beta = d_pre.sum(axis=1)
    d_u = d_pre * trace.gamma[:, None, :]
    dW1 = d_u.reshape(-1, h_dim).T @ trace.feats.reshape(-1, f_dim)
    db1 = d_u.reshape(-1, h_dim).sum(axis=0)

    dWg = d_gamma.T @ trace.cond
    dWb = d_beta.T @ trace.cond
    d_cond = d_gamma @ params.Wg + d_beta @ params.Wb
    grads = SeparatorParams(
        W1=dW1, b1=db1, Wg=dWg, bg=d_gamma.sum(axis=0), Wb=dWb, bb=d_beta.sum(axis=0), W2=dW2, b2=db2
    )
    return grads, d_cond


# ---------------------------------------------------------------------------
# optimisers
# ---------------------------------------------------------------------------


def _check_finite(grads: SeparatorParams) -> None:
    for name, g in grads.arrays().items():
        if not np.all(np.isfinite(g)):
            bad = int(np.size(g) - np.count_nonzero(np.isfinite(g)))
            raise NonFiniteError("non-finite gradient", block=name, n_bad=bad)


def sgd_step(params: SeparatorParams, grads: SeparatorParams, lr: float) -> SeparatorParams:
    _check_finite(grads)
    return SeparatorParams(**{k: p - lr * g for (k, p), g in zip(params.arrays().items(), grads.arrays().values())})


@dataclass
class AdamState:
    m: SeparatorParams
    v: SeparatorParams
    t: int = 0

    @classmethod
    def zeros(cls, params: SeparatorParams) -> "AdamState":
        return cls(params.zeros_like(), params.zeros_like(), 0)

    def copy(self) -> "AdamState":
        return AdamState(self.m.copy(), self.v.copy(), self.t)


def adam_step(
    params: SeparatorParams,
    grads: SeparatorParams,
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> tuple[SeparatorParams, AdamState]:
    """One bias-corrected Adam update; inputs are not modified."""
    _check_finite(grads)
    t = state.t + 1
    new_p, new_m, new_v = {}, {}, {}
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for name in params.names:
        p, g = getattr(params, name), getattr(grads, name)
        m = beta1 * getattr(state.m, name) + (1 - beta1) * g
        v = beta2 * getattr(state.v, name) + (1 - beta2) * g * g
        step = lr * (m / c1) / (np.sqrt(v / c2) + eps)
        new_p[name] = (p - step).astype(p.dtype, copy=False)
        new_m[name], new_v[name] = m.astype(p.dtype, copy=False), v.astype(p.dtype, copy=False)
    return SeparatorParams(**new_p), AdamState(SeparatorParams(**new_m), SeparatorParams(**new_v), t)


# ---------------------------------------------------------------------------
# checkpoints
#   b"SEP1" | u32 version | u32 F | u32 H | u32 D | u32 flags
#   W1 b1 Wg bg Wb bb W2 b2 as little-endian f32, row major
#   flags & 1: resume block  u64 step | u64 adam t | params, adam m, adam v as f64
# ---------------------------------------------------------------------------

_CKPT_HEADER = struct.Struct("<4sIIIII")
_CKPT_VERSION = 1
_FLAG_RESUME = 1


def _shapes(f: int, h: int, d: int) -> dict[str, tuple[int, ...]]:
    return {"W1": (h, f), "b1": (h,), "Wg": (h, d), "bg": (h,), "Wb": (h, d), "bb": (h,), "W2": (f, h), "b2": (f,)}


def save_checkpoint(
    path: str | os.PathLike,
    params: SeparatorParams,
    step: int | None = None,
    adam: AdamState | None = None,
) -> None:
    """Write params (f32); with ``step`` and ``adam`` also an exact f64 resume block."""
    f, h, d = params.dims
    resume = step is not None and adam is not None
    tmp = f"{os.fspath(path)}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(_CKPT_HEADER.pack(b"SEP1", _CKPT_VERSION, f, h, d, _FLAG_RESUME if resume else 0))
        for a in params.arrays().values():
            fh.write(np.ascontiguousarray(a, dtype="<f4").tobytes())
        if resume:
            fh.write(struct.pack("<QQ", step, adam.t))
            for group in (params, adam.m, adam.v):
                for a in group.arrays().values():
                    fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes())
    os.replace(tmp, path)


@dataclass
class Checkpoint:
    params: SeparatorParams  # float32 values from the main block
    step: int | None = None
    exact_params: SeparatorParams | None = None  # float64, resume block only
    adam: AdamState | None = None


def load_checkpoint(path: str | os.PathLike) -> Checkpoint:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < _CKPT_HEADER.size:
        raise CorruptCacheError("truncated checkpoint header", len(blob))
    magic, version, f, h, d, flags = _CKPT_HEADER.unpack_from(blob)
    if magic != b"SEP1":
        raise CorruptCacheError(f"bad magic {magic!r}", 0)
    if version != _CKPT_VERSION:
        raise CorruptCacheError(f"unsupported checkpoint version {version}", 4)
    shapes = _shapes(f, h, d)
    offset = _CKPT_HEADER.size

    def read_group(dtype: str) -> SeparatorParams:
        nonlocal offset
        out = {}
        for name, shape in shapes.items():
            n = int(np.prod(shape))
            size = n * np.dtype(dtype).itemsize
            if len(blob) < offset + size:
                raise CorruptCacheError(f"truncated block {name}", offset)
            out[name] = np.frombuffer(blob, dtype=dtype, count=n, offset=offset).reshape(shape).copy()
            offset += size
        return SeparatorParams(**out)

    params = read_group("<f4")
    ckpt = Checkpoint(params=params)
    if flags & _FLAG_RESUME:
        if len(blob) < offset + 16:
            raise CorruptCacheError("truncated resume header", offset)
        step, t = struct.unpack_from("<QQ", blob, offset)
        offset += 16
        exact = read_group("<f8")
        m = read_group("<f8")
        v = read_group("<f8")
        ckpt.step, ckpt.exact_params, ckpt.adam = step, exact, AdamState(m, v, t)
    if offset != len(blob):
        raise CorruptCacheError(f"{len(blob) - offset} trailing bytes", offset)
    return ckpt
