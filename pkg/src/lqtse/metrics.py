"""SDR / SI-SDR, their improvements over the mixture, and the training loss.

All ratios are formed as ``(signal + EPS) / (error + EPS)`` and the resulting
decibel value is capped at :data:`CAP_DB`, so a perfect reconstruction
reports +100 dB instead of overflowing. For SI-SDR the estimate is first
scaled to unit energy so the floor cannot break scale invariance.
Everything is computed in float64.
"""

from __future__ import annotations

import csv
import io
from dataclasses import asdict, dataclass
from typing import Iterable

import numpy as np

from .errors import DimensionError, UndefinedReferenceError
from .signal import Waveform

EPS = 1e-12
CAP_DB = 100.0
_DB = 10.0 / np.log(10.0)


@dataclass(frozen=True)
class MetricReport:
    sdr_db: float
    si_sdr_db: float
    sdri_db: float
    si_sdri_db: float


def _as_array(x) -> np.ndarray:
    if isinstance(x, Waveform):
        x = x.samples
    return np.asarray(x, dtype=np.float64)


def _check(est: np.ndarray, ref: np.ndarray) -> None:
    if est.shape != ref.shape:
        raise DimensionError(f"estimate shape {est.shape} does not match reference shape {ref.shape}")
    if not np.any(ref, axis=-1).all():
        raise UndefinedReferenceError("reference signal is identically zero")


def _ratio_db(num: np.ndarray, den: np.ndarray) -> np.ndarray:
    return np.minimum(10.0 * np.log10((num + EPS) / (den + EPS)), CAP_DB)


def sdr(est, ref) -> np.ndarray | float:
    """Plain SDR in dB. Works on (..., N) arrays along the last axis."""
    est, ref = _as_array(est), _as_array(ref)
    _check(est, ref)
    out = _ratio_db(np.sum(ref * ref, axis=-1), np.sum((ref - est) ** 2, axis=-1))
    return float(out) if out.ndim == 0 else out


def _si_terms(est: np.ndarray, ref: np.ndarray):
    """Unit-energy estimate, its projection on ``ref``, the residual, and the original norm.

    Normalising first makes the EPS floor act on scale-free quantities, so
    SI-SDR stays exactly invariant to the estimate's scale.
    """
    norm = np.sqrt(np.sum(est * est, axis=-1, keepdims=True))
    unit = est / np.where(norm > 0, norm, 1.0)
    alpha = np.sum(unit * ref, axis=-1, keepdims=True) / np.sum(ref * ref, axis=-1, keepdims=True)
    proj = alpha * ref
    return unit, proj, unit - proj, norm


def si_sdr(est, ref) -> np.ndarray | float:
    """Scale-invariant SDR in dB (no mean removal). Works on (..., N) arrays."""
    est, ref = _as_array(est), _as_array(ref)
    _check(est, ref)
    _, proj, err, _ = _si_terms(est, ref)
    out = _ratio_db(np.sum(proj * proj, axis=-1), np.sum(err * err, axis=-1))
    return float(out) if out.ndim == 0 else out


def compute_metrics(est, mixture, ref) -> MetricReport:
    est, mixture, ref = _as_array(est), _as_array(mixture), _as_array(ref)
    if mixture.shape != ref.shape:
        raise DimensionError(f"mixture shape {mixture.shape} does not match reference shape {ref.shape}")
    s_est, s_mix = sdr(est, ref), sdr(mixture, ref)
    si_est, si_mix = si_sdr(est, ref), si_sdr(mixture, ref)
    return MetricReport(
        sdr_db=float(s_est),
        si_sdr_db=float(si_est),
        sdri_db=float(s_est - s_mix),
        si_sdri_db=float(si_est - si_mix),
    )


def batch_loss_and_grad(est: np.ndarray, ref: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Negative SI-SDR per row of (B, N) arrays and its exact gradient.

    With ``u = est/|est|``, projection ``s`` of ``u`` on ``ref`` and residual
    ``e = u - s``, the terms are ``A = |s|^2 + EPS`` and ``B = |e|^2 + EPS``.
    Because ``e`` is orthogonal to ``ref``, ``dA/du = 2 s`` and ``dB/du = 2 e``;
    the chain rule through the normalisation projects out the ``u`` direction
    and divides by ``|est|``. Rows at the cap get a zero gradient.
    """
    est, ref = _as_array(est), _as_array(ref)
    _check(est, ref)
    unit, proj, err, norm = _si_terms(est, ref)
    a = np.sum(proj * proj, axis=-1, keepdims=True) + EPS
    b = np.sum(err * err, axis=-1, keepdims=True) + EPS
    value = _DB * (np.log(a) - np.log(b))
    g_unit = _DB * (2.0 * proj / a - 2.0 * err / b)
    g_unit = g_unit - unit * np.sum(unit * g_unit, axis=-1, keepdims=True)
    grad = g_unit / np.where(norm > 0, norm, 1.0)
    dead = (value >= CAP_DB) | (norm == 0)
    value = np.where(value >= CAP_DB, CAP_DB, value)
    grad = np.where(dead, 0.0, grad)
    return -value[..., 0], -grad


def loss_and_grad(est, ref) -> tuple[float, np.ndarray]:
    """Negative SI-SDR of one signal and its gradient with respect to ``est``."""
    est, ref = _as_array(est), _as_array(ref)
    if est.ndim != 1:
        raise DimensionError(f"expected 1-D signals, got shape {est.shape}")
    loss, grad = batch_loss_and_grad(est[None, :], ref[None, :] if ref.ndim == 1 else ref)
    return float(loss[0]), grad[0]


CSV_FIELDS = ("example_id", "sdr", "si_sdr", "sdri", "si_sdri")


def report_rows(reports: Iterable[tuple[str, MetricReport]]) -> str:
    """Render reports as CSV text with six decimals."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_FIELDS)
    for example_id, rep in reports:
        writer.writerow([example_id] + [f"{v:.6f}" for v in asdict(rep).values()])
    return buf.getvalue()
