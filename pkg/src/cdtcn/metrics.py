"""SI-SNR metric, the negative SI-SNR training loss, and SNR-calibrated mixing."""

from __future__ import annotations

import math
from typing import Sequence, Tuple

import numpy as np

from .numerics import DimensionError, Tensor, custom_op

SNR_CLAMP_DB = 60.0
LOSS_EPS = 1e-8
_DB = 10.0 / math.log(10.0)


class DomainError(ValueError):
    """Input lies outside the domain of a metric (e.g. silent reference)."""


def _pair(estimate, reference) -> Tuple[np.ndarray, np.ndarray]:
    est = np.asarray(estimate, dtype=np.float64).reshape(-1)
    ref = np.asarray(reference, dtype=np.float64).reshape(-1)
    if est.shape != ref.shape:
        raise DimensionError(f"si_snr: length mismatch {est.shape[0]} vs {ref.shape[0]}")
    return est - est.mean(), ref - ref.mean()


def si_snr(estimate, reference, eps: float = 1e-12) -> float:
    """Scale-invariant SNR in dB, clamped to +-60."""
    est, ref = _pair(estimate, reference)
    ref_energy = float(ref @ ref)
    if ref_energy <= 0.0:
        raise DomainError("si_snr: reference has zero energy")
    target = (est @ ref) / ref_energy * ref
    err = est - target
    num = float(target @ target)
    den = float(err @ err)
    if den <= eps * max(num, eps):
        return SNR_CLAMP_DB
    if num <= eps * den:
        return -SNR_CLAMP_DB
    value = 10.0 * math.log10(num / den)
    return float(min(max(value, -SNR_CLAMP_DB), SNR_CLAMP_DB))


def energy_snr(clean, noise) -> float:
    """Plain power ratio of two components in dB."""
    c = np.asarray(clean, dtype=np.float64)
    n = np.asarray(noise, dtype=np.float64)
    return 10.0 * math.log10(float(c @ c) / float(n @ n))


def _si_snr_node(estimate: Tensor, reference: np.ndarray, eps: float) -> Tensor:
    """Unclamped SI-SNR of one estimate with an analytic gradient."""
    dt = estimate.dtype
    est, ref = _pair(estimate.data, reference)
    ref_energy = float(ref @ ref)
    if ref_energy <= 0.0:
        raise DomainError("neg_si_snr_loss: reference has zero energy")
    dot = float(est @ ref)
    target = dot / ref_energy * ref
    err = est - target
    a = float(target @ target)
    e = float(err @ err)
    ratio = a / (e + eps)
    value = _DB * math.log(ratio + eps)

    def backward(g):
        # d value / d est0 via d(ratio); centering projects the result
        coef = float(g) * _DB / (ratio + eps)
        d_ratio = (2.0 * target) / (e + eps) - a * (2.0 * err) / (e + eps) ** 2
        grad = coef * d_ratio
        return ((grad - grad.mean()).astype(dt),)

    return custom_op(np.asarray(value, dtype=dt), (estimate,), backward, "si_snr")


def neg_si_snr_loss(estimates: Sequence[Tensor], references: Sequence, eps: float = LOSS_EPS) -> Tensor:
    """Mean negative SI-SNR over a batch; differentiable in the estimates."""
    estimates = list(estimates)
    if not estimates or len(estimates) != len(references):
        raise DimensionError(
            f"neg_si_snr_loss: need a nonempty batch with matching references "
            f"({len(estimates)} estimates, {len(references)} references)"
        )
    nodes = [_si_snr_node(e, np.asarray(r), eps) for e, r in zip(estimates, references)]
    vals = np.array([float(n.data) for n in nodes])
    scale = -1.0 / len(nodes)
    dt = estimates[0].dtype
    return custom_op(
        np.asarray(scale * vals.sum(), dtype=dt),
        nodes,
        lambda g: tuple(np.asarray(scale * float(g), dtype=dt) for _ in nodes),
        "neg_si_snr",
    )


def mix_at_snr(clean, noise, snr_db: float, seed: int = 0) -> Tuple[np.ndarray, float]:
    """Add noise to clean speech at an exact energy SNR.

    A clean-length segment of ``noise`` is taken at a seeded random offset.
    Returns the mixture and the gain applied to that segment.
    """
    mixture, gain, _ = mix_components(clean, noise, snr_db, seed)
    return mixture, gain


def mix_components(clean, noise, snr_db: float, seed: int = 0):
    """Like :func:`mix_at_snr` but also returns the scaled noise segment."""
    clean = np.asarray(clean, dtype=np.float64)
    noise = np.asarray(noise, dtype=np.float64)
    T = clean.shape[0]
    if noise.shape[0] < T:
        raise DimensionError(f"mix_at_snr: noise ({noise.shape[0]}) shorter than clean ({T})")
    offset = int(np.random.default_rng(seed).integers(0, noise.shape[0] - T + 1))
    seg = noise[offset : offset + T]
    p_clean = float(clean @ clean) / T
    p_noise = float(seg @ seg) / T
    if p_clean <= 0.0 or p_noise <= 0.0:
        raise DomainError("mix_at_snr: clean and noise must both have nonzero power")
    gain = math.sqrt(p_clean / (p_noise * 10.0 ** (snr_db / 10.0)))
    scaled = gain * seg
    return clean + scaled, gain, scaled
