"""End-to-end finite-difference check of the training loss gradient."""

from __future__ import annotations

import numpy as np

from . import numerics as nx
from .metrics import neg_si_snr_loss
from .model import EnhancementSystem, gradcheck_config

THRESHOLDS = {"float64": 1e-6, "float32": 1e-3}

# Central differences with a 4-point stencil at h=1e-4 sit well clear of both
# roundoff (h too small) and ReLU/PReLU kinks (h too large) on these inputs.
DEFAULT_EPS = 1e-4
DEFAULT_STENCIL = 4


def loss_gradient_error(variant: str, dtype: str = "float64", seed: int = 3, length: int = 96,
                        eps: float = DEFAULT_EPS, stencil: int = DEFAULT_STENCIL) -> float:
    """Max relative error of d(loss)/d(params) against finite differences.

    Uses the gradient-check configuration of ``variant``. For float32 the
    analytic gradient comes from the float32 system while the finite
    differences are taken on a float64 copy with identical weights, so the
    check measures the backward rules and not float32 roundoff.
    """
    if dtype not in THRESHOLDS:
        raise ValueError(f"dtype must be one of {sorted(THRESHOLDS)}, got {dtype!r}")
    rng = np.random.default_rng(1)
    noisy = 0.3 * rng.normal(size=length)
    clean = 0.3 * rng.normal(size=length)

    system = EnhancementSystem(gradcheck_config(variant, dtype=dtype), seed=seed)

    def loss():
        return neg_si_snr_loss([system.forward(noisy)], [clean])

    twin = None
    if dtype == "float32":
        hi = EnhancementSystem(gradcheck_config(variant, dtype="float64"), seed=seed)
        for p, q in zip(system.parameters(), hi.parameters()):
            q.data[...] = p.data.astype(np.float64)
        twin = (lambda *_: neg_si_snr_loss([hi.forward(noisy)], [clean]), hi.parameters())
    return nx.grad_check(lambda *_: loss(), system.parameters(), eps=eps, stencil=stencil, twin=twin)
